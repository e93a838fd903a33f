"""Training loop, multi-pass anomaly scoring, and evaluation metrics.

Training minimizes the two-stream reconstruction loss with decoupled weight
decay and a warmup-cosine learning-rate schedule.  Each batch draws one local
region shared by all records in the batch and fresh masks per record.

Scoring runs H stochastic passes per region and averages the pass losses into
one scalar per record; squared residuals are also scattered back onto the
(lead, sample) grid for point-level localization.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import EcgRecord, ManifestEntry, load_record, read_manifest, segment_record
from .errors import ConfigError, ContractError, MetricError, ValidationError
from .model import (
    MaskPlan,
    ModelConfig,
    ModelParams,
    forward_pass,
    masked_counts,
    sample_mask_plan,
    save_checkpoint,
)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 40
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError("need 0 < base_lr and 0 <= min_lr <= base_lr")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        return self


class AdamW:
    """Adam with decoupled weight decay, one moment pair per parameter."""

    def __init__(self, params: ModelParams, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t in params.named()}
        self._v = {n: np.zeros_like(t.data) for n, t in params.named()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, tensor in self.params.named():
            g = grads[name]
            if self.weight_decay:
                tensor.data *= 1.0 - lr * self.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            tensor.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                tensor.data.dtype)


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup then a single cosine decay reaching min_lr at the end."""
    if step < 0 or total_steps < 1 or step >= total_steps:
        raise ConfigError("need 0 <= step < total_steps")
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def _record_vectors(record: EcgRecord, cfg: ModelConfig) -> np.ndarray:
    if record.signal.shape != (cfg.n_leads, cfg.n_samples):
        raise ContractError(
            f"record {record.id!r} is {record.signal.shape}, model expects "
            f"{(cfg.n_leads, cfg.n_samples)}"
        )
    return segment_record(record.signal, cfg.n_segments).vectors()


def fit(records: list[EcgRecord], cfg: ModelConfig, train_cfg: TrainConfig,
        checkpoint_path: str | Path | None = None,
        history_path: str | Path | None = None,
        log=None) -> tuple[ModelParams, list[dict]]:
    """Train from scratch on normal records; returns params and epoch history.

    Every record must carry the ``normal`` label: the method learns the
    normal rhythm only, so an abnormal record in the training set is a
    pipeline bug worth failing loudly on.
    """
    train_cfg.validate()
    if not records:
        raise ValidationError("training set is empty")
    bad = [r.id for r in records if r.label != "normal"]
    if bad:
        raise ValidationError(f"training records must be normal-labeled, got: {bad[:5]}")
    vectors = [_record_vectors(r, cfg) for r in records]

    params = ModelParams.initialize(cfg, seed=train_cfg.seed)
    opt = AdamW(params, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    n = len(records)
    spe = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * spe
    warmup_steps = train_cfg.warmup_epochs * spe
    if total_steps and warmup_steps >= total_steps:
        warmup_steps = max(0, total_steps - 1)

    history: list[dict] = []
    hist_fh = open(history_path, "w") if history_path else None
    try:
        step = 0
        lr = 0.0
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
            loss_sum = 0.0
            for b0 in range(0, n, train_cfg.batch_size):
                batch = order[b0:b0 + train_cfg.batch_size]
                offset = cfg.region_offsets[int(rng.integers(cfg.n_regions))]
                grads = {name: np.zeros_like(t.data) for name, t in params.named()}
                for idx in batch:
                    plan = sample_mask_plan(cfg, offset, rng)
                    res = forward_pass(params, vectors[idx], plan, cfg)
                    gmap = ad.backward(res.loss_total, wrt=params.tensors())
                    for name, t in params.named():
                        grads[name] += gmap[t]
                    loss_sum += float(res.loss_total.data)
                inv = 1.0 / len(batch)
                for name in grads:
                    grads[name] *= inv
                lr = lr_schedule(step, total_steps, warmup_steps,
                                 train_cfg.base_lr, train_cfg.min_lr)
                opt.step(grads, lr)
                step += 1
            entry = {"epoch": epoch, "mean_loss": loss_sum / n, "lr": lr}
            history.append(entry)
            if hist_fh:
                hist_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                hist_fh.flush()
            if log:
                log(f"epoch {epoch}: loss {entry['mean_loss']:.5f} lr {lr:.2e}")
    finally:
        if hist_fh:
            hist_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params)
    return params, history


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass
class PassRecord:
    region_offset: int
    pass_index: int
    loss_global: float
    loss_local: float
    plan: MaskPlan

    @property
    def total(self) -> float:
        return self.loss_global + self.loss_local

    def to_dict(self) -> dict:
        return {
            "region_offset": self.region_offset,
            "pass_index": self.pass_index,
            "loss_global": self.loss_global,
            "loss_local": self.loss_local,
            "plan": self.plan.to_dict(),
        }


@dataclass
class AnomalyReport:
    record_id: str
    sample_score: float
    point_scores: np.ndarray          # (n_leads, n_samples) float64
    n_passes: int
    breakdown: list[PassRecord] = field(default_factory=list)


def _local_mask_schedule(cfg: ModelConfig, region: list[int], n_passes: int,
                         rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Coverage mode: walk shuffled pools so every id is masked before any
    repeats, never duplicating an id within one pass."""
    _, r_m = masked_counts(cfg)
    pool: list[int] = []
    out = []
    for _ in range(n_passes):
        take: list[int] = []
        while len(take) < r_m:
            if not pool:
                fresh = [s for s in region if s not in take]
                pool = [int(s) for s in rng.permutation(fresh)]
            take.append(pool.pop(0))
        out.append(tuple(sorted(take)))
    return out


def anomaly_score(params: ModelParams, record: EcgRecord, n_passes: int = 4,
                  seed=0, local_mode: str = "coverage",
                  normalize_by_visits: bool = False) -> AnomalyReport:
    """Average masked-reconstruction error over H passes of every region.

    ``local_mode`` is "coverage" (default: schedules local masks so all
    region segments get masked when H * r_m >= region_len) or "iid"
    (independent draws each pass).  Point scores hold accumulated squared
    residuals in normalized-waveform space divided by the pass count, or by
    each point's own visit count when ``normalize_by_visits`` is set.
    """
    if n_passes < 1:
        raise ConfigError("n_passes must be >= 1")
    if local_mode not in ("coverage", "iid"):
        raise ConfigError(f"unknown local_mode {local_mode!r}")
    cfg = params.config
    vectors = _record_vectors(record, cfg)
    rng = np.random.default_rng(seed)
    m = cfg.segment_len

    total = 0.0
    point = np.zeros((cfg.n_leads, cfg.n_samples), dtype=np.float64)
    visits = np.zeros((cfg.n_leads, cfg.n_samples), dtype=np.int64)
    breakdown: list[PassRecord] = []
    for offset in cfg.region_offsets:
        region = list(range(offset, offset + cfg.region_len))
        if local_mode == "coverage" and not cfg.single_pool_mask:
            schedule = _local_mask_schedule(cfg, region, n_passes, rng)
        else:
            schedule = [None] * n_passes
        for h in range(n_passes):
            plan = sample_mask_plan(cfg, offset, rng, local_masked=schedule[h])
            res = forward_pass(params, vectors, plan, cfg)
            parts = res.loss_parts()
            total += parts.total
            sq = np.square(np.asarray(res.recon.data, dtype=np.float64)
                           - res.targets.astype(np.float64))
            for row, s in enumerate(res.out_segments):
                point[:, s * m:(s + 1) * m] += sq[row].reshape(cfg.n_leads, m)
                visits[:, s * m:(s + 1) * m] += 1
            breakdown.append(PassRecord(
                region_offset=int(offset), pass_index=h,
                loss_global=parts.loss_global, loss_local=parts.loss_local,
                plan=plan))

    n_total = n_passes * cfg.n_regions
    if normalize_by_visits:
        point /= np.maximum(visits, 1)
    else:
        point /= n_total
    return AnomalyReport(record_id=record.id, sample_score=total / n_total,
                         point_scores=point, n_passes=n_passes,
                         breakdown=breakdown)


# ---------------------------------------------------------------------------
# Metrics and evaluation
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count
    half.  Computed from average ranks, so exact under ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have equal length")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("need both classes to rank")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    before = np.cumsum(counts) - counts
    avg_rank = before + (counts + 1) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def score_records(params: ModelParams, records: list[EcgRecord],
                  n_passes: int = 4, seed: int = 0, n_threads: int = 1,
                  local_mode: str = "coverage") -> list[AnomalyReport]:
    """Score a batch of records; per-record seeds depend only on position,
    so any thread count gives identical results."""

    def score_one(i: int) -> AnomalyReport:
        return anomaly_score(params, records[i], n_passes=n_passes,
                             seed=[seed, i], local_mode=local_mode)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return list(pool.map(score_one, range(len(records))))
    return [score_one(i) for i in range(len(records))]


def evaluate_manifest(params: ModelParams, manifest: str | Path | list[ManifestEntry],
                      n_passes: int = 4, seed: int = 0, n_threads: int = 1,
                      local_mode: str = "coverage",
                      report_path: str | Path | None = None) -> dict:
    """Score every record in a test manifest and compute AUROC metrics.

    Detection ranks abnormal records above normal ones by sample score.
    Localization pools point scores of all mask-bearing records against
    their ground-truth point masks; the key is omitted when no record
    carries a mask.
    """
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    if not entries:
        raise ValidationError("evaluation manifest is empty")
    records = []
    for entry in entries:
        rec = load_record(entry.path)
        if entry.label != "unlabeled" and rec.label != entry.label:
            rec = EcgRecord(id=rec.id, signal=rec.signal, fs=rec.fs,
                            label=entry.label, point_mask=rec.point_mask)
        if rec.label not in ("normal", "abnormal"):
            raise ValidationError(f"record {rec.id!r} needs a normal/abnormal label")
        records.append(rec)

    reports = score_records(params, records, n_passes=n_passes, seed=seed,
                            n_threads=n_threads, local_mode=local_mode)
    labels = np.array([r.label == "abnormal" for r in records])
    scores = np.array([rep.sample_score for rep in reports])
    out = {
        "detection_auroc": auroc(scores, labels),
        "n_normal": int((~labels).sum()),
        "n_abnormal": int(labels.sum()),
        "per_record": [
            {"id": rec.id, "label": rec.label, "score": rep.sample_score}
            for rec, rep in zip(records, reports)
        ],
    }
    masked = [(rep, rec) for rep, rec in zip(reports, records)
              if rec.point_mask is not None]
    if masked:
        point_scores = np.concatenate([rep.point_scores.ravel() for rep, _ in masked])
        point_labels = np.concatenate([rec.point_mask.ravel() for _, rec in masked])
        out["localization_auroc"] = auroc(point_scores, point_labels)
    if report_path:
        Path(report_path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out
