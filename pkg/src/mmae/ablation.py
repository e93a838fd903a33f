"""Ablation suite: retrain architectural variants, sweep theta and H.

Every variant trains from scratch with the same seed and data, then scores
the same test records, so differences in detection AUROC isolate the
architectural change.  The pass-count sweep is the exception: it re-scores
one trained checkpoint at several H instead of retraining.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import replace
from pathlib import Path

from .config import CliConfig
from .data import EcgRecord
from .errors import ConfigError
from .model import ModelConfig, checkpoint_digest, save_checkpoint
from .train import auroc, fit, score_records

VARIANT_FLAGS: dict[str, dict] = {
    "full": {},
    "global_only": {"global_only": True},
    "local_only": {"local_only": True},
    "shared_pos_embed": {"shared_local_positions": True},
    "single_pool_mask": {"single_pool_mask": True},
    "loss_all_segments": {"loss_all_segments": True},
}
SWEEPS = ("theta_sweep", "h_sweep")
THETA_GRID = (0.15, 0.25, 0.35, 0.75, 0.95)
H_GRID = (1, 2, 4, 8)


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name not in VARIANT_FLAGS:
        raise ConfigError(f"unknown ablation variant {name!r}")
    return replace(base, **VARIANT_FLAGS[name])


def _detection(params, test_records: list[EcgRecord], n_passes: int, seed: int,
               n_threads: int, local_mode: str) -> float:
    reports = score_records(params, test_records, n_passes=n_passes, seed=seed,
                            n_threads=n_threads, local_mode=local_mode)
    labels = [r.label == "abnormal" for r in test_records]
    return auroc([rep.sample_score for rep in reports], labels)


def run_ablation_suite(cfg: CliConfig, variants: list[str],
                       train_records: list[EcgRecord],
                       test_records: list[EcgRecord],
                       n_threads: int = 1, log=None,
                       out_path: str | Path | None = None) -> dict:
    """Train/evaluate each requested variant or sweep; returns comparison dict.

    ``variants`` mixes architectural names with the sweep tokens
    ``theta_sweep`` and ``h_sweep``.  All runs share ``cfg.train.seed`` for
    training and scoring, so the ``full`` entry reproduces a plain
    train-plus-eval run with the same seeds.
    """
    for name in variants:
        if name not in VARIANT_FLAGS and name not in SWEEPS:
            raise ConfigError(f"unknown ablation variant {name!r}")
    seed = cfg.train.seed
    n_passes = cfg.infer.n_passes
    local_mode = cfg.infer.local_mode

    def train_eval(model_cfg: ModelConfig, tag: str):
        if log:
            log(f"training {tag}")
        params, history = fit(train_records, model_cfg, cfg.train)
        det = _detection(params, test_records, n_passes, seed, n_threads, local_mode)
        if log:
            log(f"{tag}: detection auroc {det:.4f}")
        return params, det, history[-1]["mean_loss"] if history else None

    result: dict = {"train_seed": seed, "n_passes": n_passes,
                    "n_train": len(train_records), "n_test": len(test_records)}
    full_params = None

    names = [v for v in variants if v in VARIANT_FLAGS]
    if names:
        result["variants"] = {}
        for name in names:
            params, det, final_loss = train_eval(variant_config(cfg.model, name), name)
            result["variants"][name] = {"detection_auroc": det,
                                        "final_loss": final_loss}
            if name == "full":
                full_params = params

    if "theta_sweep" in variants:
        result["theta_sweep"] = {}
        for theta in THETA_GRID:
            model_cfg = replace(cfg.model, mask_ratio=theta)
            tag = f"theta={theta}"
            if theta == cfg.model.mask_ratio and full_params is not None:
                det = _detection(full_params, test_records, n_passes, seed,
                                 n_threads, local_mode)
            else:
                params, det, _ = train_eval(model_cfg, tag)
                if theta == cfg.model.mask_ratio and full_params is None:
                    full_params = params
            result["theta_sweep"][f"{theta:g}"] = det

    if "h_sweep" in variants:
        if full_params is None:
            full_params, _, _ = train_eval(variant_config(cfg.model, "full"), "full")
        with tempfile.TemporaryDirectory() as td:
            ckpt = Path(td) / "full.ckpt"
            save_checkpoint(ckpt, full_params)
            digest = checkpoint_digest(ckpt)
        sweep = {}
        for h in H_GRID:
            sweep[str(h)] = _detection(full_params, test_records, h, seed,
                                       n_threads, local_mode)
            if log:
                log(f"H={h}: detection auroc {sweep[str(h)]:.4f}")
        result["h_sweep"] = {"checkpoint_sha256": digest,
                             "detection_auroc": sweep}

    if out_path:
        Path(out_path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
