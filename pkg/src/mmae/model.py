"""Masked autoencoder over segment tokens at two time scales.

A record is cut into T segments.  The encoder sees one auxiliary token, the
visible global segments, and the visible segments of one local region (a
window of ``region_len`` consecutive segments starting at a configurable
offset).  Global and local tokens share the patch projection but draw from
disjoint rows of the positional tables, so the same waveform gets a
scale-dependent embedding.  A light decoder fills mask tokens back in and
reconstructs the normalized waveform of every masked segment.

All shapes are token-major: sequences are (n_tokens, dim) matrices.
Segment ids and region offsets are 0-based throughout.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor
from .data import normalize_segment, normalize_segment_per_lead
from .errors import ConfigError, ContractError, CorruptionError, FormatError

_CKPT_MAGIC = b"MMAE"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_leads: int
    segment_len: int
    n_segments: int
    region_len: int
    region_offsets: tuple[int, ...]
    embed_dim: int = 64
    decoder_dim: int = 64
    n_blocks: int = 3
    n_heads: int = 16
    n_decoder_heads: int = 2
    mlp_ratio: int = 4
    mask_ratio: float = 0.25
    round_half_up: bool = True
    final_layer_norm: bool = False
    raw_sum_loss: bool = False
    per_lead_norm: bool = False
    norm_eps: float = 1e-6
    ln_eps: float = 1e-8
    global_only: bool = False
    local_only: bool = False
    shared_local_positions: bool = False
    single_pool_mask: bool = False
    loss_all_segments: bool = False

    def __post_init__(self):
        object.__setattr__(self, "region_offsets", tuple(int(w) for w in self.region_offsets))
        self.validate()

    def validate(self) -> "ModelConfig":
        c = self
        if c.n_leads < 1 or c.segment_len < 1:
            raise ConfigError("n_leads and segment_len must be >= 1")
        if c.n_segments < 2:
            raise ConfigError("need at least two segments")
        if not 2 <= c.region_len < c.n_segments:
            raise ConfigError("region_len must be in [2, n_segments)")
        offs = c.region_offsets
        if not offs:
            raise ConfigError("need at least one region offset")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ConfigError("region offsets must be strictly increasing")
        if offs[0] < 0 or offs[-1] > c.n_segments - c.region_len:
            raise ConfigError(
                f"region offsets must lie in [0, {c.n_segments - c.region_len}]"
            )
        if c.embed_dim % c.n_heads or c.decoder_dim % c.n_decoder_heads:
            raise ConfigError("head count must divide its embedding dim")
        if c.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if not 0.0 < c.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if c.norm_eps <= 0 or c.ln_eps <= 0:
            raise ConfigError("eps values must be > 0")
        if c.global_only and c.local_only:
            raise ConfigError("global_only and local_only are mutually exclusive")
        return c

    @property
    def patch_dim(self) -> int:
        return self.n_leads * self.segment_len

    @property
    def n_samples(self) -> int:
        return self.n_segments * self.segment_len

    @property
    def n_regions(self) -> int:
        return len(self.region_offsets)

    def normalizer(self):
        if self.per_lead_norm:
            return lambda x: normalize_segment_per_lead(x, self.n_leads, self.norm_eps)
        return lambda x: normalize_segment(x, self.norm_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_offsets"] = list(self.region_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["region_offsets"] = tuple(d["region_offsets"])
        return cls(**d)


def full_scale_config(n_leads: int = 12, sample_rate_s: int = 5000) -> ModelConfig:
    """Full-size configuration used for standard 10 s, 500 Hz records."""
    if sample_rate_s % 40:
        raise ConfigError("record length must divide into 40 segments")
    return ModelConfig(
        n_leads=n_leads,
        segment_len=sample_rate_s // 40,
        n_segments=40,
        region_len=4,
        region_offsets=tuple(range(1, 34, 4)),
        embed_dim=64,
        decoder_dim=64,
        n_blocks=3,
        n_heads=16,
        n_decoder_heads=2,
        mlp_ratio=4,
        mask_ratio=0.25,
    )


def bracket_round(x: float, half_up: bool = True) -> int:
    """floor(x + 0.5) when half_up, plain floor otherwise."""
    return int(np.floor(x + 0.5)) if half_up else int(np.floor(x))


def masked_count(n: int, ratio: float, half_up: bool = True) -> int:
    """How many of ``n`` slots to mask: clamp(bracket(n * ratio), 1, n - 1)."""
    if n < 2:
        raise ConfigError("masking needs at least two slots")
    return int(np.clip(bracket_round(n * ratio, half_up), 1, n - 1))


def masked_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(global, local) mask counts for one pass."""
    return (
        masked_count(cfg.n_segments, cfg.mask_ratio, cfg.round_half_up),
        masked_count(cfg.region_len, cfg.mask_ratio, cfg.round_half_up),
    )


def build_local_regions(cfg: ModelConfig) -> tuple[tuple[int, ...], ...]:
    """Segment ids of each local region: offset w covers [w, w + region_len)."""
    return tuple(
        tuple(range(w, w + cfg.region_len)) for w in cfg.region_offsets
    )


# ---------------------------------------------------------------------------
# Mask plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Which segments are hidden in one forward pass.

    All four index tuples hold sorted absolute segment ids; the local tuples
    partition the region starting at ``region_offset``.
    """

    region_offset: int
    global_masked: tuple[int, ...]
    global_visible: tuple[int, ...]
    local_masked: tuple[int, ...]
    local_visible: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "region_offset": self.region_offset,
            "global_masked": list(self.global_masked),
            "global_visible": list(self.global_visible),
            "local_masked": list(self.local_masked),
            "local_visible": list(self.local_visible),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls(
            region_offset=int(d["region_offset"]),
            global_masked=tuple(d["global_masked"]),
            global_visible=tuple(d["global_visible"]),
            local_masked=tuple(d["local_masked"]),
            local_visible=tuple(d["local_visible"]),
        )


def _split(ids: np.ndarray, masked: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    masked_set = set(int(i) for i in masked)
    vis = tuple(int(i) for i in ids if int(i) not in masked_set)
    return tuple(sorted(masked_set)), vis


def sample_mask_plan(cfg: ModelConfig, region_offset: int,
                     rng: np.random.Generator,
                     local_masked: tuple[int, ...] | None = None) -> MaskPlan:
    """Draw one pass's masks, uniform without replacement in each stream.

    ``local_masked`` overrides the local draw (used by coverage-mode
    inference, which schedules local masks across passes itself).
    """
    if region_offset not in cfg.region_offsets:
        raise ContractError(f"offset {region_offset} is not one of {cfg.region_offsets}")
    if cfg.single_pool_mask:
        return _sample_single_pool(cfg, region_offset, rng)
    t = cfg.n_segments
    region = np.arange(region_offset, region_offset + cfg.region_len)
    s_m, r_m = masked_counts(cfg)
    g_mask = rng.choice(t, size=s_m, replace=False)
    if local_masked is None:
        l_mask = region[rng.choice(cfg.region_len, size=r_m, replace=False)]
    else:
        l_mask = np.asarray(local_masked, dtype=int)
        if len(set(l_mask.tolist())) != r_m or not set(l_mask.tolist()) <= set(region.tolist()):
            raise ContractError("local_masked must be r_m distinct ids inside the region")
    gm, gv = _split(np.arange(t), g_mask)
    lm, lv = _split(region, l_mask)
    return MaskPlan(region_offset=int(region_offset), global_masked=gm,
                    global_visible=gv, local_masked=lm, local_visible=lv)


def _sample_single_pool(cfg: ModelConfig, region_offset: int,
                        rng: np.random.Generator) -> MaskPlan:
    """Ablation sampler: one draw over the concatenated global+local slots.

    Slot ids < T are global segments; slot T + p is local position p.  The
    per-stream counts then vary pass to pass, and a stream may end up fully
    visible, so only the partition structure is guaranteed.
    """
    t, d = cfg.n_segments, cfg.region_len
    m = masked_count(t + d, cfg.mask_ratio, cfg.round_half_up)
    slots = rng.choice(t + d, size=m, replace=False)
    g_mask = slots[slots < t]
    l_mask = region_offset + (slots[slots >= t] - t)
    region = np.arange(region_offset, region_offset + d)
    gm, gv = _split(np.arange(t), g_mask)
    lm, lv = _split(region, l_mask)
    return MaskPlan(region_offset=int(region_offset), global_masked=gm,
                    global_visible=gv, local_masked=lm, local_visible=lv)


def validate_plan(plan: MaskPlan, cfg: ModelConfig) -> None:
    """Partition checks; raises ContractError on any overlap or gap."""
    t = cfg.n_segments
    if plan.region_offset not in cfg.region_offsets:
        raise ContractError(f"offset {plan.region_offset} not configured")
    g_all = sorted(plan.global_masked + plan.global_visible)
    if g_all != list(range(t)) or set(plan.global_masked) & set(plan.global_visible):
        raise ContractError("global masked/visible must partition the segments")
    region = list(range(plan.region_offset, plan.region_offset + cfg.region_len))
    l_all = sorted(plan.local_masked + plan.local_visible)
    if l_all != region or set(plan.local_masked) & set(plan.local_visible):
        raise ContractError("local masked/visible must partition the region")
    if not cfg.single_pool_mask:
        s_m, r_m = masked_counts(cfg)
        if len(plan.global_masked) != s_m or len(plan.local_masked) != r_m:
            raise ContractError(
                f"plan masks {len(plan.global_masked)}/{len(plan.local_masked)} slots, "
                f"expected {s_m}/{r_m}"
            )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, dim: int, mlp_ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    h = mlp_ratio * dim
    return [
        (f"{prefix}.ln1.g", (dim,)), (f"{prefix}.ln1.b", (dim,)),
        (f"{prefix}.attn.wq", (dim, dim)), (f"{prefix}.attn.bq", (dim,)),
        (f"{prefix}.attn.wk", (dim, dim)), (f"{prefix}.attn.bk", (dim,)),
        (f"{prefix}.attn.wv", (dim, dim)), (f"{prefix}.attn.bv", (dim,)),
        (f"{prefix}.attn.wo", (dim, dim)), (f"{prefix}.attn.bo", (dim,)),
        (f"{prefix}.ln2.g", (dim,)), (f"{prefix}.ln2.b", (dim,)),
        (f"{prefix}.mlp.w1", (dim, h)), (f"{prefix}.mlp.b1", (h,)),
        (f"{prefix}.mlp.w2", (h, dim)), (f"{prefix}.mlp.b2", (dim,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) list defining storage order."""
    p, d, d2 = cfg.patch_dim, cfg.embed_dim, cfg.decoder_dim
    t, dl = cfg.n_segments, cfg.region_len
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch.w", (p, d)), ("patch.b", (d,)),
        ("aux_token", (1, d)),
        ("enc_pos", (t + dl + 1, d)),
    ]
    for i in range(cfg.n_blocks):
        shapes += _block_shapes(f"enc{i}", d, cfg.mlp_ratio)
    if cfg.final_layer_norm:
        shapes += [("final_ln.g", (d,)), ("final_ln.b", (d,))]
    shapes += [
        ("dec_embed.w", (d, d2)), ("dec_embed.b", (d2,)),
        ("mask_token", (1, d2)),
        ("dec_pos", (t + dl, d2)),
    ]
    shapes += _block_shapes("dec", d2, cfg.mlp_ratio)
    shapes += [("out.w", (d2, p)), ("out.b", (p,))]
    return shapes


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...],
                 std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ModelParams:
    """Named tensor store; order follows param_shapes for serialization."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        missing = [n for n, _ in expected if n not in arrays]
        if missing:
            raise ContractError(f"missing parameters: {missing[:4]}")
        self._tensors: dict[str, Tensor] = {}
        for name, shape in expected:
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise ContractError(f"{name}: shape {arr.shape}, expected {shape}")
            self._tensors[name] = Tensor(arr, requires_grad=True, name=name)

    @classmethod
    def from_tensors(cls, config: ModelConfig,
                     tensors: dict[str, Tensor]) -> "ModelParams":
        """Wrap existing tensors without copying, preserving graph identity."""
        obj = cls.__new__(cls)
        obj.config = config
        obj._tensors = {}
        for name, shape in param_shapes(config):
            if name not in tensors:
                raise ContractError(f"missing parameter {name}")
            t = tensors[name]
            if t.data.shape != shape:
                raise ContractError(f"{name}: shape {t.data.shape}, expected {shape}")
            obj._tensors[name] = t
        return obj

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(config):
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
                arr = np.zeros(shape)
            elif leaf == "g":
                arr = np.ones(shape)
            else:
                arr = trunc_normal(rng, shape)
            arrays[name] = arr.astype(dtype)
        return cls(config, arrays)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n, _ in param_shapes(self.config)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def attention(self, prefix: str) -> AttentionParams:
        g = self._tensors
        return AttentionParams(
            wq=g[f"{prefix}.attn.wq"], bq=g[f"{prefix}.attn.bq"],
            wk=g[f"{prefix}.attn.wk"], bk=g[f"{prefix}.attn.bk"],
            wv=g[f"{prefix}.attn.wv"], bv=g[f"{prefix}.attn.bv"],
            wo=g[f"{prefix}.attn.wo"], bo=g[f"{prefix}.attn.bo"],
        )

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {n: t.data.astype(dtype) for n, t in self.named()})


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form learnable-value count for a configuration."""
    return sum(int(np.prod(shape)) for _, shape in param_shapes(cfg))


def parameter_breakdown(cfg: ModelConfig) -> dict[str, int]:
    groups: dict[str, int] = {}
    for name, shape in param_shapes(cfg):
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _transformer_block(params: ModelParams, prefix: str, z: Tensor,
                       n_heads: int, ln_eps: float) -> Tensor:
    g = params
    h = ad.layer_norm(z, g[f"{prefix}.ln1.g"], g[f"{prefix}.ln1.b"], eps=ln_eps)
    z = ad.add(ad.multi_head_self_attention(h, g.attention(prefix), n_heads), z)
    h = ad.layer_norm(z, g[f"{prefix}.ln2.g"], g[f"{prefix}.ln2.b"], eps=ln_eps)
    h = ad.add(ad.matmul(h, g[f"{prefix}.mlp.w1"]), g[f"{prefix}.mlp.b1"])
    h = ad.gelu(h)
    h = ad.add(ad.matmul(h, g[f"{prefix}.mlp.w2"]), g[f"{prefix}.mlp.b2"])
    return ad.add(h, z)


def _visible_tokens(plan: MaskPlan, cfg: ModelConfig) -> tuple[list[int], list[int], list[int]]:
    """(segment ids, encoder pos rows, decoder pos rows) for visible tokens."""
    t = cfg.n_segments
    ids: list[int] = []
    enc_rows: list[int] = []
    dec_rows: list[int] = []
    if not cfg.local_only:
        for s in plan.global_visible:
            ids.append(s)
            enc_rows.append(1 + s)
            dec_rows.append(s)
    if not cfg.global_only:
        for s in plan.local_visible:
            p = s - plan.region_offset
            ids.append(s)
            enc_rows.append(1 + s if cfg.shared_local_positions else t + 1 + p)
            dec_rows.append(s if cfg.shared_local_positions else t + p)
    return ids, enc_rows, dec_rows


def _masked_tokens(plan: MaskPlan, cfg: ModelConfig) -> tuple[list[int], list[bool], list[int]]:
    """(segment ids, is_local flags, decoder pos rows) for mask tokens."""
    t = cfg.n_segments
    ids: list[int] = []
    local: list[bool] = []
    dec_rows: list[int] = []
    if not cfg.local_only:
        for s in plan.global_masked:
            ids.append(s)
            local.append(False)
            dec_rows.append(s)
    if not cfg.global_only:
        for s in plan.local_masked:
            p = s - plan.region_offset
            ids.append(s)
            local.append(True)
            dec_rows.append(s if cfg.shared_local_positions else t + p)
    return ids, local, dec_rows


def encode(params: ModelParams, vectors: np.ndarray, plan: MaskPlan,
           cfg: ModelConfig) -> Tensor:
    """Token sequence -> encoder output, row 0 the auxiliary token.

    ``vectors`` is the (T, patch_dim) segment matrix of one record.
    """
    if vectors.shape != (cfg.n_segments, cfg.patch_dim):
        raise ContractError(
            f"segment matrix is {vectors.shape}, expected {(cfg.n_segments, cfg.patch_dim)}"
        )
    ids, enc_rows, _ = _visible_tokens(plan, cfg)
    x = Tensor(vectors[np.asarray(ids, dtype=int)])
    emb = ad.add(ad.matmul(x, params["patch.w"]), params["patch.b"])
    seq = ad.concat_rows([params["aux_token"], emb])
    pos = ad.gather_rows(params["enc_pos"], [0] + enc_rows)
    z = ad.add(seq, pos)
    for i in range(cfg.n_blocks):
        z = _transformer_block(params, f"enc{i}", z, cfg.n_heads, cfg.ln_eps)
    if cfg.final_layer_norm:
        z = ad.layer_norm(z, params["final_ln.g"], params["final_ln.b"], eps=cfg.ln_eps)
    return z


@dataclass
class DecodeResult:
    recon: Tensor                     # (n_out, patch_dim)
    out_segments: tuple[int, ...]     # absolute segment id per output row
    out_is_local: tuple[bool, ...]    # stream membership per output row


def decode(params: ModelParams, encoded: Tensor, plan: MaskPlan,
           cfg: ModelConfig) -> DecodeResult:
    """Project visible tokens down, append mask tokens, reconstruct.

    The auxiliary token is dropped before decoding.  Output rows cover the
    masked slots, or every slot when ``loss_all_segments`` is set, ordered
    visible-global, visible-local, masked-global, masked-local.
    """
    vis_ids, _, vis_dec_rows = _visible_tokens(plan, cfg)
    mask_ids, mask_local, mask_dec_rows = _masked_tokens(plan, cfg)
    n_vis, n_mask = len(vis_ids), len(mask_ids)

    body = ad.slice_rows(encoded, 1, 1 + n_vis)
    proj = ad.add(ad.matmul(body, params["dec_embed.w"]), params["dec_embed.b"])
    if n_mask:
        fills = ad.tile_row(params["mask_token"], n_mask)
        seq = ad.concat_rows([proj, fills])
    else:
        seq = proj
    pos = ad.gather_rows(params["dec_pos"], vis_dec_rows + mask_dec_rows)
    z = _transformer_block(params, "dec", ad.add(seq, pos), cfg.n_decoder_heads,
                           cfg.ln_eps)

    if cfg.loss_all_segments:
        out = z
        segs = tuple(vis_ids + mask_ids)
        n_g_vis = 0 if cfg.local_only else len(plan.global_visible)
        vis_flags = [False] * n_g_vis + [True] * (n_vis - n_g_vis)
        flags = tuple(vis_flags + mask_local)
    else:
        out = ad.slice_rows(z, n_vis, n_vis + n_mask)
        segs = tuple(mask_ids)
        flags = tuple(mask_local)
    recon = ad.add(ad.matmul(out, params["out.w"]), params["out.b"])
    return DecodeResult(recon=recon, out_segments=segs, out_is_local=flags)


@dataclass
class LossParts:
    loss_global: float
    loss_local: float

    @property
    def total(self) -> float:
        return self.loss_global + self.loss_local


@dataclass
class ForwardResult:
    recon: Tensor
    targets: np.ndarray
    out_segments: tuple[int, ...]
    out_is_local: tuple[bool, ...]
    loss_global: Tensor
    loss_local: Tensor
    loss_total: Tensor

    def loss_parts(self) -> LossParts:
        return LossParts(loss_global=float(self.loss_global.data),
                         loss_local=float(self.loss_local.data))


def _stream_loss(recon: Tensor, targets: np.ndarray, rows: list[int],
                 raw_sum: bool) -> Tensor:
    if not rows:
        return Tensor(np.asarray(0.0, dtype=targets.dtype))
    picked = ad.gather_rows(recon, rows)
    target = Tensor(targets[np.asarray(rows, dtype=int)])
    return ad.mse(picked, target, reduction="sum" if raw_sum else "mean")


def forward_pass(params: ModelParams, vectors: np.ndarray, plan: MaskPlan,
                 cfg: ModelConfig) -> ForwardResult:
    """Encode, decode, and score one masked view of a record."""
    encoded = encode(params, vectors, plan, cfg)
    dec = decode(params, encoded, plan, cfg)
    norm = cfg.normalizer()
    targets = np.stack([norm(vectors[s]) for s in dec.out_segments]) \
        if dec.out_segments else np.zeros((0, cfg.patch_dim), dtype=vectors.dtype)
    g_rows = [i for i, loc in enumerate(dec.out_is_local) if not loc]
    l_rows = [i for i, loc in enumerate(dec.out_is_local) if loc]
    lg = _stream_loss(dec.recon, targets, g_rows, cfg.raw_sum_loss)
    ll = _stream_loss(dec.recon, targets, l_rows, cfg.raw_sum_loss)
    return ForwardResult(
        recon=dec.recon, targets=targets,
        out_segments=dec.out_segments, out_is_local=dec.out_is_local,
        loss_global=lg, loss_local=ll, loss_total=ad.add(lg, ll),
    )


def reconstruction_loss(recon: np.ndarray, vectors: np.ndarray, plan: MaskPlan,
                        cfg: ModelConfig) -> LossParts:
    """Score an externally produced reconstruction against its targets.

    ``recon`` rows must follow the output layout that ``decode`` yields for
    the same plan and configuration.
    """
    ids_v, _, _ = _visible_tokens(plan, cfg)
    ids_m, local_m, _ = _masked_tokens(plan, cfg)
    if cfg.loss_all_segments:
        n_g_vis = 0 if cfg.local_only else len(plan.global_visible)
        segs = ids_v + ids_m
        flags = [False] * n_g_vis + [True] * (len(ids_v) - n_g_vis) + local_m
    else:
        segs, flags = ids_m, local_m
    recon = np.asarray(recon)
    if recon.shape != (len(segs), cfg.patch_dim):
        raise ContractError(
            f"reconstruction is {recon.shape}, expected {(len(segs), cfg.patch_dim)}"
        )
    norm = cfg.normalizer()
    losses = [0.0, 0.0]
    counts = [0, 0]
    for row, (s, loc) in enumerate(zip(segs, flags)):
        err = np.square(recon[row] - norm(vectors[s]))
        losses[loc] += err.sum() if cfg.raw_sum_loss else err.mean()
        counts[loc] += 1
    lg = losses[0] if cfg.raw_sum_loss or counts[0] == 0 else losses[0] / counts[0]
    ll = losses[1] if cfg.raw_sum_loss or counts[1] == 0 else losses[1] / counts[1]
    return LossParts(loss_global=float(lg), loss_local=float(ll))


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

def flop_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulate counts for one masked forward pass.

    Only matrix products are counted (projections, attention score and
    mixing products, MLPs); element-wise work is negligible next to them.
    """
    p, d, d2, r = cfg.patch_dim, cfg.embed_dim, cfg.decoder_dim, cfg.mlp_ratio
    t, dl = cfg.n_segments, cfg.region_len
    s_m, r_m = masked_counts(cfg)
    n_vis = 0
    if not cfg.local_only:
        n_vis += t - s_m
    if not cfg.global_only:
        n_vis += dl - r_m
    n_enc = 1 + n_vis
    n_dec = n_vis + ((0 if cfg.local_only else s_m) + (0 if cfg.global_only else r_m))
    n_out = n_dec if cfg.loss_all_segments else n_dec - n_vis
    return {
        "patch_proj": n_vis * p * d,
        "enc_attn_proj": cfg.n_blocks * 4 * n_enc * d * d,
        "enc_attn_mix": cfg.n_blocks * 2 * n_enc * n_enc * d,
        "enc_mlp": cfg.n_blocks * 2 * n_enc * d * (r * d),
        "dec_embed": n_vis * d * d2,
        "dec_attn_proj": 4 * n_dec * d2 * d2,
        "dec_attn_mix": 2 * n_dec * n_dec * d2,
        "dec_mlp": 2 * n_dec * d2 * (r * d2),
        "out_proj": n_out * d2 * p,
    }


def estimate_flops(cfg: ModelConfig) -> int:
    """FLOPs (multiply-accumulates) for one masked forward pass."""
    return sum(flop_breakdown(cfg).values())


def inference_flops(cfg: ModelConfig, n_passes: int) -> int:
    """Total cost of scoring one record with n_passes per region."""
    return estimate_flops(cfg) * cfg.n_regions * n_passes


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams) -> Path:
    """Binary container: magic, version, JSON header, float32 payload."""
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in params.named():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.data.shape),
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": _CKPT_VERSION,
        "config": params.config.to_dict(),
        "tensors": manifest,
    }, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path.name}: not a model checkpoint")
    version, header_len = struct.unpack("<HI", raw[4:10])
    if version != _CKPT_VERSION:
        raise FormatError(f"{path.name}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10:10 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path.name}: unreadable header ({exc})") from exc
    cfg = ModelConfig.from_dict(header["config"])
    payload = raw[10 + header_len:]
    expected = dict(param_shapes(cfg))
    arrays = {}
    for item in header["tensors"]:
        name, shape = item["name"], tuple(item["shape"])
        if name not in expected or expected[name] != shape:
            raise CorruptionError(f"{path.name}: unexpected tensor {name} {shape}")
        start, nbytes = item["offset"], item["nbytes"]
        if nbytes != 4 * int(np.prod(shape)) or start + nbytes > len(payload):
            raise CorruptionError(f"{path.name}: payload bounds wrong for {name}")
        arrays[name] = np.frombuffer(payload[start:start + nbytes],
                                     dtype="<f4").reshape(shape).copy()
    if len(arrays) != len(expected):
        raise CorruptionError(f"{path.name}: checkpoint misses tensors")
    return ModelParams(cfg, arrays)


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
