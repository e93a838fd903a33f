"""Multi-lead record handling: I/O, segmentation, normalization, synthesis.

Records are (K leads x Q samples) float32 matrices with a sampling rate and a
label.  The on-disk formats are a small binary container (ECGB) and plain CSV,
each with a JSON sidecar for metadata and an optional byte-mask file marking
anomalous points.  A seeded synthetic generator plus anomaly injectors make
the whole pipeline testable without any external dataset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ValidationError

LABELS = ("normal", "abnormal", "unlabeled")

_ECGB_MAGIC = b"ECGB"
_ECGB_VERSION = 1


@dataclass
class EcgRecord:
    """One multi-lead record: signal is (n_leads, n_samples), row per lead."""

    id: str
    signal: np.ndarray
    fs: int
    label: str = "unlabeled"
    point_mask: np.ndarray | None = None

    def __post_init__(self):
        self.signal = np.ascontiguousarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 2 or min(self.signal.shape) < 1:
            raise ValidationError(f"record {self.id!r}: signal must be 2-D (leads x samples)")
        if not np.isfinite(self.signal).all():
            raise ValidationError(f"record {self.id!r}: signal contains non-finite values")
        if self.label not in LABELS:
            raise ValidationError(f"record {self.id!r}: unknown label {self.label!r}")
        if self.point_mask is not None:
            self.point_mask = np.ascontiguousarray(self.point_mask, dtype=bool)
            if self.point_mask.shape != self.signal.shape:
                raise ValidationError(
                    f"record {self.id!r}: point_mask shape {self.point_mask.shape} "
                    f"!= signal shape {self.signal.shape}"
                )

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]


@dataclass
class SegmentGrid:
    """A record cut into T equal non-overlapping time slices.

    ``segments`` has shape (T, K, Q/T); concatenating slices along time
    reproduces the record exactly.
    """

    segments: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]

    @property
    def n_leads(self) -> int:
        return self.segments.shape[1]

    @property
    def segment_len(self) -> int:
        return self.segments.shape[2]

    def vectors(self) -> np.ndarray:
        """(T, K*Q/T) view: each segment flattened lead-major."""
        t, k, m = self.segments.shape
        return self.segments.reshape(t, k * m)

    def reassemble(self) -> np.ndarray:
        """Inverse of segment_record: back to the (K, Q) signal."""
        return np.concatenate(list(self.segments), axis=1)


def segment_record(record: EcgRecord | np.ndarray, n_segments: int) -> SegmentGrid:
    """Partition along time into ``n_segments`` equal slices.

    Slice t (0-based) holds samples [t*Q/T, (t+1)*Q/T) of every lead.
    """
    signal = record.signal if isinstance(record, EcgRecord) else np.asarray(record)
    k, q = signal.shape
    if n_segments < 1 or q % n_segments != 0:
        raise ConfigError(f"segment count {n_segments} does not divide record length {q}")
    m = q // n_segments
    # (K, T, m) -> (T, K, m)
    segs = np.ascontiguousarray(signal.reshape(k, n_segments, m).transpose(1, 0, 2))
    return SegmentGrid(segs)


def normalize_segment(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize a segment vector by its own mean and population variance."""
    if eps <= 0:
        raise ConfigError("normalization eps must be > 0")
    x = np.asarray(x)
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps)


def normalize_segment_per_lead(x: np.ndarray, n_leads: int, eps: float = 1e-6) -> np.ndarray:
    """Per-lead variant: statistics over each lead's slice separately."""
    if eps <= 0:
        raise ConfigError("normalization eps must be > 0")
    m = np.asarray(x).reshape(n_leads, -1)
    mu = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    return ((m - mu) / np.sqrt(var + eps)).reshape(np.asarray(x).shape)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the quasi-periodic synthetic multi-lead generator."""

    fs: int = 250
    duration: float = 5.0
    n_leads: int = 3
    heart_rate: float = 72.0
    heart_rate_jitter: float = 0.04   # fractional RR-interval jitter
    phase_offset: float = 0.3         # first beat position, fraction of RR
    lead_gains: tuple[float, ...] | None = None
    p_amp: float = 0.15
    qrs_amp: float = 1.0
    t_amp: float = 0.3
    noise_std: float = 0.03
    wander_amp: float = 0.08
    wander_freq: float = 0.33
    seed: int | list | tuple = 0
    trim_to_multiple: int | None = None   # crop tail so this divides n_samples

    def gains(self) -> np.ndarray:
        if self.lead_gains is not None:
            if len(self.lead_gains) != self.n_leads:
                raise ConfigError("lead_gains length must equal n_leads")
            return np.asarray(self.lead_gains, dtype=np.float64)
        # deterministic spread of per-lead amplitudes
        return 0.6 + 0.8 * (np.arange(self.n_leads) % 3) / 2.0

    def n_samples(self) -> int:
        q = int(round(self.fs * self.duration))
        if self.trim_to_multiple:
            q -= q % self.trim_to_multiple
        if q < 1:
            raise ConfigError("duration too short for requested trimming")
        return q


def _bump(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def _beat_times(cfg: SynthConfig, rng: np.random.Generator, t_end: float) -> np.ndarray:
    rr = 60.0 / cfg.heart_rate
    times = []
    t = cfg.phase_offset * rr
    while t < t_end + rr:
        times.append(t)
        t += rr * (1.0 + cfg.heart_rate_jitter * float(rng.uniform(-1.0, 1.0)))
    return np.asarray(times)


def synth_normal(cfg: SynthConfig) -> EcgRecord:
    """Seeded quasi-periodic record: P/QRS/T bumps per beat, wander, noise."""
    if cfg.heart_rate <= 0:
        raise ConfigError("heart_rate must be > 0")
    rng = np.random.default_rng(cfg.seed)
    q = cfg.n_samples()
    t = np.arange(q) / cfg.fs
    beats = _beat_times(cfg, rng, t[-1])

    shape = np.zeros(q)
    for c in beats:
        shape += cfg.p_amp * _bump(t, c - 0.16, 0.025)
        shape -= 0.15 * cfg.qrs_amp * _bump(t, c - 0.028, 0.012)
        shape += cfg.qrs_amp * _bump(t, c, 0.014)
        shape -= 0.2 * cfg.qrs_amp * _bump(t, c + 0.030, 0.014)
        shape += cfg.t_amp * _bump(t, c + 0.22, 0.055)

    gains = cfg.gains()
    signal = gains[:, None] * shape[None, :]
    # fixed per-lead wander phase keeps the baseline position-predictable
    phases = 2 * np.pi * np.arange(cfg.n_leads) / max(1, cfg.n_leads)
    signal += cfg.wander_amp * np.sin(2 * np.pi * cfg.wander_freq * t[None, :] + phases[:, None])
    signal += rng.normal(0.0, cfg.noise_std, size=signal.shape)
    seed_tag = "-".join(str(s) for s in cfg.seed) \
        if isinstance(cfg.seed, (list, tuple)) else str(cfg.seed)
    return EcgRecord(id=f"synth-{seed_tag}", signal=signal, fs=cfg.fs, label="normal")


ANOMALY_KINDS = ("widened_beat", "dropped_beat", "st_shift")


def _pick_beat_center(signal: np.ndarray, rng: np.random.Generator,
                      period: int, center_range: tuple[float, float]) -> int:
    """Index of the strongest deflection inside a randomly placed window."""
    q = signal.shape[1]
    lo = int(center_range[0] * q)
    hi = max(lo + period, int(center_range[1] * q) - period)
    start = int(rng.integers(lo, max(lo + 1, hi - period)))
    window = np.abs(signal[:, start:start + period]).mean(axis=0)
    return start + int(np.argmax(window))


def inject_anomaly(record: EcgRecord, kind: str, seed: int,
                   beat_period_s: float | None = None,
                   magnitude: float = 1.0,
                   center_range: tuple[float, float] = (0.15, 0.85)) -> EcgRecord:
    """Return an abnormal copy with ``point_mask`` true exactly where modified.

    ``widened_beat`` swaps one beat for a wider, larger deflection;
    ``dropped_beat`` fades one beat interval toward a linear bridge;
    ``st_shift`` raises or lowers the wave between a beat and the next by a
    smooth hump.  ``magnitude`` scales how strongly the waveform deviates
    (1.0 is the full effect) and ``center_range`` bounds where along the
    record the target beat is searched for, as fractions of its length.
    """
    if record.label != "normal":
        raise ValidationError("anomaly injection expects a normal-labeled record")
    if kind not in ANOMALY_KINDS:
        raise ConfigError(f"unknown anomaly kind {kind!r}")
    if magnitude <= 0:
        raise ConfigError("magnitude must be > 0")

    rng = np.random.default_rng(seed)
    original = record.signal.astype(np.float32)
    signal = original.copy()
    fs = record.fs
    period = int(round((beat_period_s or 0.85) * fs))
    center = _pick_beat_center(signal, rng, period, center_range)
    q = signal.shape[1]
    gains = np.abs(signal).max(axis=1)
    gains = gains / max(gains.max(), 1e-6)

    if kind == "widened_beat":
        half = int(0.45 * period)
        lo, hi = max(0, center - half), min(q, center + half)
        t = np.arange(lo, hi)
        peak = signal[:, lo:hi].max(axis=1)
        bump = np.exp(-0.5 * ((t - center) / (0.10 * period)) ** 2)
        edge = np.minimum(t - lo, hi - 1 - t) / max(1, int(0.2 * (hi - lo)))
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.clip(edge, 0.0, 1.0))
        ramp *= magnitude
        flat = signal[:, lo:hi] * (1.0 - ramp[None, :])
        signal[:, lo:hi] = flat + 1.6 * peak[:, None] * bump[None, :] * ramp[None, :]
    elif kind == "dropped_beat":
        half = int(0.5 * period)
        lo, hi = max(0, center - half), min(q, center + half)
        span = np.linspace(0.0, 1.0, hi - lo)
        bridge = signal[:, lo][:, None] * (1 - span) + signal[:, hi - 1][:, None] * span
        mix = min(1.0, magnitude)
        signal[:, lo:hi] = (1.0 - mix) * signal[:, lo:hi] + mix * bridge
    else:  # st_shift
        lo = center + int(0.05 * period)
        hi = min(q, lo + int(rng.integers(int(0.30 * period), int(0.55 * period))))
        span = np.arange(hi - lo)
        # smooth hump rather than a flat step: a constant offset inside one
        # segment would vanish under per-segment standardization
        hump = np.sin(np.pi * (span + 0.5) / (hi - lo)) ** 2
        shift = 0.55 * magnitude * float(rng.choice([-1.0, 1.0]))
        signal[:, lo:hi] += (shift * gains)[:, None] * hump[None, :]

    signal = signal.astype(np.float32)
    mask = signal != original
    if not mask.any():
        raise ValidationError("anomaly injection modified no points")
    return EcgRecord(id=f"{record.id}-{kind}", signal=signal, fs=fs,
                     label="abnormal", point_mask=mask)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def _mask_path(path: Path) -> Path:
    return path.with_name(path.stem + ".mask")


def save_record(record: EcgRecord, path: str | Path) -> Path:
    """Write a record as .ecgb or .csv (by suffix) plus its JSON sidecar."""
    path = Path(path)
    k, q = record.signal.shape
    if path.suffix == ".ecgb":
        header = _ECGB_MAGIC + struct.pack("<HHII", _ECGB_VERSION, k, q, int(record.fs))
        path.write_bytes(header + record.signal.astype("<f4").tobytes())
    elif path.suffix == ".csv":
        leads = ",".join(f"lead_{i + 1}" for i in range(k))
        rows = "\n".join(
            ",".join(f"{v:.9g}" for v in record.signal[:, j]) for j in range(q)
        )
        path.write_text(leads + "\n" + rows + "\n")
    else:
        raise ConfigError(f"unsupported record suffix {path.suffix!r}")

    meta = {"id": record.id, "label": record.label, "fs": int(record.fs)}
    if record.point_mask is not None:
        mask_file = _mask_path(path)
        mask_file.write_bytes(record.point_mask.astype(np.uint8).tobytes())
        meta["mask_path"] = mask_file.name
    _meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_record(path: str | Path) -> EcgRecord:
    """Read an .ecgb or .csv record and its sidecar metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta = {}
    mp = _meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())

    if path.suffix == ".ecgb":
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:4] != _ECGB_MAGIC:
            raise FormatError(f"{path.name}: not an ECGB file")
        version, k, q, fs = struct.unpack("<HHII", raw[4:16])
        if version != _ECGB_VERSION:
            raise FormatError(f"{path.name}: unsupported ECGB version {version}")
        payload = raw[16:]
        if len(payload) != 4 * k * q:
            raise CorruptionError(
                f"{path.name}: payload holds {len(payload) // 4} floats, header says {k * q}"
            )
        signal = np.frombuffer(payload, dtype="<f4").reshape(k, q)
    elif path.suffix == ".csv":
        with path.open() as fh:
            header = fh.readline().strip()
            if not header:
                raise FormatError(f"{path.name}: empty CSV")
            data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        k = len(header.split(","))
        if data.shape[1] != k:
            raise CorruptionError(f"{path.name}: rows have {data.shape[1]} columns, header {k}")
        signal = data.T.astype(np.float32)
        if "fs" not in meta:
            raise FormatError(f"{path.name}: CSV needs fs in its sidecar")
        fs = meta["fs"]
    else:
        raise ConfigError(f"unsupported record suffix {path.suffix!r}")

    mask = None
    if meta.get("mask_path"):
        mask_raw = (path.parent / meta["mask_path"]).read_bytes()
        if len(mask_raw) != signal.size:
            raise CorruptionError(f"{path.name}: mask size {len(mask_raw)} != {signal.size}")
        mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(signal.shape).astype(bool)

    return EcgRecord(
        id=meta.get("id", path.stem),
        signal=signal,
        fs=int(fs),
        label=meta.get("label", "unlabeled"),
        point_mask=mask,
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: Path
    label: str
    id: str | None = None


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> Path:
    """JSON list of {path, label}; paths stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    items = []
    for e in entries:
        p = Path(e.path).resolve()
        try:
            rel = p.relative_to(base)
        except ValueError:
            rel = p
        items.append({"path": str(rel), "label": e.label})
    path.write_text(json.dumps(items, indent=2) + "\n")
    return path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    try:
        items = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: not valid JSON ({exc})") from exc
    if not isinstance(items, list):
        raise FormatError(f"{path.name}: manifest must be a JSON list")
    out = []
    for item in items:
        p = Path(item["path"])
        if not p.is_absolute():
            p = base / p
        out.append(ManifestEntry(path=p, label=item.get("label", "unlabeled")))
    return out


def load_manifest_records(path: str | Path) -> list[EcgRecord]:
    records = []
    for entry in read_manifest(path):
        rec = load_record(entry.path)
        if entry.label != "unlabeled":
            rec = replace(rec, label=entry.label)
        records.append(rec)
    return records


def build_manifests(root: str | Path, train_out: str | Path, test_out: str | Path) -> tuple[int, int]:
    """Map a directory of exported records into train/test manifests.

    Uses ``root/train`` and ``root/test`` subdirectories when present;
    otherwise routes normal-labeled records to the train manifest and the
    rest to the test manifest.
    """
    root = Path(root)

    def scan(directory: Path) -> list[ManifestEntry]:
        found = []
        for p in sorted(directory.rglob("*")):
            if p.suffix in (".ecgb", ".csv"):
                rec_meta = _meta_path(p)
                label = "unlabeled"
                if rec_meta.exists():
                    label = json.loads(rec_meta.read_text()).get("label", "unlabeled")
                found.append(ManifestEntry(path=p, label=label))
        return found

    if (root / "train").is_dir() and (root / "test").is_dir():
        train_entries = scan(root / "train")
        test_entries = scan(root / "test")
    else:
        everything = scan(root)
        train_entries = [e for e in everything if e.label == "normal"]
        test_entries = [e for e in everything if e.label != "normal"]
    write_manifest(train_out, train_entries)
    write_manifest(test_out, test_entries)
    return len(train_entries), len(test_entries)
