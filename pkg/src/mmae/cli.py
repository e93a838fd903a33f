"""Command-line front end: synth, train, score, eval, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``MMAE_SEED`` overrides config-file seeds (explicit flags still win) and
``MMAE_THREADS`` caps scoring worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .ablation import run_ablation_suite
from .config import CliConfig, load_config, synth_record
from .data import (
    ANOMALY_KINDS,
    ManifestEntry,
    load_record,
    save_record,
    write_manifest,
)
from .errors import ConfigError, MmaeError
from .gradcheck import run_suite
from .model import load_checkpoint
from .plot import render_localization_svg
from .train import anomaly_score, evaluate_manifest, fit

_ENV_SEED = "MMAE_SEED"
_ENV_THREADS = "MMAE_THREADS"


def _env_seed() -> int | None:
    raw = os.environ.get(_ENV_SEED)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{_ENV_SEED} must be an integer, got {raw!r}")


def _thread_count(requested: int | None) -> int:
    raw = os.environ.get(_ENV_THREADS)
    cap = None
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"{_ENV_THREADS} must be an integer, got {raw!r}")
    n = requested if requested is not None else (cap if cap else 1)
    if cap:
        n = min(n, cap)
    return max(1, n)


def _resolve_seed(flag: int | None, config_seed: int) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return env if env is not None else config_seed


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmae",
        description="Masked multi-scale autoencoder for multi-lead anomaly detection.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--n-normal", type=int, help="training normals")
    p.add_argument("--n-abnormal", type=int, help="test abnormals")
    p.add_argument("--n-test-normal", type=int, help="test normals")
    p.add_argument("--fs", type=int, help="sampling rate override")
    p.add_argument("--duration", type=float, help="record seconds override")
    p.add_argument("--leads", type=int, help="lead count override")
    p.add_argument("--seed", type=int, help="corpus seed")

    p = sub.add_parser("train", help="fit a model on a manifest of normals")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="epoch-history JSONL path")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--quiet", action="store_true", help="no progress lines")

    p = sub.add_parser("score", help="score one record against a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="record path (.ecgb or .csv)")
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--passes", type=int, help="masked passes per region")
    p.add_argument("--seed", type=int, help="scoring seed")
    p.add_argument("--mode", choices=("coverage", "iid"), help="local mask mode")
    p.add_argument("--svg", help="also render a localization figure here")
    p.add_argument("--leads", help="leads for the figure, e.g. 1,2 or L1,L2")
    p.add_argument("--window", help="sample window A:B for the figure")

    p = sub.add_parser("eval", help="score a test manifest and compute AUROC")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--passes", type=int, help="masked passes per region")
    p.add_argument("--seed", type=int, help="scoring seed")
    p.add_argument("--threads", type=int, help="scoring worker threads")
    p.add_argument("--mode", choices=("coverage", "iid"), help="local mask mode")
    p.add_argument("--localization", action="store_true",
                   help="require point-level AUROC (fails without masks)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--double", action="store_true",
                   help="strict double-precision bounds (1e-4 ops, 1e-3 end-to-end)")
    p.add_argument("--seeds", type=int, default=1, help="random draws per op")

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--variants", required=True,
                   help="comma list: full,global_only,local_only,shared_pos_embed,"
                        "single_pool_mask,loss_all_segments,theta_sweep,h_sweep")
    p.add_argument("--out", required=True, help="comparison JSON path")
    p.add_argument("--data-train", help="training manifest (default: synthesize)")
    p.add_argument("--data-test", help="test manifest (default: synthesize)")
    p.add_argument("--threads", type=int, help="scoring worker threads")
    p.add_argument("--seed", type=int, help="shared seed override")
    p.add_argument("--quiet", action="store_true", help="no progress lines")
    return parser


def _log(quiet: bool):
    if quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr)


def _synth_corpus(cfg: CliConfig, out: Path, seed: int, log=None):
    """Write train/ and test/ record trees plus the two manifests."""
    data = cfg.data
    trim = cfg.model.n_segments
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    train_entries, test_entries = [], []

    for i in range(data.n_normal):
        rec = synth_record(data, [seed, 0, i], trim_to=trim,
                           record_id=f"train-normal-{i:04d}")
        path = save_record(rec, out / "train" / f"{rec.id}.ecgb")
        train_entries.append(ManifestEntry(path=path, label="normal"))
    for i in range(data.n_test_normal):
        rec = synth_record(data, [seed, 1, i], trim_to=trim,
                           record_id=f"test-normal-{i:04d}")
        path = save_record(rec, out / "test" / f"{rec.id}.ecgb")
        test_entries.append(ManifestEntry(path=path, label="normal"))
    for i in range(data.n_abnormal):
        kind = ANOMALY_KINDS[i % len(ANOMALY_KINDS)]
        rec = synth_record(data, [seed, 2, i], kind=kind, trim_to=trim,
                           record_id=f"test-abnormal-{i:04d}")
        path = save_record(rec, out / "test" / f"{rec.id}.ecgb")
        test_entries.append(ManifestEntry(path=path, label="abnormal"))

    train_manifest = write_manifest(out / "train_manifest.json", train_entries)
    test_manifest = write_manifest(out / "test_manifest.json", test_entries)
    if log:
        log(f"wrote {len(train_entries)} train / {len(test_entries)} test records")
    return train_manifest, test_manifest


def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.fs is not None:
        cfg.data.fs = args.fs
    if args.duration is not None:
        cfg.data.duration = args.duration
    if args.leads is not None:
        cfg.data.n_leads = args.leads
    if args.n_normal is not None:
        cfg.data.n_normal = args.n_normal
    if args.n_abnormal is not None:
        cfg.data.n_abnormal = args.n_abnormal
    if args.n_test_normal is not None:
        cfg.data.n_test_normal = args.n_test_normal
    cfg.data.validate()
    seed = _resolve_seed(args.seed, cfg.train.seed)
    _synth_corpus(cfg, Path(args.out), seed, log=_log(False))
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None or _env_seed() is not None:
        cfg.train.seed = _resolve_seed(args.seed, cfg.train.seed)
    from .data import load_manifest_records
    records = load_manifest_records(args.data)
    fit(records, cfg.model, cfg.train, checkpoint_path=args.out,
        history_path=args.history, log=_log(args.quiet))
    return 0


def _parse_leads(raw: str | None, n_leads: int) -> list[int] | None:
    """"1,3" or "L1,L3" (1-based labels) -> 0-based indices."""
    if raw is None:
        return None
    out = []
    for item in raw.split(","):
        item = item.strip().lstrip("Ll")
        if not item.isdigit() or int(item) < 1:
            raise ConfigError(f"bad lead label {item!r}; use e.g. 1,2 or L1,L2")
        out.append(int(item) - 1)
    if any(ld >= n_leads for ld in out):
        raise ConfigError(f"record has {n_leads} leads; got {raw!r}")
    return out


def _parse_window(raw: str | None) -> tuple[int, int] | None:
    if raw is None:
        return None
    parts = raw.split(":")
    if len(parts) != 2:
        raise ConfigError(f"window must be A:B, got {raw!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"window bounds must be integers, got {raw!r}")


def _cmd_score(args) -> int:
    params = load_checkpoint(args.model)
    record = load_record(args.input)
    seed = _resolve_seed(args.seed, 0)
    report = anomaly_score(params, record,
                           n_passes=args.passes if args.passes else 4,
                           seed=seed, local_mode=args.mode or "coverage")
    doc = {
        "id": report.record_id,
        "sample_score": report.sample_score,
        "n_passes": report.n_passes,
        "n_regions": params.config.n_regions,
        "breakdown": [p.to_dict() for p in report.breakdown],
        "point_scores": [[round(float(v), 10) for v in row]
                         for row in report.point_scores],
    }
    Path(args.report).write_text(json.dumps(doc, sort_keys=True) + "\n")
    if args.svg:
        leads = _parse_leads(args.leads, record.n_leads)
        svg = render_localization_svg(record, report, leads=leads,
                                      window=_parse_window(args.window))
        Path(args.svg).write_bytes(svg)
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.model)
    seed = _resolve_seed(args.seed, 0)
    report = evaluate_manifest(
        params, args.manifest,
        n_passes=args.passes if args.passes else 4,
        seed=seed, n_threads=_thread_count(args.threads),
        local_mode=args.mode or "coverage", report_path=args.report)
    if args.localization and "localization_auroc" not in report:
        raise ConfigError("--localization given but no record carries a point mask")
    line = f"detection_auroc {report['detection_auroc']:.4f}"
    if "localization_auroc" in report:
        line += f"  localization_auroc {report['localization_auroc']:.4f}"
    print(line)
    return 0


def _cmd_gradcheck(args) -> int:
    ok, _ = run_suite(double=args.double, n_seeds=max(1, args.seeds), log=print)
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None or _env_seed() is not None:
        cfg.train.seed = _resolve_seed(args.seed, cfg.train.seed)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("empty variant list")
    log = _log(args.quiet)

    from .data import load_manifest_records
    if args.data_train and args.data_test:
        train_records = load_manifest_records(args.data_train)
        test_records = load_manifest_records(args.data_test)
    elif args.data_train or args.data_test:
        raise ConfigError("--data-train and --data-test go together")
    else:
        seed = cfg.train.seed
        trim = cfg.model.n_segments
        data = cfg.data
        train_records = [synth_record(data, [seed, 0, i], trim_to=trim,
                                      record_id=f"train-normal-{i:04d}")
                         for i in range(data.n_normal)]
        test_records = [synth_record(data, [seed, 1, i], trim_to=trim,
                                     record_id=f"test-normal-{i:04d}")
                        for i in range(data.n_test_normal)]
        test_records += [synth_record(data, [seed, 2, i],
                                      kind=ANOMALY_KINDS[i % len(ANOMALY_KINDS)],
                                      trim_to=trim,
                                      record_id=f"test-abnormal-{i:04d}")
                         for i in range(data.n_abnormal)]
    run_ablation_suite(cfg, variants, train_records, test_records,
                       n_threads=_thread_count(args.threads), log=log,
                       out_path=args.out)
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def run_command(argv: list[str] | None = None) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MmaeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
