"""Command-line entry point: ``mvirts {train,ablate,sweep,gradcheck,synth}``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import AIRTS, NIRTS, Dataset, SyntheticSpec, gen_synthetic, load_triplets, pad_or_truncate, save_triplets
from .gradcheck import check_model_gradients, check_ops
from .model import ABLATION_ROWS, ModelConfig, toy_config
from .train import CvReport, TrainConfig, run_cv, run_sensor_dropout_sweep, run_variant_ablation, resolve_configuration

log = logging.getLogger("mvirts")

GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


# -- config ---------------------------------------------------------------------

def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if default is None or isinstance(default, str):
            return raw.strip()
    except ValueError:
        raise UsageError(f"config field {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SyntheticSpec}


def parse_config_text(text: str) -> dict[str, dict]:
    """Flat ``section.field=value`` lines; ``#`` starts a comment."""
    out: dict[str, dict] = {k: {} for k in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise UsageError(f"config line {lineno}: unknown key {key!r} (use model.*, train.* or synth.*)")
        defaults = {f.name: f.default for f in dataclasses.fields(_SECTIONS[section])}
        if name not in defaults:
            raise UsageError(f"config line {lineno}: {section} has no field {name!r}")
        out[section][name] = _coerce(raw, defaults[name], key)
    return out


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from None


# -- argument parsing -------------------------------------------------------------

def _ratio_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse ratios {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("ratios must be comma-separated numbers in [0, 1]")
    return vals


def _name_list(text: str) -> list[str]:
    return [x.strip().lower() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file (flags win)")
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    src = common.add_mutually_exclusive_group()
    src.add_argument("--dataset", type=Path, help="triplet-format dataset file")
    src.add_argument("--synthetic", choices=[NIRTS, AIRTS], help="generate a synthetic corpus")
    common.add_argument("--variant", choices=["v1", "v2", "v3", "v4"], default=None)
    common.add_argument("--folds", type=int, default=None)
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--n-samples", type=int, default=None, help="synthetic sample count")
    common.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run dirs")
    common.add_argument("--toy", action="store_true", help="start from the small toy model config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mvirts", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="cross-validated training run")
    p = sub.add_parser("ablate", parents=[common], help="variant / component ablation")
    p.add_argument("--variants", type=_name_list, default=None, help="e.g. v1,v2,v3,v4")
    p.add_argument("--switches", type=_name_list, default=None,
                   help=f"ablation rows from {','.join(ABLATION_ROWS)}")
    p = sub.add_parser("sweep", parents=[common], help="leave-random-sensor-out sweep")
    p.add_argument("--ratios", type=_ratio_list, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--switches", type=_name_list, default=None, help="one ablation row")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset file")
    return parser


# -- shared plumbing ----------------------------------------------------------------

def _resolve(args) -> dict:
    cfg = parse_config_text(args.config.read_text()) if args.config else {k: {} for k in _SECTIONS}
    seed = args.seed if args.seed is not None else cfg["train"].get("seed", 0)
    cfg["train"]["seed"] = seed
    cfg["synth"].setdefault("seed", seed)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.variant is not None:
        cfg["model"]["variant"] = args.variant
    if args.n_samples is not None:
        cfg["synth"]["n_samples"] = args.n_samples
    if args.synthetic:
        cfg["synth"]["regime"] = args.synthetic
    return cfg


def _load_data(args, cfg: dict) -> tuple[Dataset, dict]:
    if args.dataset:
        if not args.dataset.exists():
            raise FileNotFoundError(f"dataset file not found: {args.dataset}")
        ds = load_triplets(args.dataset)
        if "length" in cfg["model"]:
            ds = pad_or_truncate(ds, cfg["model"]["length"])
        return ds, {"dataset_path": str(args.dataset)}
    if args.synthetic or cfg["synth"]:
        spec = _build(SyntheticSpec, cfg["synth"], "synth")
        return gen_synthetic(spec), {"synthetic_spec": dataclasses.asdict(spec)}
    raise UsageError("need --dataset PATH or --synthetic nirts|airts")


def _model_config(args, cfg: dict, ds: Dataset) -> ModelConfig:
    base = toy_config().to_dict() if args.toy else {}
    values = {**base, **cfg["model"]}
    values.update(length=ds.length, n_sensors=ds.n_sensors, num_classes=ds.num_classes)
    return _build(ModelConfig, values, "model")


def _run_dir(args, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = args.out / f"{stamp}-{seed}"
    n = 1
    while run.exists():
        run = args.out / f"{stamp}-{seed}-{n}"
        n += 1
    run.mkdir(parents=True)
    return run


def _write_manifest(run: Path, args, model_cfg, train_cfg, ds, source) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "master_seed": train_cfg.seed,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "folds": args.folds,
        "artifact_version": __version__,
        "dataset_fingerprint": ds.fingerprint(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **source,
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _metric_names(report: CvReport) -> list[str]:
    return list(report.folds[0].metrics) if report.folds else []


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def _setup(args):
    cfg = _resolve(args)
    ds, source = _load_data(args, cfg)
    model_cfg = _model_config(args, cfg, ds)
    train_cfg = _build(TrainConfig, cfg["train"], "train")
    folds = args.folds if args.folds is not None else 5
    if folds < 2:
        raise UsageError("--folds must be >= 2")
    args.folds = folds
    return cfg, ds, source, model_cfg, train_cfg


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    _, ds, source, model_cfg, train_cfg = _setup(args)
    run = _run_dir(args, train_cfg.seed)
    _write_manifest(run, args, model_cfg, train_cfg, ds, source)
    train_cfg.checkpoint_path = str(run / "model.mvf")
    report = run_cv(ds, args.folds, model_cfg, train_cfg)
    (run / "report.txt").write_text(report.to_text())
    (run / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    for name, (m, s) in report.aggregate.items():
        print(f"{name}: {m:.4f} +- {s:.4f}")
    print(f"run directory: {run}")
    return 0


def cmd_ablate(args) -> int:
    names = (args.variants or []) + (args.switches or [])
    if not names:
        raise UsageError("ablate needs --variants and/or --switches")
    _, ds, source, model_cfg, train_cfg = _setup(args)
    for n in names:
        try:
            resolve_configuration(n, model_cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    run = _run_dir(args, train_cfg.seed)
    _write_manifest(run, args, model_cfg, train_cfg, ds, source)
    table = run_variant_ablation(ds, names, model_cfg, train_cfg, args.folds)
    metrics = _metric_names(next(iter(table.values())))
    rows = [
        [name, i] + [_fmt(f.metrics[m]) for m in metrics]
        for name, rep in table.items()
        for i, f in enumerate(rep.folds)
    ]
    _write_csv(run / "ablation.csv", ["configuration", "fold"] + metrics, rows)
    lines = ["configuration  " + "  ".join(f"{m:>17}" for m in metrics)]
    for name, rep in table.items():
        agg = rep.aggregate
        lines.append(f"{name:<13}  " + "  ".join(f"{agg[m][0]:.4f} +- {agg[m][1]:.4f}" for m in metrics))
        (run / f"report-{name}.txt").write_text(rep.to_text())
    text = "\n".join(lines) + "\n"
    (run / "ablation.txt").write_text(text)
    print(text, end="")
    print(f"run directory: {run}")
    return 0


def cmd_sweep(args) -> int:
    _, ds, source, model_cfg, train_cfg = _setup(args)
    ratios = sorted(set(args.ratios))
    run = _run_dir(args, train_cfg.seed)
    _write_manifest(run, args, model_cfg, train_cfg, ds, source)
    results = run_sensor_dropout_sweep(ds, ratios, model_cfg, train_cfg, args.folds)
    metrics = _metric_names(results[0][1])
    rows, summary = [], []
    for r, rep in results:
        for i, f in enumerate(rep.folds):
            rows.append([_fmt(r), i, " ".join(map(str, rep.manifest["dropped_sensors"][i]))]
                        + [_fmt(f.metrics[m]) for m in metrics])
        agg = rep.aggregate
        summary.append([_fmt(r)] + [x for m in metrics for x in (_fmt(agg[m][0]), _fmt(agg[m][1]))])
        (run / f"report-ratio-{r:g}.txt").write_text(rep.to_text())
    _write_csv(run / "sweep.csv", ["ratio", "fold", "dropped_sensors"] + metrics, rows)
    _write_csv(run / "sweep_summary.csv",
               ["ratio"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")], summary)
    for row in summary:
        print(",".join(row))
    print(f"run directory: {run}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    values = {**toy_config().to_dict(), **cfg["model"]}
    model_cfg = _build(ModelConfig, values, "model")
    if args.switches:
        if len(args.switches) != 1:
            raise UsageError("gradcheck takes a single --switches row")
        try:
            model_cfg = resolve_configuration(args.switches[0], model_cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    failed = []
    for op, err in check_ops(seed=cfg["train"]["seed"]).items():
        status = "ok" if err < GRAD_TOL else "FAIL"
        print(f"op {op:<18} worst rel err {err:.3e} {status}")
        if err >= GRAD_TOL:
            failed.append(f"op {op}")
    if failed:
        print("gradient check FAILED: " + ", ".join(failed) + " (model check skipped)")
        return 1
    report = check_model_gradients(model_cfg, seed=cfg["train"]["seed"])
    groups: dict[str, float] = {}
    for name, err in report.items():
        group = name.rsplit(".", 1)[0]
        groups[group] = max(groups.get(group, 0.0), err)
        if err >= GRAD_TOL:
            failed.append(f"parameter {name}")
    for group, err in groups.items():
        print(f"{group:<24} worst rel err {err:.3e} {'ok' if err < GRAD_TOL else 'FAIL'}")
    if failed:
        print("gradient check FAILED: " + ", ".join(failed))
        return 1
    print(f"gradient check passed (variant {model_cfg.variant}, tol {GRAD_TOL:g})")
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    if not args.synthetic and "regime" not in cfg["synth"]:
        raise UsageError("synth needs --synthetic nirts|airts")
    spec = _build(SyntheticSpec, cfg["synth"], "synth")
    ds = gen_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"synthetic-{spec.regime}-{spec.seed}.irts"
    save_triplets(ds, path)
    manifest = {
        "command": "synth",
        "synthetic_spec": dataclasses.asdict(spec),
        "generative_process": ds.meta["generative_process"],
        "dataset_fingerprint": ds.fingerprint(),
        "missing_ratio": ds.missing_ratio,
        "artifact_version": __version__,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path} (missing ratio {ds.missing_ratio:.4f}, fingerprint {ds.fingerprint()[:12]})")
    return 0


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvirts {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"mvirts {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
