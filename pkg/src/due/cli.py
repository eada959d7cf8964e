"""Command-line entry point: ``due train | eval | demo | check``.

Exit codes: 0 success, 1 failed check or aborted training, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as E
from . import metrics as M
from . import selfcheck
from .config import ConfigError, build_dataset, load_config
from .modelio import ModelFormatError, load_model, save_model
from .training import TrainingAborted, build_model, initialize, train

TOOL_VERSION = "0.1.0"
DEMOS = ("two-moons", "gap-1d", "collapse", "rff-compare", "cate-deferral", "scale-fit", "collapse-path")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_columns(path: Path, columns: dict) -> None:
    """CSV with one named column per entry; all columns must have equal length."""
    names = list(columns)
    arrays = [np.asarray(columns[n]).reshape(-1) for n in names]
    if len({len(a) for a in arrays}) > 1:
        raise ValueError("columns have different lengths")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*arrays):
            writer.writerow([_fmt(v) for v in row])


def write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_manifest(out_dir: Path, command: str, config, provenance, metrics, outputs, timings) -> Path:
    manifest = {
        "tool_version": TOOL_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": command,
        "config": config,
        "dataset_provenance": provenance,
        "metrics": metrics,
        "outputs": outputs,
        "timings": timings,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _fit_metrics(model, data) -> dict:
    t = data.treatment if model.config.append_treatment else None
    pred = model.predict(data.X, t)
    if model.is_classifier:
        return {"accuracy": M.accuracy(pred.probs, data.labels),
                "nll": M.classification_nll(pred.probs, data.labels),
                "mean_entropy": float(np.mean(pred.entropy))}
    noise = model.gp.likelihood.noise
    return {"rmse": M.rmse(pred.mean[:, 0], data.Y[:, 0]),
            "nll": M.gaussian_nll(pred.mean[:, 0], pred.variance[:, 0] + noise, data.Y[:, 0])}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    data = build_dataset(cfg.data)
    has_splits = "val" in set(data.split)
    train_set = data.subset("train") if has_splits else data
    val_set = data.subset("val") if has_splits else None
    model = build_model(cfg.feature_config(data.X.shape[1]), cfg.train)
    initialize(model, train_set)
    try:
        log = train(model, train_set, val_set)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc} {exc.record}", file=sys.stderr)
        return 1
    train_seconds = time.perf_counter() - start
    model_path = out_dir / "model.bin"
    save_model(model, model_path)
    log_path = out_dir / "train_log.csv"
    write_rows(log_path, log.rows())
    metrics = {"train": _fit_metrics(model, train_set), "final_elbo": log.records[-1].elbo,
               "best_epoch": log.best_epoch}
    if val_set is not None:
        metrics["val"] = _fit_metrics(model, val_set)
    manifest = write_manifest(out_dir, "train", cfg.to_dict(), data.provenance, metrics,
                              {"model": str(model_path), "train_log": str(log_path)},
                              {"train_seconds": train_seconds})
    print(json.dumps(_jsonable(metrics), sort_keys=True))
    print(f"wrote {model_path}, {log_path}, {manifest}")
    return 0


def _parse_grid(spec: str) -> np.ndarray:
    try:
        low, high, res = spec.split(",")
        low, high, res = float(low), float(high), int(res)
    except ValueError:
        raise UsageError(f"--grid expects LOW,HIGH,RES, got {spec!r}") from None
    if res < 2 or high <= low:
        raise UsageError("--grid needs RES >= 2 and HIGH > LOW")
    return E.box_grid(low, high, res)


def cmd_eval(args) -> int:
    model = load_model(args.model)
    treatment = None
    if args.grid:
        if model.extractor.config.input_dim != 2:
            raise UsageError("grid evaluation needs a model with two inputs")
        x = _parse_grid(args.grid)
    elif args.config:
        data = build_dataset(load_config(args.config).data)
        x = data.X
        treatment = data.treatment
    else:
        raise UsageError("eval needs --config or --grid")
    if model.config.append_treatment:
        if treatment is None:
            raise UsageError("this model needs a treatment column; evaluate on a dataset")
        if args.treatment is not None:
            treatment = np.full(len(x), float(args.treatment))
    pred = model.predict(x, treatment)
    columns = {f"x{j}": x[:, j] for j in range(x.shape[1])}
    for k in range(pred.mean.shape[1]):
        columns[f"mean{k}"] = pred.mean[:, k]
        columns[f"var{k}"] = pred.variance[:, k]
    if pred.probs is not None:
        for k in range(pred.probs.shape[1]):
            columns[f"prob{k}"] = pred.probs[:, k]
        columns["entropy"] = pred.entropy
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_columns(out, columns)
    print(f"wrote {out} ({len(x)} rows)")
    return 0


# ---------------------------------------------------------------------------
# demos
# ---------------------------------------------------------------------------


def _demo_protocols(name: str, quick: bool):
    """Reduced budgets for smoke runs; the defaults are the documented protocols."""
    if not quick:
        return {}
    return {
        "two-moons": {"protocol": E.MoonsProtocol(epochs=30)},
        "gap-1d": {"protocol": E.GapProtocol(steps=300), "n": 300},
        "collapse": {"epochs": 20},
        "rff-compare": {"protocol": E.GapProtocol(sizes=(300, 3000), steps=300)},
        "cate-deferral": {"protocol": E.CateProtocol(epochs=5), "trials": 2},
        "scale-fit": {},
        "collapse-path": {},
    }[name]


def cmd_demo(args) -> int:
    if args.name not in DEMOS:
        raise UsageError(f"unknown demo {args.name!r}; valid demos: {', '.join(DEMOS)}")
    out_dir = Path(args.out or f"runs/demo-{args.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    kwargs = _demo_protocols(args.name, args.quick)
    start = time.perf_counter()
    outputs = {}
    if args.name == "cate-deferral":
        result = E.run_cate_deferral(first_seed=args.seed, **kwargs)
        table = []
        for rate_key, row in result["metrics"].items():
            if rate_key.startswith("rate_"):
                for policy in ("uncertainty", "random"):
                    table.append({"policy": policy, "rate": float(rate_key[5:]), "retained_rmse": row[policy]})
        write_rows(out_dir / "deferral_table.csv", table)
        write_rows(out_dir / "trials.csv", result["rows"])
        outputs = {"deferral_table": str(out_dir / "deferral_table.csv"), "trials": str(out_dir / "trials.csv")}
        provenance = {"generator": "synthetic_cate", "first_seed": args.seed}
    else:
        runner = {"two-moons": E.run_two_moons, "gap-1d": E.run_gap_1d, "collapse": E.run_collapse,
                  "rff-compare": E.run_rff_compare, "scale-fit": E.run_scale_fit,
                  "collapse-path": E.run_collapse_path}[args.name]
        result = runner(seed=args.seed, **kwargs)
        path = out_dir / f"{args.name}.csv"
        write_columns(path, result["series"])
        outputs = {"series": str(path)}
        provenance = result["provenance"]
    config = {"demo": args.name, "seed": args.seed, "quick": args.quick}
    manifest = write_manifest(out_dir, "demo", config, provenance, result["metrics"], outputs,
                              {"seconds": time.perf_counter() - start})
    print(json.dumps(_jsonable(result["metrics"]), sort_keys=True))
    print(f"wrote {', '.join(outputs.values())}, {manifest}")
    return 0


def cmd_check(args) -> int:
    results = selfcheck.run_all()
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="due", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file or run manifest")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: [output] dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write predictions of a saved model to CSV")
    p.add_argument("model")
    p.add_argument("--config", help="evaluate on the dataset described by this config")
    p.add_argument("--grid", help="LOW,HIGH,RES square grid for two-input models")
    p.add_argument("--treatment", type=float, help="override the treatment indicator for every row")
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="run a figure or table reproduction")
    p.add_argument("name", help=f"one of: {', '.join(DEMOS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--quick", action="store_true", help="tiny budgets for a smoke run")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("check", help="gradient, oracle and Lipschitz self-tests")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, UsageError, ModelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
