"""Command-line front end: generate, train, predict, evaluate, ablation.

Every command writes its artifacts plus ``manifest.json`` into a fresh
``--out`` directory and prints exactly one JSON summary line on stdout.
Progress goes to stderr. Exit codes: 0 success, 2 invalid configuration or
arguments, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import checkpoint
from .metrics import evaluate, pair_confusion, write_report
from .patches import PatchSpec
from .phantoms import PhantomError, PhantomSpec, load_dataset, make_dataset, write_dataset
from .trainer import (
    FoldPlan,
    TrainConfig,
    TrainingError,
    make_folds,
    predict,
    prepare_scan,
    run_cross_validation,
    train,
    write_ablation,
    write_history,
)
from .unet import ConfigError, NetworkConfig, build
from .volume import ClassMap, VolumeError, read_volume, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


def _version() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                              cwd=Path(__file__).resolve().parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _input_record(path) -> dict:
    p = Path(path)
    if p.suffix not in (".json", ".raw", ".bin") and not p.exists() and p.with_name(p.name + ".json").exists():
        files = [p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")]
        digest = hashlib.sha256(b"".join(f.read_bytes() for f in files)).hexdigest()
        return {"path": str(p), "sha256": digest}
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    return {"path": str(p), "sha256": _sha256(p)}


def _fresh_out(path) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} already exists; refusing to overwrite a previous run")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, seed, started: str, extra: dict) -> None:
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "seed": seed,
        "version": _version(),
        "started": started,
        "finished": _now(),
        "output_dir": str(out),
    }
    record.update(extra)
    (out / "manifest.json").write_text(json.dumps(record, indent=2, default=str))


def _progress(d: dict) -> None:
    print(json.dumps(d), file=sys.stderr, flush=True)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _train_config(path, overrides: dict) -> TrainConfig:
    d = _load_json(path) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _net_config(path) -> NetworkConfig:
    try:
        return NetworkConfig.from_dict(_load_json(path))
    except TypeError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _fold_plan(manifest: dict, scan_ids) -> FoldPlan:
    if manifest.get("folds"):
        return FoldPlan.from_list(manifest["folds"], sorted(scan_ids))
    return make_folds(sorted(scan_ids), seed=int(manifest.get("seed") or 0))


# -- commands -----------------------------------------------------------------------

def cmd_generate(args) -> dict:
    started = _now()
    spec = PhantomSpec.load(args.spec) if args.spec else PhantomSpec()
    inputs = {"spec": _input_record(args.spec)} if args.spec else {}
    if args.scans < 2:
        raise UsageError("--scans must be >= 2")
    out = _fresh_out(args.out)
    scans = make_dataset(args.scans, spec, seed=args.seed)
    n_folds = min(args.folds, args.scans)
    largest_test = -(-args.scans // n_folds)
    n_val = max(0, min(2, args.scans - largest_test - 1))
    plan = make_folds([s.scan_id for s in scans], n_folds=n_folds, n_val=n_val, seed=args.seed)
    write_dataset(scans, spec, out, plan.folds, seed=args.seed)
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    _manifest_dataset(out, args, inputs, started)
    return {"scans": len(scans), "classes": len(spec.class_names()), "folds": len(plan.folds), "out": str(out)}


def _manifest_dataset(out: Path, args, inputs: dict, started: str) -> None:
    # the dataset manifest doubles as the run manifest; the run record sits under "run"
    record = {
        "command": "generate",
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "seed": args.seed,
        "version": _version(),
        "started": started,
        "finished": _now(),
        "output_dir": str(out),
    }
    ds = json.loads((out / "manifest.json").read_text())
    ds["run"] = record
    (out / "manifest.json").write_text(json.dumps(ds, indent=2, default=str))


def cmd_train(args) -> dict:
    started = _now()
    net_cfg = _net_config(args.net_config)
    tc = _train_config(args.train_config, {"iterations": args.iterations, "seed": args.seed, "lr": args.lr})
    inputs = {"net_config": _input_record(args.net_config), "data": _input_record(args.data)}
    if args.train_config:
        inputs["train_config"] = _input_record(args.train_config)
    scans, ds_manifest = load_dataset(args.data)
    if net_cfg.class_count != len(ds_manifest["classes"]):
        raise UsageError(f"net config has {net_cfg.class_count} classes, dataset has {len(ds_manifest['classes'])}")
    plan = _fold_plan(ds_manifest, [s.scan_id for s in scans])
    if not 0 <= args.fold < len(plan.folds):
        raise UsageError(f"--fold {args.fold} out of range (dataset has {len(plan.folds)} folds)")
    fold = plan.folds[args.fold]
    if set(fold.train) & set(fold.test):
        raise UsageError(f"fold {args.fold}: a scan is in both train and test")
    out = _fresh_out(args.out)
    spec = PatchSpec.from_config(net_cfg)
    by_id = {s.scan_id: s for s in scans}
    prep = {i: prepare_scan(i, by_id[i].image, by_id[i].labels, spec, tc.norm_window) for i in fold.train + fold.val}
    truth = {i: by_id[i].labels.data for i in fold.val}
    net = build(net_cfg, seed=tc.seed)
    res = train(net, [prep[i] for i in fold.train], tc, [prep[i] for i in fold.val], truth, out_dir=out,
                progress=_progress)
    meta = {"network_config": net_cfg.to_dict(), "norm_window": tc.norm_window, "iteration": res.best_iteration}
    best = checkpoint.save(out / "checkpoint.bin", res.state, meta)
    final = checkpoint.save(out / "final.bin", res.final_state, dict(meta, iteration=tc.iterations))
    write_history(res.history, out / "history.csv")
    (out / "val_history.json").write_text(json.dumps(res.val_history, indent=2))
    net_cfg.save(out / "net_config.json")
    (out / "train_config.json").write_text(json.dumps(tc.to_dict(), indent=2))
    _manifest(out, "train", args, inputs, tc.seed, started,
              {"fold": fold.to_dict(), "checkpoint_sha256": best, "final_sha256": final})
    return {"final_loss": res.history[-1]["total"], "best_iteration": res.best_iteration,
            "sec_per_iter": res.sec_per_iter, "checkpoint": str(out / "checkpoint.bin"), "sha256": best}


def cmd_predict(args) -> dict:
    started = _now()
    inputs = {"checkpoint": _input_record(args.checkpoint), "image": _input_record(args.image)}
    try:
        params, meta = checkpoint.load(args.checkpoint)
    except checkpoint.CheckpointError as exc:
        raise UsageError(f"{args.checkpoint}: {exc}") from exc
    if "network_config" not in meta:
        raise UsageError(f"{args.checkpoint}: checkpoint carries no network_config")
    cfg = NetworkConfig.from_dict(meta["network_config"])
    image = read_volume(args.image)
    out = _fresh_out(args.out)
    net = build(cfg)
    net.load_state(params)
    nw = tuple(meta["norm_window"]) if meta.get("norm_window") else None
    pred = predict(net, image, norm_window=nw, batch=args.batch)
    write_volume(pred, out / "prediction")
    _manifest(out, "predict", args, inputs, None, started, {})
    counts = np.bincount(pred.data.ravel(), minlength=cfg.class_count)
    return {"dims": list(pred.dims), "classes": cfg.class_count, "voxels_per_class": counts.tolist(),
            "prediction": str(out / "prediction")}


def cmd_evaluate(args) -> dict:
    started = _now()
    inputs = {"pred": _input_record(args.pred), "truth": _input_record(args.truth)}
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    if args.classes:
        classes = ClassMap.load(args.classes)
        inputs["classes"] = _input_record(args.classes)
    else:
        classes = ClassMap.generic(truth.classes or int(max(pred.data.max(), truth.data.max())) + 1)
    if pred.dims != truth.dims:
        raise UsageError(f"prediction dims {pred.dims} != truth dims {truth.dims}")
    top = int(max(pred.data.max(), truth.data.max()))
    if top >= classes.count:
        raise UsageError(f"label {top} outside the {classes.count}-class map")
    out = _fresh_out(args.out)
    report = evaluate(pred, truth, classes, include_background=args.include_background)
    write_report(report, out)
    _manifest(out, "evaluate", args, inputs, None, started, {})
    summary = report.summary()
    return summary


def cmd_ablation(args) -> dict:
    started = _now()
    configs = [_net_config(p) for p in args.configs]
    tc = _train_config(args.train_config, {"iterations": args.iterations, "seed": args.seed})
    inputs = {"configs": [_input_record(p) for p in args.configs], "data": _input_record(args.data)}
    if args.train_config:
        inputs["train_config"] = _input_record(args.train_config)
    scans, ds_manifest = load_dataset(args.data)
    for c in configs:
        if c.class_count != len(ds_manifest["classes"]):
            raise UsageError(f"config {c.config_label} has {c.class_count} classes, dataset has "
                             f"{len(ds_manifest['classes'])}")
    plan = _fold_plan(ds_manifest, [s.scan_id for s in scans])
    if args.folds == "all":
        fold_ids = list(range(len(plan.folds)))
    else:
        try:
            fold_ids = [int(v) for v in args.folds.split(",")]
        except ValueError as exc:
            raise UsageError(f"--folds must be 'all' or comma-separated fold ids, got {args.folds!r}") from exc
        bad = [f for f in fold_ids if not 0 <= f < len(plan.folds)]
        if bad:
            raise UsageError(f"fold ids {bad} out of range (dataset has {len(plan.folds)} folds)")
    out = _fresh_out(args.out)
    rows = run_cross_validation(configs, scans, plan, tc, fold_ids=fold_ids, progress=_progress)
    write_ablation(rows, out / "ablation.csv")
    pairs = [tuple(p) for p in ds_manifest.get("mirrored_pairs", [])]
    extra = []
    for r in rows:
        pc = pair_confusion(r.report.confusion, pairs) if pairs else None
        extra.append({"config": r.config.config_label, "pair_confusion": pc,
                      "per_class_dsc": [None if np.isnan(d) else float(d) for d in r.report.per_class_dsc],
                      "confusion": r.report.confusion.tolist()})
    (out / "ablation_details.json").write_text(json.dumps(extra, indent=2))
    _manifest(out, "ablation", args, inputs, tc.seed, started, {"folds": fold_ids})
    return {"rows": len(rows), "median_dsc": {r.config.config_label: r.report.median for r in rows},
            "table": str(out / "ablation.csv")}


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrunet", description="Multi-resolution 3D U-Net segmentation on volumes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--spec", help="phantom spec JSON (default: built-in mirrored-bar phantom)")
    g.add_argument("--scans", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--folds", type=int, default=5, help="number of cross-validation folds to record")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one configuration on one fold")
    t.add_argument("--net-config", required=True)
    t.add_argument("--train-config")
    t.add_argument("--data", required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int, help="override train config")
    t.add_argument("--seed", type=int, help="override train config")
    t.add_argument("--lr", type=float, help="override train config")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment a volume with a trained checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--batch", type=int, default=8)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="class-wise Dice of a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--classes")
    e.add_argument("--out", required=True)
    e.add_argument("--include-background", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablation", help="cross-validate several configurations into one table")
    a.add_argument("--configs", nargs="+", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--folds", default="all", help="'all' or comma-separated fold ids")
    a.add_argument("--out", required=True)
    a.add_argument("--train-config")
    a.add_argument("--iterations", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablation)
    return p


def _emit(d: dict) -> None:
    print(json.dumps(d, default=float, allow_nan=False), flush=True)


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        result = args.func(args)
    except (UsageError, ConfigError, PhantomError) as exc:
        _emit({"status": "error", "command": args.command, "code": EXIT_CONFIG, "error": str(exc)})
        return EXIT_CONFIG
    except (TrainingError, VolumeError, checkpoint.CheckpointError, OSError, ValueError, KeyError) as exc:
        _emit({"status": "error", "command": args.command, "code": EXIT_RUNTIME,
               "error": f"{type(exc).__name__}: {exc}"})
        return EXIT_RUNTIME
    _emit(_clean({"status": "ok", "command": args.command, "seconds": round(time.perf_counter() - t0, 3), **result}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
