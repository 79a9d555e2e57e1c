"""Batch command line: ``snprune collect|prune|eval|verify|report``.

Settings come from a JSON run config (``--config``); command-line flags
override config fields, and config fields override built-in defaults.

Exit codes: 0 ok, 1 unexpected failure, 2 bad input (missing or malformed
files, invalid config), 3 consistency error (stale Gram cache), 4 verification
threshold breached.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import gram_cache, verify
from .errors import ContractError, LoadError, ParseError, PruneError
from .evalharness import (
    emit_report,
    evaluate,
    fit_inputs,
    load_dataset,
    read_report,
    sample_calibration,
    white_noise,
)
from .linalg import DEFAULT_RIDGE
from .model import count_flops_params, load_model, save_model
from .pruning import METHODS, MODES, PruneSpec, collect_grams, prune_network

log = logging.getLogger("snprune")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CONSISTENCY, EXIT_VERIFY = 0, 1, 2, 3, 4

PRUNED_MODEL_NAME = "model.pruned.snm"
REPORT_NAME = "report.json"
PLANS_DIR = "plans"
GRAMS_DIR = "grams"

DEFAULTS = {
    "model_path": None,
    "calibration": {"path": None, "labels_path": None, "format": "idx", "n": "all", "seed": 0,
                    "white_noise": False, "white_noise_samples": 1024},
    "test": {"path": None, "labels_path": None, "format": "idx"},
    "num_classes": None,
    "method": "unnorm_zca",
    "spec": {"mode": "uniform", "uniform_ratio": 0.5, "variance_threshold": None,
             "explicit_keep": None, "min_keep": 1},
    "ridge_scale": DEFAULT_RIDGE,
    "absorb_bias": False,
    "reconstruct": True,
    "seed": 0,
    "batch_size": 256,
    "out": "snprune-out",
}


class InputError(PruneError):
    pass


class ConsistencyError(PruneError):
    pass


class VerificationFailed(PruneError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    flag_map = {
        "model": ("model_path",),
        "seed": ("seed",),
        "method": ("method",),
        "mode": ("spec", "mode"),
        "ratio": ("spec", "uniform_ratio"),
        "tau": ("spec", "variance_threshold"),
        "out": ("out",),
        "data": ("calibration", "path"),
        "labels": ("calibration", "labels_path"),
        "test_data": ("test", "path"),
        "test_labels": ("test", "labels_path"),
        "num_classes": ("num_classes",),
    }
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            target = cfg
            for k in keys[:-1]:
                target = target[k]
            target[keys[-1]] = value
    if getattr(args, "samples", None) is not None:
        cfg["calibration"]["n"] = args.samples
        cfg["calibration"]["white_noise_samples"] = args.samples if args.samples != "all" else 1024
    if getattr(args, "white_noise", False):
        cfg["calibration"]["white_noise"] = True
    if getattr(args, "seed", None) is not None:
        cfg["calibration"]["seed"] = args.seed
    if cfg["calibration"].get("n") == "white_noise":
        cfg["calibration"]["white_noise"] = True
        cfg["calibration"]["n"] = "all"
    return cfg


def _require_file(path, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _spec(cfg) -> PruneSpec:
    s = cfg["spec"]
    if cfg["method"] not in METHODS:
        raise InputError(f"unknown method {cfg['method']!r}; choose from {', '.join(METHODS)}")
    if s.get("mode") not in MODES:
        raise InputError(f"unknown mode {s.get('mode')!r}; choose from {', '.join(MODES)}")
    try:
        return PruneSpec(s["mode"], s.get("uniform_ratio"), s.get("variance_threshold"),
                         s.get("explicit_keep"), int(s.get("min_keep", 1)))
    except ContractError as exc:
        raise InputError(f"invalid prune spec: {exc}") from exc


def _dataset(section: dict, cfg, split: str):
    p = _require_file(section.get("path"), f"{split} dataset")
    labels = section.get("labels_path")
    if section.get("format", "idx") == "idx":
        labels = _require_file(labels, f"{split} labels")
    return load_dataset(p, section.get("format", "idx"), labels_path=labels,
                        num_classes=cfg.get("num_classes"), split=split)


def _model(path):
    return load_model(_require_file(path, "model file"))


def model_hash(path) -> str:
    h = hashlib.sha256()
    for name in ("manifest.json", "tensors.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def _lock(out: Path) -> FileLock:
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".snprune.lock"), timeout=0)


def calibration_inputs(cfg, net):
    cal = cfg["calibration"]
    if cal.get("white_noise"):
        ds = white_noise(net.input_shape, int(cal.get("white_noise_samples", 1024)), int(cal.get("seed", 0)))
    else:
        ds = sample_calibration(_dataset(cal, cfg, "calibration"), cal.get("n", "all"), int(cal.get("seed", 0)))
    return fit_inputs(ds, net)


# ---------------------------------------------------------------------------
# commands


def cmd_collect(cfg) -> dict:
    net = _model(cfg["model_path"])
    out = Path(cfg["out"])
    with _lock(out):
        x = calibration_inputs(cfg, net)
        grams = collect_grams(net, x, int(cfg["batch_size"]), bool(cfg["absorb_bias"]))
        gram_cache.save_grams(grams.values(), out / GRAMS_DIR)
    summary = {"cache": str(out / GRAMS_DIR), "samples": int(x.shape[0]),
               "layers": {g.layer_id: {"n": g.n, "sample_count": g.sample_count} for g in grams.values()}}
    print(json.dumps(summary, indent=2))
    return summary


def cmd_prune(cfg, cache=None) -> dict:
    net = _model(cfg["model_path"])
    spec = _spec(cfg)
    out = Path(cfg["out"])
    cache = Path(cache) if cache else out / GRAMS_DIR
    _require_file(cache / gram_cache.MANIFEST_NAME, "gram cache")
    grams = {g.layer_id: g for g in gram_cache.load_grams(cache)}
    extra = int(bool(cfg["absorb_bias"]))
    for i in net.weighted_indices():
        layer = net.layers[i]
        g = grams.get(layer.name)
        if g is None:
            raise ConsistencyError(f"gram cache has no entry for layer {layer.name!r}")
        if g.n != layer.n_in + extra:
            raise ConsistencyError(
                f"stale gram cache: layer {layer.name!r} has {layer.n_in} inputs, cache has {g.n - extra}"
            )
    with _lock(out):
        pruned, report, plans = prune_network(
            net, grams, spec, cfg["method"], seed=int(cfg["seed"]), ridge_scale=float(cfg["ridge_scale"]),
            reconstruct=bool(cfg["reconstruct"]), absorb_bias=bool(cfg["absorb_bias"]),
        )
        if cfg["test"].get("path"):
            test = _dataset(cfg["test"], cfg, "test")
            report.acc_before = evaluate(net, test)[0]
            report.acc_after = evaluate(pruned, test)[0]
        model_dir = save_model(pruned, out / PRUNED_MODEL_NAME)
        emit_report(report, out / REPORT_NAME, "json")
        plan_dir = out / PLANS_DIR
        plan_dir.mkdir(exist_ok=True)
        for name, plan in plans.items():
            (plan_dir / f"{name}.json").write_text(json.dumps(plan.to_dict(), indent=1) + "\n")
    summary = {
        "model": str(model_dir),
        "model_sha256": model_hash(model_dir),
        "report": str(out / REPORT_NAME),
        "keep": {r.layer_id: [r.keep, r.n_before] for r in report.layers},
        "speedup": report.speedup,
        "acc_before": report.acc_before,
        "acc_after": report.acc_after,
    }
    print(json.dumps(summary, indent=2))
    return summary


def cmd_eval(cfg, baseline=None, as_json=False, merge_report=None) -> dict:
    net = _model(cfg["model_path"])
    test = _dataset(cfg["test"], cfg, "test")
    acc, loss = evaluate(net, test)
    result = {"model": str(cfg["model_path"]), "samples": len(test), "accuracy": acc, "loss": loss}
    if baseline:
        b_acc, b_loss = evaluate(_model(baseline), test)
        result.update({"baseline": str(baseline), "baseline_accuracy": b_acc,
                       "baseline_loss": b_loss, "delta": acc - b_acc})
    if merge_report:
        report = read_report(merge_report)
        report.acc_after = acc
        if baseline:
            report.acc_before = result["baseline_accuracy"]
        emit_report(report, merge_report, "json")
    if as_json:
        print(json.dumps(result, indent=2))
    else:
        print(f"accuracy {acc:.4f}  loss {loss:.4f}  ({len(test)} samples)")
        if baseline:
            print(f"baseline {result['baseline_accuracy']:.4f}  delta {result['delta']:+.4f}")
    return result


def _wrong_recovery(X, keep):
    """Negative control: drop the pruned units instead of reconstructing them."""
    A = np.zeros((X.shape[0], keep))
    A[:keep] = np.eye(keep)
    return A


def cmd_verify(cfg, cache=None, threshold=verify.DEFAULT_THRESHOLD, inject_fault=False,
               instances=5, strict_cache=False) -> dict:
    results = verify.synthetic_sweep(instances=instances, seed=int(cfg["seed"]),
                                     ridge_scale=float(cfg["ridge_scale"]),
                                     recovery=_wrong_recovery if inject_fault else None)
    worst = max(results, key=lambda r: r.relative_error)
    summary = {"synthetic": {"checks": len(results), "max_relative_error": worst.relative_error,
                             "threshold": threshold}}
    failed = worst.relative_error > threshold
    if cache:
        per_layer = {}
        for g in gram_cache.load_grams(_require_file(cache, "gram cache")):
            if g.n < 2:
                continue
            rs = verify.gram_lls_check(g, float(cfg["ridge_scale"]))
            per_layer[g.layer_id] = max(r.relative_error for r in rs)
        summary["cache"] = {"max_relative_error_per_layer": per_layer}
        if strict_cache and per_layer and max(per_layer.values()) > threshold:
            failed = True
    print(json.dumps(summary, indent=2))
    if failed:
        dump = {"quantity": worst.quantity, "relative_error": worst.relative_error, "context": worst.context,
                "oracle": np.asarray(worst.oracle_value).tolist(), "method": np.asarray(worst.method_value).tolist()}
        print(json.dumps({"worst_case": dump}), file=sys.stderr)
        raise VerificationFailed(f"relative error {worst.relative_error:.3g} exceeds {threshold:.3g}")
    return summary


def cmd_report(path, fmt="text", output=None) -> None:
    report = read_report(_require_file(path, "report"))
    if fmt in ("csv", "json") and output:
        emit_report(report, output, fmt)
        return
    print(f"method {report.method}  mode {report.mode}")
    print(f"{'layer':<16}{'n_before':>10}{'keep':>8}{'retained_var':>14}")
    for r in report.layers:
        print(f"{r.layer_id:<16}{r.n_before:>10}{r.keep:>8}{r.retained_variance_fraction:>14.6f}")
    print(f"FLOPs {report.flops_before} -> {report.flops_after} (speedup {report.speedup:.3f}x)")
    print(f"params {report.params_before} -> {report.params_after}")
    if report.delta is not None:
        print(f"accuracy {report.acc_before:.4f} -> {report.acc_after:.4f} (delta {report.delta:+.4f})")


# ---------------------------------------------------------------------------
# argument parsing


def _samples(value: str):
    if value in ("all", "white_noise"):
        return value
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a count, 'all' or 'white_noise'")
    if n < 1:
        raise argparse.ArgumentTypeError("sample count must be positive")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--model", help="model directory (manifest.json + tensors.bin)")
    common.add_argument("--num-classes", type=int, dest="num_classes")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="calibration inputs (IDX images or CSV)")
    data.add_argument("--labels", help="calibration labels (IDX)")
    data.add_argument("--samples", type=_samples, help="calibration sample count, 'all' or 'white_noise'")
    data.add_argument("--white-noise", action="store_true", dest="white_noise",
                      help="calibrate on standard-normal inputs instead of data")

    test = argparse.ArgumentParser(add_help=False)
    test.add_argument("--test-data", dest="test_data")
    test.add_argument("--test-labels", dest="test_labels")

    spec = argparse.ArgumentParser(add_help=False)
    spec.add_argument("--method", choices=METHODS)
    spec.add_argument("--mode", choices=MODES)
    spec.add_argument("--ratio", type=float, help="uniform pruning ratio")
    spec.add_argument("--tau", type=float, help="variance fraction to remove per layer")

    parser = argparse.ArgumentParser(prog="snprune", description="Subspace node pruning.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common, data], help="accumulate per-layer Gram matrices")
    p = sub.add_parser("prune", parents=[common, spec, test], help="prune a model from a Gram cache")
    p.add_argument("--cache", help="gram cache directory (default: OUT/grams)")
    p = sub.add_parser("eval", parents=[common, test], help="measure top-1 accuracy")
    p.add_argument("--baseline", help="second model to compare against")
    p.add_argument("--json", action="store_true", dest="as_json")
    p.add_argument("--report", dest="merge_report", help="write metrics into this report.json")
    p = sub.add_parser("verify", parents=[common], help="run the least-squares oracle suite")
    p.add_argument("--cache", help="also check the Grams in this cache directory")
    p.add_argument("--threshold", type=float, default=verify.DEFAULT_THRESHOLD)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--strict-cache", action="store_true", help="apply the threshold to cache Grams too")
    p.add_argument("--inject-fault", action="store_true", help="negative control: use a wrong recovery matrix")
    p = sub.add_parser("report", parents=[common], help="render a report.json")
    p.add_argument("report", nargs="?", help="report path (default: OUT/report.json)")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--output", help="file to write for csv/json formats")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "collect":
            cmd_collect(cfg)
        elif args.command == "prune":
            cmd_prune(cfg, args.cache)
        elif args.command == "eval":
            cmd_eval(cfg, args.baseline, args.as_json, args.merge_report)
        elif args.command == "verify":
            cmd_verify(cfg, args.cache, args.threshold, args.inject_fault, args.instances, args.strict_cache)
        elif args.command == "report":
            cmd_report(args.report or Path(cfg["out"]) / REPORT_NAME, args.format, args.output)
    except VerificationFailed as exc:
        print(f"snprune: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ConsistencyError as exc:
        print(f"snprune: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (InputError, LoadError, ParseError, FileNotFoundError) as exc:
        print(f"snprune: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Timeout:
        print(f"snprune: output directory {cfg['out']} is locked by another run", file=sys.stderr)
        return EXIT_INPUT
    except PruneError as exc:
        print(f"snprune: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
