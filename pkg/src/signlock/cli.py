"""``signlock`` command line: probe, train, fit-zig, compress, decompress,
bound and report. Every command prints a JSON summary on stdout.

Exit codes: 0 ok, 2 bad config or arguments, 3 unreadable or malformed
files, 4 numeric failure (including divergence), 5 infeasible bit budget.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bounds, compress, probes, signdyn
from .errors import ConfigError, FormatError, SignlockError
from .matio import WeightMatrix, load_manifest, save_manifest
from .numerics import RandomSource
from .trainer import expand_sweep, load_config, parse_overrides, train
from .trainer.schedules import Schedule


def _clean(x):
    # strict JSON: NaN and infinities become null
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, Fraction):
        return float(x)
    return x


def _emit(doc: dict) -> None:
    json.dump(_clean(doc), sys.stdout, indent=2, default=_json_default)
    sys.stdout.write("\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_clean(doc), indent=2, default=_json_default))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def cmd_probe(args) -> int:
    layers = load_manifest(args.manifest)
    out = _out(args)
    rng = RandomSource(args.seed)
    if args.which == "svd":
        rep = probes.svd_probe(layers, max_layers=args.max_layers or probes.SVD_LAYER_CAP)
        probes.write_long_csv(out / "probe_svd.csv", rep.rows())
        summary = rep.summary()
    elif args.which == "ks":
        rep = probes.ks_probe(layers, rng, max_layers=args.max_layers or probes.ENTROPY_LAYER_CAP)
        with open(out / "probe_ks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "s", "n_sub", "D", "skipped"])
            for r in rep.layers:
                w.writerow([r.layer, r.s, r.n_sub, "" if r.D is None else r.D, r.skipped or ""])
        summary = rep.summary()
    else:
        rep = probes.entropy_probe(layers, rng, n_patches=args.patches,
                                   max_layers=args.max_layers or probes.ENTROPY_LAYER_CAP)
        rates = np.linspace(0.0, 1.0, 21)
        rows = [(k, "H_RD", "", v) for k, v in rep.layers.items()]
        rows += [("__aggregate__", "D_lb", R, probes.rd_lower_bound(rep.aggregate, R)) for R in rates]
        probes.write_long_csv(out / "probe_entropy.csv", rows)
        summary = rep.summary()
    summary["probe"] = args.which
    _write_json(out / f"probe_{args.which}.json", summary)
    _emit(summary)
    if args.which == "ks" and summary["pooled_D"] is None:
        print("error: every layer was skipped (s < 32)", file=sys.stderr)
        return ConfigError.exit_code
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    base, sweep = load_config(args.config)
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = base.with_overrides(overrides)
    out = _out(args)
    runs = expand_sweep(base, sweep)
    results = []
    for i, (point, cfg) in enumerate(runs):
        run_dir = out if len(runs) == 1 else out / f"run_{i:03d}"
        art = train(cfg)
        art.save(run_dir)
        s = art.summary()
        s.update(run=i, dir=str(run_dir), point=point)
        results.append(s)
        print(f"[{i + 1}/{len(runs)}] {point or 'base'}: val_loss={s['val_loss']:.4f} "
              f"flip_mean={s['flip_mean']:.3e}", file=sys.stderr)
    if len(runs) > 1:
        metrics = ("val_loss", "flip_mean", "h_hat", "g_hat", "init_mismatch", "final_train_loss")
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            keys = list(sweep)
            w.writerow(["run", *keys, "metric", "value"])
            for s in results:
                for m in metrics:
                    w.writerow([s["run"], *(s["point"][k] for k in keys), m, s[m]])
    _emit({"runs": results} if len(runs) > 1 else results[0])
    return 0


# ---------------------------------------------------------------------------
# fit-zig
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    traces = signdyn.load_traces(args.traces)
    cfg = signdyn.StoppingConfig(args.rho, args.epsilon0, args.delta_hat)
    tr = signdyn.track_traces(traces, cfg)
    fit = signdyn.fit_zig(tr.k_eff)
    out = _out(args)
    signdyn.write_keff_csv(out / "keff.csv", tr.k_eff)
    signdyn.write_tail_csv(out / "tail.csv", tr.k_eff, fit)
    tail = signdyn.geometric_tail_fit(tr.k_eff)
    summary = {
        "h_hat": fit.h_hat, "g_hat": fit.g_hat, "n": fit.n,
        "rho": cfg.rho, "epsilon": cfg.epsilon,
        "frac_keff_zero": float(np.mean(tr.k_eff == 0)),
        "tail_fit": {"slope": tail.slope, "r2": tail.r2, "points": int(tail.ks.size)},
        "delta_hat": float(tr.max_update.max()) if traces.shape[1] > 1 else 0.0,
    }
    if args.coords:
        layers = []
        with open(args.coords, newline="") as fh:
            for row in csv.DictReader(fh):
                layers.append(row["layer"])
        if len(layers) != tr.k_eff.size:
            raise FormatError("coords file does not match the trace count")
        summary["per_layer"] = {k: asdict(v) for k, v in signdyn.fit_zig_by_group(tr.k_eff, layers).items()}
    _write_json(out / "zig.json", summary)
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# compress / decompress
# ---------------------------------------------------------------------------

def cmd_compress(args) -> int:
    layers = load_manifest(args.manifest)
    if args.layers:
        wanted = set(args.layers)
        layers = [L for L in layers if L.name in wanted]
        if not layers:
            raise ConfigError("no layer matches --layers")
    if args.mode == "csr":
        plan = compress.CompressionPlan("csr_sparse", keep_frac=args.keep_frac, bits=args.bits)
    else:
        if args.rank is None and args.target_bpw is None:
            raise ConfigError("SVD modes need --rank or --target-bpw")
        plan = compress.CompressionPlan("svd_factors", rank=args.rank, bits=args.bits,
                                        precondition="zscore" if args.zscore else "naive",
                                        target_bpw=args.target_bpw)
    tseed = args.template_seed if args.template_seed is not None else args.seed
    entries, per_layer = [], []
    total_bits = 0
    total_n = 0
    for L in layers:
        W = np.asarray(L.data, dtype=np.float64)
        tmpl = None
        if args.mode == "template":
            tmpl = compress.template_for(L.name, L.shape, tseed, args.template_rank, args.template_dist)
        entry, W_hat = compress.compress_layer(L.name, W, plan, args.mode, tmpl)
        entries.append(entry)
        rep = entry["report"]
        err = float(np.linalg.norm(W - W_hat) / max(np.linalg.norm(W), 1e-300))
        per_layer.append({"layer": L.name, "shape": list(L.shape), **rep.as_dict(),
                          "rank": getattr(entry.get("factors"), "rank", None), "rel_error": err})
        total_bits += rep.bpw * L.size
        total_n += L.size
    meta = {"mode": args.mode, "template_seed": tseed, "bits": args.bits}
    out = _out(args)
    compress.write_container(out, entries, meta)
    summary = {"container": str(out), "mode": args.mode, "bpw_eff": float(total_bits / total_n),
               "layers": per_layer}
    _emit(summary)
    return 0


def cmd_decompress(args) -> int:
    mats = compress.read_container(args.container)
    out = _out(args)
    save_manifest([WeightMatrix(k, v) for k, v in mats.items()], out)
    _emit({"layers": {k: list(v.shape) for k, v in mats.items()}, "manifest": str(out / "manifest.json")})
    return 0


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------

def _sgd_params(d: dict) -> bounds.SgdBoundParams:
    d = dict(d)
    sched = d.pop("schedule", {})
    if not isinstance(sched, dict):
        raise ConfigError("sgd.schedule must be an object")
    try:
        return bounds.SgdBoundParams(schedule=Schedule(**sched), **d)
    except TypeError as exc:
        raise ConfigError(f"sgd parameters: {exc}") from exc


def cmd_bound(args) -> int:
    doc = _read_json(args.params)
    result: dict = {}
    try:
        if "sgd" in doc:
            p = _sgd_params(doc["sgd"])
            result["sgd"] = bounds.g_sgd_bound(p).as_dict()
            if doc.get("ordering"):
                result["ordering"] = bounds.schedule_order_check(p).as_dict()
        if "outer_drift" in doc:
            g = bounds.g_od_bound(**doc["outer_drift"])
            result["outer_drift"] = {"g": g, "valid": g < 1, "vacuous": g >= 1}
        if "gap" in doc:
            gp = dict(doc["gap"])
            if "b_T" not in gp:
                gp["b_T"] = bounds.b_horizon(gp.pop("epsilon"), gp.pop("T"), gp.pop("delta"))
            h = bounds.h_gap_bound(**gp)
            result["gap"] = {"h": h, "b_T": gp["b_T"], "valid": h < 1}
        if "keff" in doc:
            result["keff"] = {"expected_keff_bound": bounds.expected_keff_bound(**doc["keff"])}
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bound parameters: {exc}") from exc
    if not result:
        raise ConfigError("params file has none of sgd, outer_drift, gap, keff")
    if args.out:
        _write_json(_out(args) / "bound.json", result)
    _emit(result)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        summary = json.loads((run / "summary.json").read_text())
        with open(run / "keff.csv", newline="") as fh:
            keff = np.array([int(r["k_eff"]) for r in csv.DictReader(fh)])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"{run}: not a run directory ({exc})") from exc
    fit = signdyn.fit_zig(keff)
    tail = signdyn.geometric_tail_fit(keff)
    kmax = int(keff.max()) if keff.size else 0
    table = [{"k": k, "empirical": signdyn.tail_empirical(keff, k), "zig": fit.tail(k)}
             for k in range(1, kmax + 1)]
    doc = {
        "run": str(run),
        "summary": summary,
        "zig": asdict(fit),
        "frac_keff_zero": float(np.mean(keff == 0)),
        "tail_fit": {"slope": tail.slope, "ratio": tail.ratio, "r2": tail.r2},
        "tail": table,
    }
    if args.out:
        _write_json(_out(args) / "report.json", doc)
    _emit(doc)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override; repeatable")

    p = argparse.ArgumentParser(prog="signlock", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("probe", parents=[common], help="SVD / KS / entropy probes on a manifest")
    s.add_argument("manifest")
    s.add_argument("--which", choices=("svd", "ks", "entropy"), required=True)
    s.add_argument("--patches", type=int, default=probes.DEFAULT_PATCHES)
    s.add_argument("--max-layers", type=int, default=None)
    s.set_defaults(func=cmd_probe, default_out="probe_out")

    s = sub.add_parser("train", parents=[common], help="train from a JSON config (sweeps allowed)")
    s.add_argument("config")
    s.set_defaults(func=cmd_train, default_out="run_out")

    s = sub.add_parser("fit-zig", parents=[common], help="excursions and ZIG fit from an STRC file")
    s.add_argument("traces")
    s.add_argument("--rho", type=float, default=signdyn.DEFAULT_RHO)
    s.add_argument("--epsilon0", type=float, default=signdyn.DEFAULT_EPSILON0)
    s.add_argument("--delta-hat", type=float, default=None)
    s.add_argument("--coords", default=None, help="coords.csv for per-layer fits")
    s.set_defaults(func=cmd_fit, default_out="fit_out")

    s = sub.add_parser("compress", parents=[common], help="compress a manifest into a container")
    s.add_argument("manifest")
    s.add_argument("--mode", choices=("template", "raw", "csr"), default="template")
    s.add_argument("--target-bpw", type=float, default=None)
    s.add_argument("--rank", type=int, default=None)
    s.add_argument("--bits", type=int, default=compress.DEFAULT_BITS)
    s.add_argument("--keep-frac", type=float, default=None)
    s.add_argument("--zscore", action="store_true")
    s.add_argument("--template-seed", type=int, default=None)
    s.add_argument("--template-rank", type=int, default=2)
    s.add_argument("--template-dist", choices=("gaussian", "uniform"), default="gaussian")
    s.add_argument("--layers", nargs="*", default=None)
    s.set_defaults(func=cmd_compress, default_out="compressed")

    s = sub.add_parser("decompress", parents=[common], help="rebuild weights from a container")
    s.add_argument("container")
    s.set_defaults(func=cmd_decompress, default_out="decompressed")

    s = sub.add_parser("bound", parents=[common], help="evaluate closed-form bounds from JSON")
    s.add_argument("params")
    s.set_defaults(func=cmd_bound, default_out=None)

    s = sub.add_parser("report", parents=[common], help="summarize a training run directory")
    s.add_argument("run")
    s.set_defaults(func=cmd_report, default_out=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = args.default_out
    if args.command != "train":
        if args.set:
            parser.error("--set applies only to train")
        args.seed = 0 if args.seed is None else args.seed
    try:
        return args.func(args)
    except SignlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
