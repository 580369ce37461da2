"""Command-line front end: ``pqrlab <subcommand> ...``.

Exit codes: 0 success, 2 assertion or validation failure, 64 usage or
malformed configuration, 70 resource budget exceeded (or numeric overflow).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import estimator as est
from .dynamics import default_scan_problem, eta_scan
from .errors import NumericOverflowError, PqrError, ResourceError
from .family import (
    ScalingStrategy,
    derive_meta_family,
    gauge_transform,
    random_strategy,
    to_abc,
    validate_meta_principles,
)
from .kernels import ORDERS, TENSOR_NAMES, compute_kernels
from .network import NetworkConfig, init_params
from .numerics import RngStream, relative_error
from .oracle import kernels_from_definition
from .serialize import dump_layer_csv, save_kernels, save_params

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RESOURCE = 0, 2, 64, 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _expect(text):
    try:
        slope, tol = text.rsplit(":", 1)
        return float(slope), float(tol)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--expect takes SLOPE:TOL, got {text!r}") from None


# -------------------------------------------------------------------- output


def _emit(rows, columns, fmt, out=None):
    """Print ``rows`` (list of dicts) as a table, CSV or JSON."""
    out = sys.stdout if out is None else out
    if fmt == "json":
        out.write(json.dumps(rows, indent=2, default=float) + "\n")
    elif fmt == "csv":
        w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    else:
        cells = [[_cell(r.get(c)) for c in columns] for r in rows]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
        out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)) + "\n")
        for row in cells:
            out.write("  ".join(v.ljust(w) for v, w in zip(row, widths)) + "\n")


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


class _Run:
    """Collects output files and writes the run manifest under ``--out``."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.start = time.perf_counter()
        self.outputs = []
        self.out_dir = Path(args.out) if getattr(args, "out", None) else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path | None:
        if not self.out_dir:
            return None
        p = self.out_dir / name
        self.outputs.append(str(p))
        return p

    def write(self, name, text):
        p = self.path(name)
        if p:
            p.write_text(text)

    def finish(self, resolved: dict, columns=None):
        if not self.out_dir:
            return
        manifest = {
            "subcommand": self.args.command,
            "argv": self.argv,
            "config": resolved,
            "root_seed": getattr(self.args, "seed", None),
            "version": _version(),
            "duration_s": time.perf_counter() - self.start,
            "outputs": self.outputs,
            "csv_columns": columns or {},
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))


# ----------------------------------------------------------------- strategy


def _strategy_from_args(args, L) -> ScalingStrategy:
    if getattr(args, "p", None) is not None or getattr(args, "q", None) is not None:
        if args.p is None or args.q is None or args.r is None:
            raise UsageError("--p, --q and --r must be given together")
        return ScalingStrategy(len(args.p), args.p, args.q, args.r)
    if getattr(args, "s", None) is None:
        raise UsageError("give either --s or all of --p/--q/--r")
    return derive_meta_family(args.s, L)


def cmd_family(args, run) -> int:
    S = _strategy_from_args(args, args.L)
    if args.gauge:
        S = gauge_transform(S, args.gauge)
    out = S.to_dict()
    if args.to_abc:
        abc = to_abc(S)
        out["abc"] = {"a": list(abc.a), "b": list(abc.b), "c": abc.c}
    code = EXIT_OK
    if args.validate:
        rep = validate_meta_principles(S)
        out["constraints"] = rep._asdict()
        code = EXIT_OK if rep.ok else EXIT_FAIL
    if args.format == "json":
        print(json.dumps(out, indent=2))
    else:
        rows = [{"key": k, "value": json.dumps(v)} for k, v in out.items()]
        _emit(rows, ["key", "value"], args.format)
    run.write("family.json", json.dumps(out, indent=2))
    run.finish(out)
    return code


# ------------------------------------------------------------------ kernels


def _instance(args):
    widths = [args.n0] + [args.n] * (args.L - 1) + [args.n_out]
    config = NetworkConfig.critical(widths, args.act, lam_b=args.lam, lam_w=args.lam, eta0=args.eta0)
    data = est.sweep_input(args.seed, args.n0, args.samples)
    return config, data


def cmd_kernels(args, run) -> int:
    config, data = _instance(args)
    S = _strategy_from_args(args, args.L)
    params = init_params(config, S, RngStream(args.seed, 0))
    stack = compute_kernels(params, config, S, data, args.order, keep_layers=True)
    rows = []
    for l, layer in enumerate(stack.layers):
        for name in TENSOR_NAMES:
            if name in layer.computed:
                t = layer.get(name)
                rows.append({"layer": l + 1, "tensor": name, "shape": "x".join(map(str, t.shape)),
                             "max_abs": float(np.max(np.abs(t))), "diag_mean": float(np.mean(est._diag(t, t.ndim // 2)))})
    columns = ["layer", "tensor", "shape", "max_abs", "diag_mean"]
    _emit(rows, columns, args.format)
    if args.dump_layer is not None:
        if not 1 <= args.dump_layer <= config.L:
            raise UsageError(f"--dump-layer must lie in [1, {config.L}]")
        buf = io.StringIO()
        dump_layer_csv(stack.layers[args.dump_layer - 1], buf)
        p = run.path(f"layer{args.dump_layer}.csv")
        if p:
            p.write_text(buf.getvalue())
        else:
            sys.stdout.write(buf.getvalue())
    if run.out_dir:
        for p in save_kernels(stack, run.out_dir / "kernels") + save_params(params, config, run.out_dir / "params"):
            run.outputs.append(str(p))
        run.write("kernels_summary.csv", _csv(rows, columns))
    run.finish({"config": config.to_dict(), "strategy": S.to_dict(), "order": args.order,
                "inputs": data.inputs.tolist()}, {"kernels_summary.csv": columns})
    return EXIT_OK


def _csv(rows, columns):
    buf = io.StringIO()
    _emit(rows, columns, "csv", buf)
    return buf.getvalue()


def cmd_oracle_check(args, run) -> int:
    config, data = _instance(args)
    rng = np.random.Generator(np.random.Philox(key=[args.seed, 3]))
    S = derive_meta_family(args.s, args.L) if args.s is not None else random_strategy(rng, args.L)
    params = init_params(config, S, RngStream(args.seed, 0))
    rec = compute_kernels(params, config, S, data, args.order, keep_layers=False).output
    ref = kernels_from_definition(params, config, S, data, args.order, cap=args.cap)
    rows = [{"tensor": k, "max_rel_error": relative_error(rec.get(k), v)} for k, v in ref.items()]
    worst = max(r["max_rel_error"] for r in rows)
    rows.append({"tensor": "max", "max_rel_error": worst})
    _emit(rows, ["tensor", "max_rel_error"], args.format)
    run.write("oracle_check.csv", _csv(rows, ["tensor", "max_rel_error"]))
    run.finish({"config": config.to_dict(), "strategy": S.to_dict(), "order": args.order, "tol": args.tol},
               {"oracle_check.csv": ["tensor", "max_rel_error"]})
    return EXIT_OK if worst <= args.tol else EXIT_FAIL


def cmd_train_verify(args, run) -> int:
    config, S, data, params, loss = default_scan_problem(args.seed, args.n, args.L, args.n0, args.n_out,
                                                         args.samples, args.act, args.s)
    eta0s = np.logspace(np.log10(args.eta_min), np.log10(args.eta_max), args.points)
    scan = eta_scan(params, config, S, data, loss, eta0s)
    orders = {("output", k) for k in (1, 2, 3)} | {("ntk", k) for k in (1, 2)}
    if args.order:
        orders = {o for o in orders if o[1] in args.order}
    rows, fits = [], []
    for target, res, slopes in (("output", scan.output_residuals, scan.output_slopes),
                                ("ntk", scan.ntk_residuals, scan.ntk_slopes)):
        for k in sorted(res):
            if (target, k) not in orders:
                continue
            rows += [{"eta0": float(e), "target": target, "order": k, "discrepancy_norm": float(r)}
                     for e, r in zip(eta0s, res[k])]
            fits.append({"target": target, "order": k, "slope": slopes[k].slope, "slope_stderr": slopes[k].stderr,
                         "expected": k + 1.0})
    columns = ["eta0", "target", "order", "discrepancy_norm"]
    _emit(rows if args.format != "table" else fits,
          columns if args.format != "table" else ["target", "order", "slope", "slope_stderr", "expected"], args.format)
    run.write("train_verify.csv", _csv(rows, columns))
    run.write("train_verify_fits.json", json.dumps(fits, indent=2))
    run.finish({"config": config.to_dict(), "strategy": S.to_dict(), "eta0": eta0s.tolist(),
                "batch": list(loss.batch)}, {"train_verify.csv": columns})
    if args.expect is not None:
        slope, tol = args.expect
        if any(abs(f["slope"] - slope) > tol for f in fits):
            return EXIT_FAIL
    return EXIT_OK


# -------------------------------------------------------------------- sweep

SWEEP_KEYS = {
    "observable": (str, list),
    "kind": (str,),
    "s": (int, float, list),
    "widths": (list,),
    "depths": (list,),
    "n": (int,),
    "L": (int,),
    "M": (int,),
    "seed": (int,),
    "activation": (str,),
    "preset": (str, list),
    "n0": (int,),
    "n_out": (int,),
    "samples": (int,),
}


def load_sweep_config(path) -> dict:
    """Validated sweep configuration; errors name the offending key."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read sweep config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("sweep config must be a JSON object")
    for key, value in cfg.items():
        if key not in SWEEP_KEYS:
            raise UsageError(f"sweep config: unknown key {key!r}")
        if not isinstance(value, SWEEP_KEYS[key]) or isinstance(value, bool):
            raise UsageError(f"sweep config: key {key!r} has the wrong type")
    for key in ("observable", "s", "M"):
        if key not in cfg:
            raise UsageError(f"sweep config: missing key {key!r}")
    if ("widths" in cfg) == ("depths" in cfg):
        raise UsageError("sweep config: give exactly one of 'widths' or 'depths'")
    try:
        obs = cfg["observable"] if isinstance(cfg["observable"], list) else [cfg["observable"]]
        for o in obs:
            est.Observable.parse(o)
    except PqrError as exc:
        raise UsageError(f"sweep config: key 'observable': {exc}") from None
    if cfg.get("kind", "width" if "widths" in cfg else "depth") not in ("width", "depth"):
        raise UsageError("sweep config: key 'kind' must be 'width' or 'depth'")
    return cfg


def _run_sweep(cfg, threads) -> est.SweepResult:
    ss = cfg["s"] if isinstance(cfg["s"], list) else [cfg["s"]]
    result = est.SweepResult()
    common = dict(activation=cfg.get("activation", "tanh"), n0=cfg.get("n0", 8), n_out=cfg.get("n_out", 1))
    for s in ss:
        if "widths" in cfg:
            result.extend(est.width_sweep(cfg["observable"], s, cfg.get("L", 2), cfg["widths"], cfg["M"], cfg.get("seed", 0), threads,
                                          preset=cfg.get("preset", "critical"), samples=cfg.get("samples", 1),
                                          **common))
        else:
            result.extend(est.depth_sweep(cfg["observable"], s, cfg.get("n", 32), cfg["depths"], cfg["M"],
                                          cfg.get("seed", 0), threads, samples=cfg.get("samples", 1), **common))
    return result


def cmd_sweep(args, run) -> int:
    if args.config:
        cfg = load_sweep_config(args.config)
    else:
        if not args.observable or args.s is None or not (args.widths or args.depths):
            raise UsageError("sweep needs --config or --observable, --s and --widths/--depths")
        cfg = {"observable": args.observable, "s": args.s, "M": args.M, "seed": args.seed,
               "activation": args.act, "n_out": args.n_out, "n0": args.n0}
        if args.widths:
            cfg.update(widths=args.widths, L=args.L)
        else:
            cfg.update(depths=args.depths, n=args.n)
    if args.seed is not None and args.config:
        cfg["seed"] = args.seed
    threads = args.threads or est.default_threads()
    result = _run_sweep(cfg, threads)
    columns = list(est.CSV_HEADER)
    if args.format == "table":
        _emit([r._asdict() for r in result.rows], columns + ["flagged"], "table")
        print()
        _emit([f._asdict() for f in result.fits], ["observable", "s", "axis", "fixed", "slope", "slope_stderr",
                                                     "points"], "table")
    elif args.format == "csv":
        sys.stdout.write(result.to_csv())
    else:
        print(result.to_json())
    run.write("sweep.csv", result.to_csv())
    run.write("summary.json", result.to_json())
    run.finish(cfg, {"sweep.csv": columns})
    if args.expect is not None:
        slope, tol = args.expect
        n_obs = len(cfg["observable"]) if isinstance(cfg["observable"], list) else 1
        n_s = len(cfg["s"]) if isinstance(cfg["s"], list) else 1
        # a point set too flagged to fit counts as a miss
        if len(result.fits) < n_obs * n_s or any(abs(f.slope - slope) > tol for f in result.fits):
            return EXIT_FAIL
    return EXIT_OK


def cmd_replay(args, run) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = manifest["argv"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    return main(argv)


# ------------------------------------------------------------------- parser


def _add_common(p, n=4, L=2):
    p.add_argument("--n", type=int, default=n, help="hidden width (default %(default)s)")
    p.add_argument("--L", type=int, default=L, help="depth (default %(default)s)")
    p.add_argument("--n0", type=int, default=8, help="input dimension (default %(default)s)")
    p.add_argument("--n-out", type=int, default=1, help="output width (default %(default)s)")
    p.add_argument("--samples", type=int, default=1, help="number of input samples (default %(default)s)")
    p.add_argument("--act", default="tanh", choices=["linear", "tanh", "gelu"])
    p.add_argument("--seed", type=int, default=0)


def _add_output(p):
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.add_argument("--out", metavar="DIR", help="write result files and manifest.json here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pqrlab", description="Scaling-strategy laboratory for the NTK and its differentials.")
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("family", help="exponents of a scaling strategy")
    p.add_argument("--s", type=float, help="meta-family parameter")
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--p", type=_floats, help="explicit p exponents, comma-separated")
    p.add_argument("--q", type=_floats, help="explicit q exponents, comma-separated")
    p.add_argument("--r", type=float, help="explicit r exponent")
    p.add_argument("--gauge", type=float, default=0.0, help="apply the gauge shift g")
    p.add_argument("--to-abc", action="store_true", help="also print abc exponents")
    p.add_argument("--validate", action="store_true", help="check the constraints (exit 2 on failure)")
    p.add_argument("--format", choices=["table", "csv", "json"], default="json")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_family)

    p = sub.add_parser("kernels", help="per-layer NTK/dNTK/ddNTK for one instance")
    _add_common(p)
    p.add_argument("--s", type=float, default=0.0)
    p.add_argument("--p", type=_floats)
    p.add_argument("--q", type=_floats)
    p.add_argument("--r", type=float)
    p.add_argument("--order", choices=sorted(ORDERS), default="dntk")
    p.add_argument("--lam", type=float, default=1.0, help="lam_b = lam_W for every layer")
    p.add_argument("--eta0", type=float, default=1.0)
    p.add_argument("--dump-layer", type=int, metavar="LAYER", help="emit one layer's tensors as CSV")
    _add_output(p)
    p.set_defaults(func=cmd_kernels)

    p = sub.add_parser("oracle-check", help="compare recursions with the definition-based oracle")
    _add_common(p, n=3, L=2)
    p.add_argument("--s", type=float, help="meta-family s (default: a random strategy)")
    p.add_argument("--order", choices=sorted(ORDERS), default="ddntk")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--eta0", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--cap", type=int, default=500, help="parameter-count cap for the oracle")
    _add_output(p)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("train-verify", help="truncation order of the Taylor-expanded GD update")
    _add_common(p, n=16, L=3)
    p.set_defaults(n0=4, n_out=2, samples=3)
    p.add_argument("--s", type=float, default=0.0)
    p.add_argument("--order", type=_ints, help="truncation orders to report (default all)")
    p.add_argument("--eta-min", type=float, default=1e-2)
    p.add_argument("--eta-max", type=float, default=1e-1)
    p.add_argument("--points", type=int, default=8)
    p.add_argument("--expect", type=_expect, metavar="SLOPE:TOL")
    _add_output(p)
    p.set_defaults(func=cmd_train_verify)

    p = sub.add_parser("sweep", help="Monte Carlo width or depth sweep with slope fit")
    p.add_argument("--config", help="sweep JSON config")
    p.add_argument("--observable", help="e.g. z_dntk, ddntk1_mean, preact_sq(L), hodiff_even(2)")
    p.add_argument("--s", type=float)
    p.add_argument("--widths", type=_ints)
    p.add_argument("--depths", type=_ints)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--n0", type=int, default=8)
    p.add_argument("--n-out", type=int, default=1)
    p.add_argument("--act", default="tanh", choices=["linear", "tanh", "gelu"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: available cores)")
    p.add_argument("--expect", type=_expect, metavar="SLOPE:TOL")
    _add_output(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _join_negative_values(argv):
    """``--expect -0.5:0.1`` -> ``--expect=-0.5:0.1`` (argparse would read the value as a flag)."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--expect" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--expect={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_join_negative_values(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "sweep" and args.seed is None and not args.config:
        args.seed = 0
    try:
        run = _Run(args, argv)
        return args.func(args, run)
    except UsageError as exc:
        print(f"pqrlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ResourceError, NumericOverflowError) as exc:
        print(f"pqrlab: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except PqrError as exc:
        print(f"pqrlab: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
