"""Batch command-line front end.

Exit codes: 0 success, 1 numerical/domain error, 2 usage or I/O error.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, analysis, scalecast, tensor_io
from .gptq import (
    CalibrationSet,
    FactorizationError,
    build_hessian,
    gptq_constrain,
    gptq_quantize,
    rtn_baseline,
    rtn_constrain,
)
from .lorc import apply_lorc, error_matrix, lorc_factorize
from .quant import QuantizationError, dequantize, quantize
from .spec import SpecError, parse_constraint, parse_spec

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RecipeConfig:
    spec: str
    gptq: bool = False
    block: int = 128
    damping: float = 0.01
    lorc_rank: int = 0
    scale_constraint: str = "none"
    cast: bool = True
    seed: int = 0
    weights: str | None = None
    calib: str | None = None
    out: str | None = None
    lorc_out: str | None = None
    report: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown recipe keys: {', '.join(unknown)}")
        if "spec" not in d:
            raise UsageError("recipe needs a 'spec'")
        return cls(**d)

    def resolved_spec(self):
        spec = parse_spec(self.spec)
        kind, rows = parse_constraint(self.scale_constraint)
        if kind != "none":
            if spec.scale_constraint not in ("none", kind) or (kind == "m2" and spec.scale_constraint == "m2"
                                                                and spec.group_rows != rows):
                raise SpecError(f"--scale-constraint {self.scale_constraint} conflicts with spec {spec}")
            spec = spec.with_constraint(kind, rows)
        return spec


def _load_config(args) -> RecipeConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
    overrides = {
        "spec": args.spec, "gptq": args.gptq or None, "block": args.block, "damping": args.damping,
        "lorc_rank": args.lorc, "scale_constraint": args.scale_constraint,
        "cast": False if args.no_cast else None, "seed": args.seed, "weights": args.weights,
        "calib": args.calib, "out": args.out, "lorc_out": args.lorc_out, "report": args.report,
    }
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RecipeConfig.from_dict(merged)
    if cfg.weights is None:
        raise UsageError("no input tensor given (--weights)")
    return cfg


def _read_input(path):
    return tensor_io.read_tensor(path)


def _stage(name, W, approx, X, **extra) -> dict:
    rep = analysis.error_report(W, approx, calib=X)
    d = {"stage": name}
    d.update(rep.to_dict())
    d.pop("per_group_mse", None)
    d.pop("subset_max_abs_err", None)
    d.pop("extra", None)
    d.update(extra)
    return d


def _emit(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_pipeline(cfg: RecipeConfig) -> dict:
    """RTN or GPTQ, then optional LoRC, optional M1/M2 constraint and FP8 cast."""
    spec = cfg.resolved_spec()
    base_spec = spec.unconstrained()
    W = _read_input(cfg.weights)
    X = None
    if cfg.calib:
        X = _read_input(cfg.calib)
        if X.ndim != 2 or X.shape[1] != (W.shape[-1] if W.ndim else 0):
            raise QuantizationError(f"calibration shape {X.shape} does not match weights {W.shape}")
    if cfg.gptq and X is None:
        raise UsageError("--gptq needs --calib")
    if cfg.lorc_rank and W.ndim != 2:
        raise UsageError("LoRC needs a 2-D weight matrix")

    timing = {}
    stages = []
    t0 = time.perf_counter()
    hess = None
    if cfg.gptq:
        hess = build_hessian(CalibrationSet(X, source=str(cfg.calib)), cfg.damping)
        q = gptq_quantize(W, hess, base_spec, block_size=cfg.block)
        first = "gptq"
    else:
        q = rtn_baseline(W, base_spec)
        first = "rtn"
    timing[first] = time.perf_counter() - t0
    stages.append(_stage(first, W, q, X, spec=str(base_spec)))

    factors = None
    lorc_product = 0.0
    if cfg.lorc_rank:
        t0 = time.perf_counter()
        factors = lorc_factorize(error_matrix(W, q), cfg.lorc_rank)
        lorc_product = factors.product()
        timing["lorc"] = time.perf_counter() - t0
        stages.append(_stage("lorc", W, apply_lorc(q, factors), X, rank=factors.rank,
                             captured_energy=factors.captured_energy, overhead=factors.overhead()))

    final = q
    cast_info = None
    if spec.scale_constraint != "none":
        t0 = time.perf_counter()
        if cfg.gptq:
            qc = gptq_constrain(W, hess, q, spec, block_size=cfg.block)
        else:
            qc = rtn_constrain(W, q, spec)
        if factors is not None:
            # refit the compensation to the constrained weight's own error
            factors = lorc_factorize(error_matrix(W, qc), cfg.lorc_rank)
            lorc_product = factors.product()
        timing["constrain"] = time.perf_counter() - t0
        stages.append(_stage(f"constrain_{spec.scale_constraint}", W, dequantize(qc) + lorc_product, X,
                             spec=str(spec), lorc_refit=factors is not None))
        final = qc
        if cfg.cast:
            t0 = time.perf_counter()
            cast = scalecast.cast_group_to_fp8(qc)
            timing["cast"] = time.perf_counter() - t0
            added = float(np.max(np.abs(dequantize(cast) - dequantize(qc))))
            cast_info = dict(cast.meta)
            stages.append(_stage("cast_e5m2", W, dequantize(cast) + lorc_product, X,
                                 cast_added_error=added, **cast.meta))
            final = cast

    if cfg.out:
        tensor_io.write_quantized(cfg.out, final, lorc_ref=cfg.lorc_out if factors is not None else None)
    if cfg.lorc_out and factors is not None:
        tensor_io.write_lorc(cfg.lorc_out, factors)

    report = {
        "command": "quantize",
        "version": __version__,
        "recipe": asdict(cfg),
        "resolved_spec": str(spec),
        "shape": list(W.shape),
        "stages": stages,
        "timing_s": timing,
    }
    if cast_info is not None:
        report["saturations"] = cast_info["saturations"]
    return report


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    report = run_pipeline(cfg)
    _emit(report, cfg.report)
    return EXIT_OK


def cmd_gptq(args) -> int:
    spec = parse_spec(args.spec)
    W = _read_input(args.weights)
    X = _read_input(args.calib)
    hess = build_hessian(CalibrationSet(X, source=args.calib), args.damping)
    q = gptq_quantize(W, hess, spec, block_size=args.block)
    tensor_io.write_quantized(args.out, q)
    rtn = rtn_baseline(W, spec)
    report = {
        "command": "gptq",
        "spec": str(spec),
        "block": args.block,
        "damping": args.damping,
        "gptq": _stage("gptq", W, q, X),
        "rtn": _stage("rtn", W, rtn, X),
    }
    _emit(report, args.report)
    return EXIT_OK


def cmd_lorc(args) -> int:
    W = _read_input(args.weights)
    q = tensor_io.read_quantized(args.quantized)
    factors = lorc_factorize(error_matrix(W, q), args.rank)
    tensor_io.write_lorc(args.out, factors)
    report = {
        "command": "lorc",
        "rank": factors.rank,
        "captured_energy": factors.captured_energy,
        "overhead": factors.overhead(),
        "before": _stage("quantized", W, q, None),
        "after": _stage("lorc", W, apply_lorc(q, factors), None),
    }
    _emit(report, args.report)
    return EXIT_OK


def cmd_cast(args) -> int:
    q = tensor_io.read_quantized(args.quantized)
    cast = scalecast.cast_group_to_fp8(q)
    tensor_io.write_quantized(args.out, cast)
    added = float(np.max(np.abs(dequantize(cast) - dequantize(q))))
    _emit({"command": "cast", "cast_added_error": added, **cast.meta}, args.report)
    return EXIT_OK


def _clustered_mask(W) -> np.ndarray:
    med, sigma = analysis.robust_sigma(np.asarray(W).reshape(-1))
    return np.abs(W - med) <= analysis.OUTLIER_SIGMAS * sigma


def compare_rows(W, recipes, X=None, use_gptq=False, block=128, damping=0.01):
    specs = [parse_spec(r) for r in recipes]
    hess = build_hessian(X, damping) if use_gptq else None
    cands = []
    for spec in specs:
        if use_gptq and spec.granularity != "token":
            cands.append(gptq_quantize(W, hess, spec, block_size=block))
        else:
            cands.append(quantize(W, spec))
    table = analysis.compare(W, cands, calib=X, subset=_clustered_mask(W))
    rows = []
    for recipe, rep in zip(recipes, table):
        d = {"recipe": recipe}
        d.update({k: v for k, v in rep.to_dict().items() if k not in ("per_group_mse", "extra")})
        rows.append(d)
    return rows, table.winners


CSV_COLUMNS = ("recipe", "mse", "max_abs_err", "sqnr_db", "frobenius", "proxy_loss", "subset_max_abs_err")


def cmd_compare(args) -> int:
    if len(args.recipe) < 2:
        raise UsageError("compare needs at least two --recipe entries")
    for r in args.recipe:
        parse_spec(r)
    W = _read_input(args.weights)
    X = _read_input(args.calib) if args.calib else None
    if args.gptq and X is None:
        raise UsageError("--gptq needs --calib")
    rows, winners = compare_rows(W, args.recipe, X, args.gptq, args.block, args.damping)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})
        text = buf.getvalue()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    else:
        _emit({"command": "compare", "weights": args.weights, "rows": rows, "winners": winners}, args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    x = _read_input(args.input)
    rep = analysis.summarize(x, bins=args.bins)
    if args.histogram:
        Path(args.histogram).write_text(analysis.histogram_text(rep))
    d = rep.to_dict()
    if args.format == "csv":
        keys = [k for k in d if k not in ("histogram", "bin_edges")]
        text = ",".join(keys) + "\n" + ",".join(repr(d[k]) for k in keys) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    else:
        _emit({"command": "analyze", "input": args.input, "bins": args.bins, **d}, args.out)
    return EXIT_OK


def parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad shape {text!r}; expected e.g. 1024x1024") from None
    if not shape or any(d < 1 for d in shape):
        raise UsageError(f"bad shape {text!r}")
    return shape


def cmd_gen(args) -> int:
    if args.kind == "cluster_outlier":
        x = analysis.cluster_outlier_vector()
    else:
        if args.shape is None:
            raise UsageError("--shape is required for synthetic kinds")
        x = analysis.gen_synthetic(args.kind, parse_shape(args.shape), args.seed,
                                   rate=args.rate, magnitude=args.magnitude)
    tensor_io.write_tensor(args.out, x)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fpq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="RTN/GPTQ quantization with optional LoRC, M1/M2 and FP8 cast")
    q.add_argument("--weights", "--input", "--acts", dest="weights", help="input tensor (.bin)")
    q.add_argument("--calib", help="calibration activations [n, in] (.bin)")
    q.add_argument("--spec", help="recipe, e.g. fp4:e2m1:group256 or int8:asym:token")
    q.add_argument("--config", help="JSON recipe; flags override its keys")
    q.add_argument("--gptq", action="store_true", help="use the GPTQ solver (needs --calib)")
    q.add_argument("--block", type=int, help="GPTQ block size (default 128)")
    q.add_argument("--damping", type=float, help="Hessian damping fraction (default 0.01)")
    q.add_argument("--lorc", type=int, metavar="RANK", help="LoRC rank (0 disables)")
    q.add_argument("--scale-constraint", help="none, m1 or m2:<rows>")
    q.add_argument("--no-cast", action="store_true", help="skip the E5M2 cast after M1/M2")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", help="quantized output (.qt)")
    q.add_argument("--lorc-out", help="LoRC factors output (.lorc)")
    q.add_argument("--report", help="JSON report path (default stdout)")
    q.set_defaults(func=cmd_quantize)

    g = sub.add_parser("gptq", help="GPTQ-quantize one weight matrix")
    g.add_argument("--weights", required=True)
    g.add_argument("--calib", required=True)
    g.add_argument("--spec", required=True)
    g.add_argument("--block", type=int, default=128)
    g.add_argument("--damping", type=float, default=0.01)
    g.add_argument("--out", required=True)
    g.add_argument("--report")
    g.set_defaults(func=cmd_gptq)

    lo = sub.add_parser("lorc", help="low-rank compensation factors for a quantized weight")
    lo.add_argument("--weights", required=True)
    lo.add_argument("--quantized", required=True)
    lo.add_argument("--rank", type=int, default=8)
    lo.add_argument("--out", required=True)
    lo.add_argument("--report")
    lo.set_defaults(func=cmd_lorc)

    c = sub.add_parser("cast", help="cast an M1/M2-constrained FP4 tensor to E5M2")
    c.add_argument("--quantized", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report")
    c.set_defaults(func=cmd_cast)

    cm = sub.add_parser("compare", help="error table for several recipes on one tensor")
    cm.add_argument("--weights", required=True)
    cm.add_argument("--recipe", action="append", default=[], required=True)
    cm.add_argument("--calib")
    cm.add_argument("--gptq", action="store_true")
    cm.add_argument("--block", type=int, default=128)
    cm.add_argument("--damping", type=float, default=0.01)
    cm.add_argument("--format", choices=("json", "csv"), default="json")
    cm.add_argument("--out")
    cm.set_defaults(func=cmd_compare)

    a = sub.add_parser("analyze", help="distribution summary and histogram")
    a.add_argument("--input", required=True)
    a.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    a.add_argument("--histogram", help="write two-column histogram text here")
    a.add_argument("--format", choices=("json", "csv"), default="json")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    gn = sub.add_parser("gen", help="seeded synthetic tensor")
    gn.add_argument("--kind", required=True, choices=analysis.KINDS + ("cluster_outlier",))
    gn.add_argument("--shape")
    gn.add_argument("--seed", type=int, default=0)
    gn.add_argument("--rate", type=float, default=0.01)
    gn.add_argument("--magnitude", type=float, default=100.0)
    gn.add_argument("--out", required=True)
    gn.set_defaults(func=cmd_gen)
    return p


def _fail(code: int, exc: BaseException, **extra) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    err.update(extra)
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, exc, path=exc.filename)
    except (UsageError, SpecError, tensor_io.FormatError, OSError) as exc:
        return _fail(EXIT_USAGE, exc, path=getattr(exc, "filename", None))
    except (QuantizationError, FactorizationError, np.linalg.LinAlgError, ValueError, ArithmeticError) as exc:
        return _fail(EXIT_DOMAIN, exc)


if __name__ == "__main__":
    sys.exit(main())
