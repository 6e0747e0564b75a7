"""``catmap`` command line.

Exit codes: 0 success, 1 failed experiment check, 2 usage or input error,
3 solver declared the problem infeasible, 4 solver hit its iteration limit.
Settings resolve as flag > ``--config`` JSON > built-in default; every
summary lists the settings that fell back to a default.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import colour, datasets, kernelmap, nnmap, quantile1d, repro
from .cvxgrad import FitError, SmoothnessParams, fit_map
from .io import atomic_write_json, atomic_write_text
from .measure import DiscreteMeasure, MeasureError, load_measure
from .otcore import CostFunction, OTError, plan_to_csv, solve_kantorovich

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_MAXITER = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# settings and their defaults, per subcommand
DEFAULTS = {
    "gen": {"n": 500, "spec": None, "preset": None, "quantiles": False, "out": "measure.json"},
    "ot": {"cost": "sqeuclidean", "p": 2.0, "plan_out": None},
    "fit": {
        "solver": None, "cost": "sqeuclidean", "p": 2.0,
        "L": 2.0, "ell": 0.0, "max_outer": 50,
        "lam": 0.01, "sigma2": [1.0], "steps": None, "alpha0": None, "tau": 100.0,
        "hidden": [16, 16, 16], "w": 0.5, "batch": 64, "offset": True, "preset": None,
        "model_out": "model.json",
    },
    "transfer": {
        "model": None, "train_source": None, "train_target": None, "budget": 4096,
        "hidden": [32, 32], "w": 0.5, "steps": 1000, "batch": 64, "alpha0": 0.02, "tau": 500.0,
        "output": "transfer.png",
    },
    "repro": {},
}


def _resolve(cmd: str, args: argparse.Namespace) -> tuple[dict, list]:
    cfg = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    known = DEFAULTS[cmd]
    unknown = sorted(set(cfg) - set(known) - {"seed"})
    if unknown:
        raise UsageError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
    settings, defaulted = {}, []
    for key in list(known) + ["seed"]:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
        elif key in cfg:
            settings[key] = cfg[key]
        else:
            settings[key] = known.get(key, 0)
            defaulted.append(key)
    return settings, defaulted


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path) -> DiscreteMeasure:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    try:
        return load_measure(p)
    except (MeasureError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: malformed measure ({exc})") from None


def _cost(name: str, p: float) -> CostFunction:
    if name == "sqeuclidean":
        return CostFunction.squared_euclidean()
    if name == "pnorm":
        return CostFunction.norm_power(p, "l2")
    if name == "linf":
        return CostFunction.norm_power(p, "linf")
    raise UsageError(f"unknown cost {name!r}")


def _write_outputs(out: Path, name: str, summary: dict):
    atomic_write_json(out / f"{name}.json", summary)
    print(json.dumps(summary, sort_keys=True))


# -- gen ---------------------------------------------------------------------

PRESETS = {
    "gaussian2d": datasets.STANDARD_GAUSSIAN_2D,
    "mixture2d": datasets.two_gaussians_2d(),
    "interval-source": datasets.INTERVAL_SOURCE,
    "two-intervals-target": datasets.TWO_INTERVALS_TARGET,
}


def cmd_gen(args) -> int:
    s, defaulted = _resolve("gen", args)
    if s["spec"] is not None and s["preset"] is not None:
        raise UsageError("give either --spec or --preset")
    if s["preset"] is not None:
        spec = PRESETS[s["preset"]]
    elif s["spec"] is not None:
        spec = s["spec"]
        if isinstance(spec, str):
            p = Path(spec)
            try:
                spec = json.loads(p.read_text()) if p.is_file() else json.loads(spec)
            except json.JSONDecodeError as exc:
                raise UsageError(f"spec is neither a JSON file nor inline JSON ({exc})") from None
    else:
        raise UsageError("a distribution is required (--spec or --preset)")
    n = int(s["n"])
    if n < 1:
        raise UsageError(f"n must be at least 1, got {n}")
    try:
        datasets.validate(spec)
        if s["quantiles"]:
            mu = datasets.midpoint_measure_1d(spec, n)
        else:
            mu = datasets.empirical(spec, n, s["seed"])
    except datasets.SpecError as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    out = _out_dir(args)
    dest = out / s["out"]
    if dest.suffix.lower() == ".csv":
        rows = "".join(",".join(repr(v) for v in r) + "\n" for r in mu.to_csv_rows())
        atomic_write_text(dest, rows)
    else:
        atomic_write_json(dest, mu.to_dict())
    _write_outputs(out, "gen", {"file": str(dest), "n": mu.size, "dim": mu.dim, "spec": spec, "seed": s["seed"],
                                "defaulted": defaulted})
    return EXIT_OK


# -- ot ----------------------------------------------------------------------


def cmd_ot(args) -> int:
    s, defaulted = _resolve("ot", args)
    mu, nu = _load(args.source), _load(args.target)
    if mu.dim != nu.dim:
        raise UsageError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    c = _cost(s["cost"], float(s["p"]))
    try:
        plan, value = solve_kantorovich(mu.weights, nu.weights, c.matrix(mu.points, nu.points))
    except OTError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    if s["plan_out"]:
        atomic_write_text(out / s["plan_out"], plan_to_csv(plan))
    print(repr(value))
    atomic_write_json(out / "ot.json", {"value": value, "cost": s["cost"], "p": s["p"], "n": mu.size, "m": nu.size,
                                        "defaulted": defaulted})
    return EXIT_OK


# -- fit ---------------------------------------------------------------------


def _fit_1d(s, mu, nu, out):
    if mu.dim != 1 or nu.dim != 1:
        raise UsageError("the 1d solver needs 1D measures")
    m = quantile1d.solve_map_1d(mu, nu, float(s["L"]), float(s["ell"]))
    atomic_write_json(out / s["model_out"], m.to_dict())
    atomic_write_text(out / "map.csv", m.to_csv())
    return {"objective": m.objective, "status": "optimal"}, EXIT_OK


def _fit_cvx(s, mu, nu, out):
    c = _cost(s["cost"], float(s["p"]))
    if not c.is_quadratic():
        raise UsageError("the cvx solver needs a quadratic cost")
    res = fit_map(mu, nu, SmoothnessParams(float(s["ell"]), float(s["L"])), c, max_outer=int(s["max_outer"]))
    atomic_write_json(out / s["model_out"], res.witness.to_dict())
    lines = ["iteration,step,objective\n"] + [f"{t['iteration']},{t['step']},{t['objective']!r}\n" for t in res.trace]
    atomic_write_text(out / "trace.csv", "".join(lines))
    code = EXIT_OK if res.status == "converged" else EXIT_MAXITER
    return {"objective": res.objective, "status": res.status, "outer_iterations": len(res.trace) // 2}, code


def _fit_kernel(s, mu, nu, out):
    c = _cost(s["cost"], float(s["p"]))
    grid = s["sigma2"] if isinstance(s["sigma2"], list) else [s["sigma2"]]
    steps = 500 if s["steps"] is None else int(s["steps"])
    cfg = kernelmap.DescentConfig(None if s["alpha0"] is None else float(s["alpha0"]), float(s["tau"]), steps)
    rows, best = [], None
    for sig in grid:
        try:
            r = kernelmap.fit_kernel_map(mu, nu, float(s["lam"]), kernelmap.KernelSpec(sigma2=float(sig)), c, cfg,
                                         offset=bool(s["offset"]), seed=s["seed"])
        except kernelmap.DescentError as exc:
            raise _SolverFailure(EXIT_MAXITER, f"sigma2={sig}: {exc}") from None
        ov = kernelmap.evaluate_objective(r.best, mu, nu, c)
        rows.append((float(sig), ov.value, ov.transport, ov.penalty))
        atomic_write_text(out / f"trace_sigma2_{float(sig):g}.csv",
                          "step,objective\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(r.trace.tolist())))
        if best is None or ov.value < best[1]:
            best = (float(sig), ov.value, r.best)
    atomic_write_text(out / "sigma2_grid.csv",
                      "sigma2,objective,transport,penalty\n" + "".join(",".join(repr(v) for v in r) + "\n" for r in rows))
    atomic_write_json(out / s["model_out"], best[2].to_dict())
    return {"objective": best[1], "status": "done", "sigma2": best[0], "grid": [r[0] for r in rows]}, EXIT_OK


def _fit_nn(s, mu, nu, out):
    c = _cost(s["cost"], float(s["p"]))
    steps = 1000 if s["steps"] is None else int(s["steps"])
    if s["preset"] == "nn-field":
        setup = repro.nn_field_setup(int(s["seed"]), steps)
        net, cfg = setup.net, setup.config
        src, tgt = setup.samplers()
    elif s["preset"] is not None:
        raise UsageError(f"unknown nn preset {s['preset']!r}")
    else:
        if mu is None:
            raise UsageError("source and target measures are required without a preset")
        hidden = s["hidden"] if isinstance(s["hidden"], list) else [int(h) for h in str(s["hidden"]).split(",")]
        net = nnmap.NeuralMap.mlp(mu.dim, hidden, nu.dim, "relu", float(s["w"]), bool(s["offset"]) and mu.dim == nu.dim)
        cfg = nnmap.SgdConfig(int(s["batch"]), int(s["batch"]), 0.05 if s["alpha0"] is None else float(s["alpha0"]),
                              float(s["tau"]), steps, int(s["seed"]))
        src, tgt = mu, nu
    try:
        r = nnmap.train(net, src, tgt, c, cfg)
    except nnmap.TrainingError as exc:
        raise _SolverFailure(EXIT_MAXITER, str(exc)) from None
    atomic_write_json(out / s["model_out"], net.to_dict(r.theta))
    atomic_write_text(out / "trace.csv", r.log_csv())
    sm = r.smoothed(100)
    return {"status": "done", "final_smoothed_loss": float(sm[-1]) if sm.size else None,
            "first_smoothed_loss": float(sm[min(99, sm.size - 1)]) if sm.size else None,
            "sgd": nnmap.config_dict(cfg), "dims": list(net.dims), "w": net.w}, EXIT_OK


class _SolverFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


FIT_SOLVERS = {"1d": _fit_1d, "cvx": _fit_cvx, "kernel": _fit_kernel, "nn": _fit_nn}


def cmd_fit(args) -> int:
    s, defaulted = _resolve("fit", args)
    if s["solver"] not in FIT_SOLVERS:
        raise UsageError(f"--solver must be one of {sorted(FIT_SOLVERS)}")
    needs_data = not (s["solver"] == "nn" and s["preset"] is not None)
    if needs_data and (args.source is None or args.target is None):
        raise UsageError("source and target measure files are required")
    mu = _load(args.source) if args.source else None
    nu = _load(args.target) if args.target else None
    if needs_data and mu.dim != nu.dim and s["solver"] != "nn":
        raise UsageError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    out = _out_dir(args)
    t0 = time.perf_counter()
    try:
        summary, code = FIT_SOLVERS[s["solver"]](s, mu, nu, out)
    except FitError as exc:
        summary = {"status": exc.status, "error": str(exc)}
        code = EXIT_INFEASIBLE if exc.status == "infeasible" else EXIT_MAXITER
    except _SolverFailure as exc:
        summary, code = {"status": "failed", "error": str(exc)}, exc.code
    except (ValueError, quantile1d.QuantileError, kernelmap.KernelError, nnmap.NetworkError) as exc:
        raise UsageError(str(exc)) from None
    summary.update({"solver": s["solver"], "seconds": time.perf_counter() - t0, "seed": s["seed"],
                    "defaulted": defaulted})
    _write_outputs(out, "fit", summary)
    if code != EXIT_OK:
        print(f"catmap fit: {summary.get('error', summary['status'])}", file=sys.stderr)
    return code


# -- transfer ----------------------------------------------------------------


def cmd_transfer(args) -> int:
    s, defaulted = _resolve("transfer", args)
    try:
        img = colour.read_rgb(args.input)
    except FileNotFoundError:
        raise UsageError(f"file not found: {args.input}") from None
    except colour.ImageError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    meta = {"input": str(args.input), "seed": s["seed"]}
    if s["model"] is not None:
        if s["train_source"] or s["train_target"]:
            raise UsageError("give either --model or a training pair")
        if not Path(s["model"]).is_file():
            raise UsageError(f"file not found: {s['model']}")
        try:
            g = colour.load_map(s["model"])
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"{s['model']}: unusable model ({exc})") from None
        meta["model"] = str(s["model"])
    else:
        if not (s["train_source"] and s["train_target"]):
            raise UsageError("either --model or both --train-source and --train-target are required")
        try:
            src, tgt = colour.read_rgb(s["train_source"]), colour.read_rgb(s["train_target"])
        except FileNotFoundError as exc:
            raise UsageError(f"file not found: {exc.filename}") from None
        except colour.ImageError as exc:
            raise UsageError(str(exc)) from None
        hidden = s["hidden"] if isinstance(s["hidden"], list) else [int(h) for h in str(s["hidden"]).split(",")]
        cfg = colour.TransferConfig(
            budget=int(s["budget"]), hidden=tuple(hidden), w=float(s["w"]),
            sgd=nnmap.SgdConfig(int(s["batch"]), int(s["batch"]), float(s["alpha0"]), float(s["tau"]), int(s["steps"]),
                                int(s["seed"])),
            seed=int(s["seed"]))
        t0 = time.perf_counter()
        g = colour.train_transfer(src, tgt, cfg)
        meta["train_seconds"] = time.perf_counter() - t0
        atomic_write_json(out / "model.json", g.to_dict())
        atomic_write_text(out / "trace.csv", g.result.log_csv())
        meta["training"] = {"source": str(s["train_source"]), "target": str(s["train_target"]),
                            "budget": cfg.budget, "hidden": list(cfg.hidden), "w": cfg.w, "steps": cfg.sgd.steps}
    try:
        res = colour.apply_map(g, img)
    except (ValueError, kernelmap.KernelError, nnmap.NetworkError) as exc:
        raise UsageError(f"model cannot be applied to RGB pixels ({exc})") from None
    dest = colour.write_rgb(out / s["output"], res)
    meta.update({"output": str(dest), "defaulted": defaulted})
    _write_outputs(out, "transfer", meta)
    return EXIT_OK


# -- repro -------------------------------------------------------------------


def cmd_repro(args) -> int:
    name = args.name
    if name not in repro.EXPERIMENTS:
        print(f"catmap repro: unknown experiment {name!r}; choose from {', '.join(sorted(repro.EXPERIMENTS))}",
              file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args)
    t0 = time.perf_counter()
    try:
        rep = repro.EXPERIMENTS[name]()
    except repro.ExperimentFailure as exc:
        print(f"catmap repro {name}: FAILED on {exc.quantity}: {exc}", file=sys.stderr)
        atomic_write_json(out / f"{name.replace('-', '_')}.json",
                          {"name": name, "passed": False, "quantity": exc.quantity, "error": str(exc)})
        return EXIT_CHECK
    rep.summary["seconds_total"] = time.perf_counter() - t0
    rep.write(out)
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("--config", default=None, help="JSON file of settings; flags take precedence")

    ap = argparse.ArgumentParser(prog="catmap", description="Constrained approximate optimal transport maps.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="sample a discrete measure")
    g.add_argument("--spec", help="distribution spec, as a JSON file or inline JSON")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--n", type=int)
    g.add_argument("--quantiles", action="store_const", const=True, default=None,
                   help="1D only: atoms at the quantile midpoints instead of samples")
    g.add_argument("--out", help="output file name (.json or .csv) inside --out-dir")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("ot", parents=[common], help="exact discrete OT cost")
    o.add_argument("source")
    o.add_argument("target")
    o.add_argument("--cost", choices=["sqeuclidean", "pnorm", "linf"])
    o.add_argument("--p", type=float, help="exponent for pnorm and linf costs")
    o.add_argument("--plan-out", help="write the optimal plan as CSV")
    o.set_defaults(func=cmd_ot)

    f = sub.add_parser("fit", parents=[common], help="fit a map")
    f.add_argument("source", nargs="?")
    f.add_argument("target", nargs="?")
    f.add_argument("--solver", choices=sorted(FIT_SOLVERS))
    f.add_argument("--cost", choices=["sqeuclidean", "pnorm", "linf"])
    f.add_argument("--p", type=float)
    f.add_argument("--L", type=float)
    f.add_argument("--ell", type=float)
    f.add_argument("--max-outer", type=int)
    f.add_argument("--lam", type=float)
    f.add_argument("--sigma2", type=_floats, help="kernel bandwidths, comma separated")
    f.add_argument("--steps", type=int)
    f.add_argument("--alpha0", type=float)
    f.add_argument("--tau", type=float)
    f.add_argument("--hidden", type=_ints, help="hidden widths, comma separated")
    f.add_argument("--w", type=float, help="weight box radius")
    f.add_argument("--batch", type=int)
    f.add_argument("--offset", type=_bool)
    f.add_argument("--preset", choices=["nn-field"], help="nn solver: Gaussian to mixture sampling setup")
    f.add_argument("--model-out")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("transfer", parents=[common], help="colour transfer between RGB images")
    t.add_argument("input", help="image to recolour")
    t.add_argument("--model", help="saved map JSON")
    t.add_argument("--train-source")
    t.add_argument("--train-target")
    t.add_argument("--budget", type=int, help="pixels subsampled per training image")
    t.add_argument("--hidden", type=_ints)
    t.add_argument("--w", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--alpha0", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--output", help="output PNG name inside --out-dir")
    t.set_defaults(func=cmd_transfer)

    r = sub.add_parser("repro", parents=[common], help="run a scripted experiment")
    r.add_argument("name", help=", ".join(sorted(repro.EXPERIMENTS)))
    r.set_defaults(func=cmd_repro)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"catmap {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
