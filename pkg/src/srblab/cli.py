"""Command-line front end: ``srblab <subcommand> [options]``.

Options may also come from a TOML config file (``--config``) with one table
per subcommand, keys spelled like the long options with underscores.  Command
line values override the file.  Every run writes ``meta.json`` with the
resolved options, the package version and timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .map_family import DomainError, family_from_name
from .parameter_select import (
    MTParameter,
    SequenceMember,
    check_collet_eckmann,
    check_polynomial_recurrence,
    find_misiurewicz_thurston,
    mt_sequence,
    transversality_sum,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("srblab")

SUBCOMMANDS = (
    "check-ce",
    "check-recurrence",
    "find-mt",
    "mt-sequence",
    "srb",
    "lyapunov",
    "tower",
    "eigenpair",
    "spike",
    "response",
    "decompose",
    "pipeline",
)


class Cache:
    """JSON/npz cache keyed by a hash of the inputs; disabled when ``root`` is None."""

    def __init__(self, root):
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts):
        return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:24]

    def get_json(self, key):
        if not self.root:
            return None
        p = self.root / f"{key}.json"
        return json.loads(p.read_text()) if p.exists() else None

    def put_json(self, key, obj):
        if self.root:
            (self.root / f"{key}.json").write_text(json.dumps(obj, sort_keys=True))


def _cache_dir(args):
    if getattr(args, "no_cache", False):
        return None
    return os.environ.get("SRBLAB_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "srblab"))


def _fmt(v):
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _load_mt(path) -> MTParameter:
    with open(path) as fh:
        return MTParameter.from_dict(json.load(fh))


def _observable(args, center_default):
    from .response_experiment import observable_AD

    name = args.observable
    if name == "x":
        return lambda x: np.asarray(x, dtype=float)
    if name == "x2":
        return lambda x: np.asarray(x, dtype=float) ** 2
    if name == "AD":
        center = args.center if args.center is not None else center_default
        if center is None:
            raise DomainError("observable AD needs --center or an MT parameter")
        return observable_AD(center, args.D, args.profile)
    raise DomainError(f"unknown observable {name!r}")


def _sequence(args, fam, mt0, cache):
    if getattr(args, "sequence_from", None):
        with open(args.sequence_from) as fh:
            return [SequenceMember.from_dict(d) for d in json.load(fh)]
    key = cache.key("mt_sequence", fam.name, mt0.to_dict(), args.count, args.Ca, list(args.dt_range), args.side)
    hit = cache.get_json(key)
    if hit is not None:
        return [SequenceMember.from_dict(d) for d in hit]
    side = args.side if args.side == "auto" else int(args.side)
    seq = mt_sequence(fam, mt0, args.count, Ca=args.Ca, dt_range=tuple(args.dt_range), side=side)
    cache.put_json(key, [m.to_dict() for m in seq])
    return seq


# ---------------------------------------------------------------- subcommands


def cmd_check_ce(args, fam, out, cache):
    rep = check_collet_eckmann(fam, args.t, args.lambda_c, args.H0, args.horizon)
    _dump(out / "ce_report.json", rep.to_dict())
    return rep.to_dict()


def cmd_check_recurrence(args, fam, out, cache):
    rep = check_polynomial_recurrence(fam, args.t, args.alpha, args.H0, args.horizon, C=args.C)
    _dump(out / "recurrence_report.json", rep.to_dict())
    return rep.to_dict()


def cmd_find_mt(args, fam, out, cache):
    mt = find_misiurewicz_thurston(fam, args.bracket, args.preperiod, args.period, tol=args.tol, dps=args.dps)
    d = mt.to_dict()
    pts = mt.postcritical_orbit(fam, 2 * 200 + 8)
    J = transversality_sum(fam, mt.t, 200, points=pts)
    d["transversality_sum"] = J.value
    d["transversality_tail"] = J.tail
    _dump(out / "mt.json", mt.to_dict())
    return d


def cmd_mt_sequence(args, fam, out, cache):
    mt0 = _load_mt(args.t0_from)
    seq = _sequence(args, fam, mt0, cache)
    _dump(out / "sequence.json", [m.to_dict() for m in seq])
    _write_csv(
        out / "sequence.csv",
        ["t", "abs_dt", "M", "preperiod", "residual", "log_lambda_ratio_M", "expansion_log_C", "min_critical_distance"],
        [[m.t, abs(m.t - mt0.t), m.M, m.mt.preperiod, m.mt.residual, m.log_lambda_ratio_M, m.expansion_log_C, m.min_critical_distance] for m in seq],
    )
    return {"count": len(seq), "dt_min": min(abs(m.t - mt0.t) for m in seq), "dt_max": max(abs(m.t - mt0.t) for m in seq)}


def cmd_srb(args, fam, out, cache):
    from .srb_estimate import birkhoff_average, integrate_observable, ulam_density

    A = _observable(args, None)
    res = {"t": args.t}
    if args.estimator in ("birkhoff", "both"):
        b = birkhoff_average(fam, args.t, A, args.n_iters, burn_in=args.burn_in, seed=args.seed)
        res.update({"birkhoff_mean": b.mean, "birkhoff_stderr": b.stderr, "flags": list(b.flags)})
    if args.estimator in ("ulam", "both"):
        d = ulam_density(fam, args.t, args.bins)
        d.to_csv(out / "density.csv")
        res.update({"ulam_mean": integrate_observable(d, A), "ulam_iterations": d.iterations, "support_hint": list(d.support_hint)})
    _dump(out / "srb.json", res)
    return res


def cmd_lyapunov(args, fam, out, cache):
    from .srb_estimate import lyapunov

    r = lyapunov(fam, args.t, args.n_iters, burn_in=args.burn_in, seed=args.seed)
    res = {"t": args.t, "lyapunov": r.mean, "stderr": r.stderr, "flags": list(r.flags)}
    _dump(out / "lyapunov.json", res)
    return res


def _base_tower(args, fam):
    from .tower import build_tower

    if args.t0_from:
        mt = _load_mt(args.t0_from)
        pts = mt.postcritical_orbit(fam, args.K_max + 3)
        return build_tower(fam, mt.t, args.delta, args.L, args.beta, args.K_max, args.H0, points=pts), mt
    if args.t is None:
        raise DomainError("need --t or --t0-from")
    return build_tower(fam, args.t, args.delta, args.L, args.beta, args.K_max, args.H0), None


def cmd_tower(args, fam, out, cache):
    tw, _ = _base_tower(args, fam)
    tw.to_json(out / "tower.json")
    return {"t": tw.t, "delta": tw.delta, "H_delta": tw.H_delta, "K_max": tw.K_max, "flags": tw.flags}


def cmd_eigenpair(args, fam, out, cache):
    from .tower import cutoff_family
    from .transfer_op import TowerGrid, TransferOperator, default_lambda, leading_eigenpair, theta0

    tw, mt = _base_tower(args, fam)
    lc = args.lambda_c if args.lambda_c else (mt.Lambda if mt else math.exp(tw.log_derivs[-1] / (len(tw.log_derivs) - 1)))
    rho = args.rho if args.rho else lc
    lam = args.lam if args.lam else default_lambda(lc, rho)
    cf = cutoff_family(tw)
    op = TransferOperator(tw, cf, TowerGrid(tw, lam, args.n0, args.n_level))
    rows = []
    for M in args.M:
        ep = leading_eigenpair(op, M, tol=args.tol)
        rows.append([M, ep.kappa, 1.0 - ep.kappa, ep.residual, ep.tau_M, ep.iterations])
        if args.write_phi:
            _dump(out / f"eigenpair_M{M}.json", ep.to_dict())
    _write_csv(out / "eigenpairs.csv", ["M", "kappa", "one_minus_kappa", "residual", "tau_M", "iterations"], rows)
    return {"lambda": lam, "theta0_inv": 1.0 / theta0(lc, lam), "kappa": {r[0]: r[1] for r in rows}}


def _response_setup(args, fam, cache):
    mt0 = _load_mt(args.t0_from)
    seq = _sequence(args, fam, mt0, cache)
    return mt0, seq


def cmd_spike(args, fam, out, cache):
    from .response_experiment import setup_base, setup_identified, sign_coherence, spike_displacement
    from .transfer_op import leading_eigenpair

    mt0, seq = _response_setup(args, fam, cache)
    A = _observable(args, mt0.periodic_point)
    base = setup_base(fam, mt0, K_max=args.K_max)
    rows = []
    for m in seq:
        ep = leading_eigenpair(base.op, 2 * m.M)
        ts = setup_identified(fam, base, m.mt, 2 * m.M)
        sd = spike_displacement(base, ts.tower, ep, A)
        sc = sign_coherence(base, ts.tower, ep, A)
        dt = abs(m.t - mt0.t)
        rows.append([m.t, dt, m.M, sd, abs(sd) / math.sqrt(dt), sc.min_fraction])
    rows.sort(key=lambda r: r[1])
    _write_csv(out / "spike.csv", ["t", "abs_dt", "M", "spike", "ratio_sqrt", "sign_coherence"], rows)
    r = [row[4] for row in rows]
    return {"ratio_band": [min(r), max(r)], "band_factor": max(r) / min(r) if min(r) > 0 else math.inf}


def cmd_response(args, fam, out, cache):
    from .response_experiment import response_curve, write_svg

    if args.t0_from:
        mt0, ts = _response_setup(args, fam, cache)
        t0 = mt0
        center = mt0.periodic_point
    else:
        if args.t0 is None or not args.ts:
            raise DomainError("need --t0-from, or --t0 with --ts")
        t0, ts, center = args.t0, args.ts, None
    A = _observable(args, center)
    curve = response_curve(
        fam, t0, ts, A, estimator=args.estimator, n_iters=args.n_iters, base_factor=args.base_factor,
        seed=args.seed, n_bins=args.bins, threads=args.threads,
    )
    curve.to_csv(out / "response.csv")
    summ = curve.summary()
    _dump(out / "fit.json", summ)
    if args.emit_svg:
        write_svg(curve, out / "response.svg", band=math.sqrt(curve.band_factor()) if curve.ratio_band else None)
    return summ


def cmd_decompose(args, fam, out, cache):
    from .response_experiment import decomposition_report, setup_base
    from .transfer_op import leading_eigenpair

    mt0, seq = _response_setup(args, fam, cache)
    A = _observable(args, mt0.periodic_point)
    base = setup_base(fam, mt0, K_max=args.K_max)
    full = leading_eigenpair(base.op, base.tower.K_max)
    rows = []
    for m in seq:
        d = decomposition_report(fam, base, m, A, phi_full=full)
        rows.append([d.t, abs(d.t - d.t0), d.M, d.term1, d.term2, d.term3, d.total, d.telescoping_residual])
    rows.sort(key=lambda r: r[1])
    _write_csv(out / "decomposition.csv", ["t", "abs_dt", "M", "term1", "term2", "term3", "total", "telescoping_residual"], rows)
    small = rows[:3]
    dom = all(abs(r[5]) > max(abs(r[3]), abs(r[4])) for r in small)
    return {"third_term_dominates_smallest_three": dom}


def cmd_pipeline(args, fam, out, cache):
    """find-mt, mt-sequence, response, spike and decompose, in that order, sharing the config."""
    if not args.config:
        raise DomainError("pipeline needs --config")
    cfg = _read_config(args.config)
    results = {}
    for name in ("find-mt", "mt-sequence", "response", "spike", "decompose"):
        if name not in cfg and name.replace("-", "_") not in cfg:
            continue
        argv = [name, "--config", args.config, "--out", str(out / name), "--threads", str(args.threads)]
        if name != "find-mt" and (out / "find-mt" / "mt.json").exists():
            argv += ["--t0-from", str(out / "find-mt" / "mt.json")]
        code, res = _run(argv)
        results[name] = res
        if code != 0:
            _dump(out / "pipeline.json", results)
            raise RuntimeError(f"pipeline step {name} failed")
    _dump(out / "pipeline.json", results)
    return results


COMMANDS = {
    "check-ce": cmd_check_ce,
    "check-recurrence": cmd_check_recurrence,
    "find-mt": cmd_find_mt,
    "mt-sequence": cmd_mt_sequence,
    "srb": cmd_srb,
    "lyapunov": cmd_lyapunov,
    "tower": cmd_tower,
    "eigenpair": cmd_eigenpair,
    "spike": cmd_spike,
    "response": cmd_response,
    "decompose": cmd_decompose,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------- parser


def _add_observable(p):
    p.add_argument("--observable", choices=["x", "x2", "AD"], default="AD")
    p.add_argument("--center", type=float, default=None)
    p.add_argument("--D", type=float, default=0.05)
    p.add_argument("--profile", choices=["tent", "smooth"], default="tent")


def _add_sequence(p):
    p.add_argument("--t0-from", dest="t0_from", default=None)
    p.add_argument("--sequence-from", dest="sequence_from", default=None)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--Ca", type=float, default=10.0)
    p.add_argument("--dt-range", dest="dt_range", type=float, nargs=2, default=[1e-8, 1e-3])
    p.add_argument("--side", default="auto")


def _add_tower(p):
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--t0-from", dest="t0_from", default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--L", type=float, default=8.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--K-max", dest="K_max", type=int, default=60)
    p.add_argument("--H0", type=int, default=1)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML file with one table per subcommand")
    common.add_argument("--family", default="logistic")
    common.add_argument("--out", default="srblab-out")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--no-cache", dest="no_cache", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="srblab", description="SRB measures and linear response for unimodal families")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-ce", parents=[common], help="Collet-Eckmann margins along the critical orbit")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--lambda-c", dest="lambda_c", type=float, required=True)
    p.add_argument("--H0", type=int, default=1)
    p.add_argument("--horizon", type=int, default=10_000)

    p = sub.add_parser("check-recurrence", parents=[common], help="polynomial recurrence margins")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--H0", type=int, default=1)
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--C", type=float, default=1.0)

    p = sub.add_parser("find-mt", parents=[common], help="Misiurewicz-Thurston parameter in a bracket")
    p.add_argument("--bracket", type=float, nargs=2, required=True)
    p.add_argument("--preperiod", type=int, required=True)
    p.add_argument("--period", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--dps", type=int, default=40)

    p = sub.add_parser("mt-sequence", parents=[common], help="one-sided MT sequence with admissible pairs")
    _add_sequence(p)

    for name, helptext in (("srb", "SRB averages by Birkhoff and Ulam"), ("lyapunov", "Lyapunov exponent")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--t", type=float, required=True)
        p.add_argument("--n-iters", dest="n_iters", type=int, default=10**7)
        p.add_argument("--burn-in", dest="burn_in", type=int, default=10_000)
        if name == "srb":
            p.add_argument("--estimator", choices=["birkhoff", "ulam", "both"], default="both")
            p.add_argument("--bins", type=int, default=2**14)
            _add_observable(p)
            p.set_defaults(observable="x")

    p = sub.add_parser("tower", parents=[common], help="tower geometry as JSON")
    _add_tower(p)

    p = sub.add_parser("eigenpair", parents=[common], help="truncated leading eigenpairs")
    _add_tower(p)
    p.add_argument("--M", type=int, nargs="+", default=[10, 15, 20, 25, 30])
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--n0", type=int, default=2**14)
    p.add_argument("--n-level", dest="n_level", type=int, default=2**12)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--write-phi", dest="write_phi", action="store_true")

    for name, helptext in (("spike", "spike displacement along an MT sequence"), ("decompose", "three-term decomposition")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _add_sequence(p)
        _add_observable(p)
        p.add_argument("--K-max", dest="K_max", type=int, default=64)

    p = sub.add_parser("response", parents=[common], help="response curve and Hölder fit")
    _add_sequence(p)
    _add_observable(p)
    p.add_argument("--t0", type=float, default=None)
    p.add_argument("--ts", type=float, nargs="*", default=None)
    p.add_argument("--estimator", choices=["birkhoff", "ulam", "both"], default="birkhoff")
    p.add_argument("--n-iters", dest="n_iters", type=int, default=10**8)
    p.add_argument("--base-factor", dest="base_factor", type=int, default=4)
    p.add_argument("--bins", type=int, default=2**14)
    p.add_argument("--emit-svg", dest="emit_svg", action="store_true")

    sub.add_parser("pipeline", parents=[common], help="run the configured steps in order")
    return parser


def _read_config(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _parse(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in SUBCOMMANDS), None)
    if known.config and command and command != "pipeline":
        cfg = _read_config(known.config)
        section = cfg.get(command, cfg.get(command.replace("-", "_"), {}))
        common = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        defaults = {k.replace("-", "_"): v for k, v in {**common, **section}.items()}
        subparser = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in subparser._actions}
        unknown = set(defaults) - set(actions)
        if unknown:
            raise DomainError(f"unknown config keys for {command}: {sorted(unknown)}")
        for k, v in defaults.items():
            actions[k].required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _run(argv):
    t_start = time.time()
    try:
        args = _parse(argv)
    except SystemExit as err:
        return int(err.code or 0), None
    except (DomainError, ValueError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}))
        return 2, None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Cache(_cache_dir(args))
    meta = {"command": args.command, "version": __version__, "options": {k: v for k, v in vars(args).items()}}
    try:
        fam = family_from_name(args.family)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = COMMANDS[args.command](args, fam, out, cache)
        meta["warnings"] = [str(w.message) for w in caught]
    except Exception as err:  # reported as machine-readable JSON
        err_obj = {"error": type(err).__name__, "message": str(err)}
        _dump(out / "error.json", err_obj)
        print(json.dumps(err_obj))
        meta["error"] = err_obj
        meta["wall_seconds"] = time.time() - t_start
        _dump(out / "meta.json", meta)
        return 2, err_obj
    meta["wall_seconds"] = time.time() - t_start
    _dump(out / "meta.json", meta)
    (out / "error.json").unlink(missing_ok=True)
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_default))
    return 0, result


def main(argv=None):
    code, _ = _run(sys.argv[1:] if argv is None else argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
