"""Command-line entry point: ``probstop <command> [options]``.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure,
4 non-convergence.  Every output carries ``#`` metadata comments with the
seed and parameters; nothing time-dependent is written, so identical
arguments give byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from probstop import __version__
from probstop.krylov import BENCHMARK_SIDES, poisson_benchmark
from probstop.odeivp import IntegrationFailure, ToleranceSpec, adiabatic_drift
from probstop.pdeforward import (
    DiscrepancyTarget,
    ForwardModel,
    make_experiment,
    misfit,
    write_grid_csv,
)
from probstop.randprobe import Distribution
from probstop.stochinv import ProbabilisticStopSpec, Schedule, invert
from probstop.trace import (
    FIXTURE_FAMILIES,
    calibrate_failure_rate,
    estimate_trace,
    exact_trace,
    fixture_operator,
    plan_probes,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_NONCONVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    """Malformed experiment config; the message carries the line number."""


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _emit_csv(out, meta: dict, header, rows, trailer=()) -> None:
    for k, v in meta.items():
        out.write(f"# {k}={_fmt(v)}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    for line in trailer:
        out.write(f"# {line}\n")


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.open("w", newline=""), True


def _write(path, fn) -> None:
    fh, close = _open_out(path)
    try:
        fn(fh)
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------- trace


def cmd_trace(args, parser) -> int:
    if args.plan:
        plan = plan_probes(args.eps, args.delta)
        rows = [[f.name, getattr(plan, f.name)] for f in fields(plan)]
        meta = {"command": "trace --plan", "seed": args.seed}
        _write(args.out, lambda fh: _emit_csv(fh, meta, ["quantity", "value"], rows))
        return EXIT_OK

    dist = Distribution.parse(args.dist)
    op = fixture_operator(args.family, args.s, args.seed)
    meta = {"command": "trace", "family": args.family, "s": args.s, "dist": dist.value, "seed": args.seed}
    if args.calibrate:
        n = args.n if args.n is not None else plan_probes(args.eps, args.delta).n_for(dist)
        res = calibrate_failure_rate(op, dist, n, args.eps, args.trials, args.seed)
        meta.update(eps=args.eps, delta=args.delta, trials=args.trials)
        header = ["family", "s", "dist", "n", "eps", "delta", "trials", "failures", "failure_rate", "std_err"]
        row = [args.family, args.s, dist.value, n, args.eps, args.delta, res.trials, res.failures,
               res.failure_rate, res.standard_error]
        _write(args.out, lambda fh: _emit_csv(fh, meta, header, [row]))
        return EXIT_OK

    n = args.n if args.n is not None else 1
    if n < 1:
        parser.error("--n must be >= 1")
    est = estimate_trace(op, dist, n, args.seed)
    exact = exact_trace(op)
    rel = abs(est.value - exact) / exact if exact else float("nan")
    header = ["family", "s", "dist", "n", "estimate", "exact", "rel_err"]
    row = [args.family, args.s, dist.value, n, est.value, exact, rel]
    _write(args.out, lambda fh: _emit_csv(fh, meta, header, [row]))
    return EXIT_OK


# ---------------------------------------------------------------- poisson-bench


def _parse_sizes(text: str) -> list[int]:
    sides = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        s = int(tok)
        side = math.isqrt(s)
        if s < 1 or side * side != s:
            raise ValueError(f"s = {s} is not a perfect square")
        sides.append(side)
    if not sides:
        raise ValueError("empty size list")
    return sides


def cmd_poisson_bench(args, parser) -> int:
    try:
        sides = _parse_sizes(args.sizes) if args.sizes else list(BENCHMARK_SIDES)
    except ValueError as exc:
        parser.error(f"--sizes: {exc}")
    methods = [m.strip().upper() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in ("MR", "CG", "SD", "LSD")]
    if bad:
        parser.error(f"unknown method(s): {', '.join(bad)}")
    rows = poisson_benchmark(sides, args.rho, methods, args.max_iter, keep_traces=args.history is not None)
    meta = {"command": "poisson-bench", "rho": args.rho, "seed": args.seed}
    header = ["s", "side", "method", "iterations", "final_relres", "converged"]
    table = [[r[h] for h in header] for r in rows]
    _write(args.out, lambda fh: _emit_csv(fh, meta, header, table))
    if args.history is not None:
        hist = []
        for r in rows:
            tr = r["trace"]
            rel = tr.relative_residuals
            steps = tr.step_history
            for k, v in enumerate(rel):
                step = steps[k - 1] if 0 < k <= len(steps) else ""
                hist.append([r["s"], r["method"], k, float(v), step])
        _write(args.history, lambda fh: _emit_csv(fh, meta, ["s", "method", "k", "relres", "step"], hist))
    return EXIT_OK


# ---------------------------------------------------------------- ode-adiabatic


def cmd_ode_adiabatic(args, parser) -> int:
    if not args.lam > 0:
        parser.error("--lambda must be positive")
    try:
        tol = ToleranceSpec(args.atol, args.rtol)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        res = adiabatic_drift(args.lam, tol, args.max_steps)
    except IntegrationFailure as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    sol = res.solution
    summary = (
        f"drift={res.drift!r} max_deviation={res.max_deviation!r} "
        f"accepted={sol.accepted} rejected={sol.rejected}"
    )
    meta = {"command": "ode-adiabatic", "lambda": args.lam, "atol": args.atol, "rtol": args.rtol, "seed": args.seed}
    rows = [[float(t), float(q), float(p), float(j)] for t, (q, p), j in zip(sol.t, sol.v, res.J)]
    if args.out:
        _write(args.out, lambda fh: _emit_csv(fh, meta, ["t", "q", "p", "J"], rows, [summary]))
        print(summary)
    else:
        _emit_csv(sys.stdout, meta, ["t", "q", "p", "J"], rows, [summary])
    return EXIT_OK


# ---------------------------------------------------------------- invert


@dataclass(frozen=True)
class InvertConfig:
    grid: int = 16
    sources: int = 64
    noise: float = 0.02
    safety: float = 1.0
    rho: float | None = None
    seed: int = 0
    background: float = 0.0
    bodies: tuple | None = None
    eps_c: float = 0.05
    delta_c: float = 0.3
    eps_u: float = 0.1
    delta_u: float = 0.3
    eps_t: float = 0.1
    delta_t: float = 0.1
    n0: int = 1
    growth: int = 2
    max_iterations: int = 40
    inner_cg_limit: int = 10
    max_backtracks: int = 12
    distribution: str = "rademacher"
    directory: str = "invert-out"


_SCHEMA = {
    "experiment": {
        "grid": int, "sources": int, "noise": float, "safety": float, "rho": float,
        "seed": int, "background": float, "bodies": "bodies",
    },
    "quantifiers": {k: float for k in ("eps_c", "delta_c", "eps_u", "delta_u", "eps_t", "delta_t")},
    "schedule": {
        "n0": int, "growth": int, "max_iterations": int, "inner_cg_limit": int,
        "max_backtracks": int, "distribution": "distribution",
    },
    "output": {"directory": str},
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^\s=:#;\[][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault((section, None), no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _parse_bodies(text: str) -> tuple:
    bodies = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        vals = [float(v) for v in chunk.split()]
        if len(vals) != 5:
            raise ValueError("each body needs 'x0 x1 y0 y1 value'")
        bodies.append(tuple(vals))
    if not bodies:
        raise ValueError("no bodies given")
    return tuple(bodies)


def parse_config(text: str, source: str = "<config>") -> InvertConfig:
    """Parse the INI-style inversion config; errors name the offending line."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: expected a [section] header") from exc
    except configparser.ParsingError as exc:
        no, line = exc.errors[0]
        raise ConfigError(f"{source}:{no}: cannot parse {line.strip()!r}") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate key {exc.option!r}") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from exc

    where = _key_lines(text)
    values = {}
    for section in cp.sections():
        sec = section.lower()
        if sec not in _SCHEMA:
            raise ConfigError(f"{source}:{where.get((sec, None), '?')}: unknown section [{section}]")
        for key, raw in cp.items(section):
            no = where.get((sec, key), "?")
            kind = _SCHEMA[sec].get(key)
            if kind is None:
                raise ConfigError(f"{source}:{no}: unknown key {key!r} in [{section}]")
            try:
                if kind == "bodies":
                    val = _parse_bodies(raw)
                elif kind == "distribution":
                    val = Distribution.parse(raw).value
                else:
                    val = kind(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{source}:{no}: bad value for {key!r}: {exc}") from exc
            values[key] = val
    try:
        cfg = InvertConfig(**values)
        _validate(cfg)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def _validate(cfg: InvertConfig) -> None:
    if cfg.grid < 3:
        raise ValueError("grid must be >= 3")
    if cfg.sources < 1:
        raise ValueError("sources must be >= 1")
    if cfg.noise < 0:
        raise ValueError("noise must be non-negative")
    if cfg.noise == 0 and cfg.rho is None:
        raise ValueError("noise-free data needs an explicit rho")
    if cfg.rho is not None and not cfg.rho > 0:
        raise ValueError("rho must be positive")
    if cfg.n0 < 1 or cfg.growth < 2 or cfg.max_iterations < 1 or cfg.inner_cg_limit < 1:
        raise ValueError("schedule values out of range")


def cmd_invert(args, parser) -> int:
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = parse_config(text, str(path))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = cfg.seed if args.seed is None else args.seed
    out_dir = Path(args.out_dir or cfg.directory)

    ex = make_experiment(cfg.grid, cfg.sources, cfg.noise, cfg.seed, cfg.bodies, cfg.background)
    rho = cfg.rho if cfg.rho is not None else DiscrepancyTarget(ex.data.sigma, ex.data.l, ex.data.s, cfg.safety).rho
    try:
        spec = ProbabilisticStopSpec(rho, cfg.eps_c, cfg.delta_c, cfg.eps_u, cfg.delta_u, cfg.eps_t, cfg.delta_t)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    schedule = Schedule(
        n0=cfg.n0,
        growth=cfg.growth,
        max_iterations=cfg.max_iterations,
        inner_cg_limit=cfg.inner_cg_limit,
        max_backtracks=cfg.max_backtracks,
        distribution=Distribution.parse(cfg.distribution),
        vanilla=args.vanilla,
    )
    result = invert(ex.grid, ex.data, ex.sources, spec, schedule, seed=seed)
    phi_exact = misfit(ForwardModel(ex.grid, result.m), ex.data, ex.sources)

    report = result.report()
    report.update(
        seed=seed,
        data_seed=cfg.seed,
        mode="vanilla" if args.vanilla else "stochastic",
        sigma=ex.data.sigma,
        safety=cfg.safety,
        exact_phi_final=phi_exact,
        config={k: v for k, v in vars(cfg).items()},
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "report.json").open("w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    comments = [f"seed={seed}", f"mode={report['mode']}", f"grid={cfg.grid}", "rows run top to bottom"]
    write_grid_csv(out_dir / "model.csv", result.m, cfg.grid, comments)
    write_grid_csv(out_dir / "true_model.csv", ex.m_true, cfg.grid, comments[:1] + comments[2:])
    print(f"solve_count={result.state.solve_count} vanilla_equivalent={result.vanilla_equivalent}")
    print(f"converged={result.converged} reason={result.reason!r} iterations={result.state.k}")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probstop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("trace", help="trace estimates, probe plans and calibration")
    t.add_argument("--family", choices=FIXTURE_FAMILIES, default="identity")
    t.add_argument("--s", type=int, default=100, help="matrix size")
    t.add_argument("--dist", choices=[d.value for d in Distribution], default="rademacher")
    t.add_argument("--n", type=int, help="number of probes (calibration default: the sufficient bound)")
    t.add_argument("--plan", action="store_true", help="print sample-size bounds for --eps/--delta")
    t.add_argument("--calibrate", action="store_true", help="empirical failure rate over --trials")
    t.add_argument("--eps", type=float, default=0.1)
    t.add_argument("--delta", type=float, default=0.05)
    t.add_argument("--trials", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="output CSV (default stdout)")
    t.set_defaults(func=cmd_trace)

    b = sub.add_parser("poisson-bench", help="iteration counts of MR/CG/SD/LSD on the model Poisson problem")
    b.add_argument("--sizes", help="comma-separated s values, each a perfect square (default 7^2..127^2)")
    b.add_argument("--rho", type=float, default=1e-7, help="relative residual tolerance")
    b.add_argument("--methods", default="MR,CG,SD,LSD")
    b.add_argument("--max-iter", type=int, default=1_000_000)
    b.add_argument("--history", metavar="PATH", help="also write per-iteration residuals and step sizes")
    b.add_argument("--seed", type=int, default=0, help="echoed only; the benchmark is deterministic")
    b.add_argument("--out", help="output CSV (default stdout)")
    b.set_defaults(func=cmd_poisson_bench)

    o = sub.add_parser("ode-adiabatic", help="adiabatic invariant drift of the slowly varying oscillator")
    o.add_argument("--lambda", dest="lam", type=float, default=1000.0)
    o.add_argument("--rtol", type=float, default=1e-3)
    o.add_argument("--atol", type=float, default=1e-6)
    o.add_argument("--max-steps", type=int, default=10_000_000, help="step budget (accepted plus rejected)")
    o.add_argument("--seed", type=int, default=0, help="echoed only; the integration is deterministic")
    o.add_argument("--out", help="output CSV of (t, q, p, J); default stdout")
    o.set_defaults(func=cmd_ode_adiabatic)

    i = sub.add_parser("invert", help="stochastic Gauss-Newton inversion of a twin experiment")
    i.add_argument("config", help="INI config file (see README)")
    i.add_argument("--vanilla", action="store_true", help="use all sources in every phase")
    i.add_argument("--seed", type=int, help="master probe seed (default: the config's seed)")
    i.add_argument("--out-dir", help="override [output] directory")
    i.set_defaults(func=cmd_invert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub_parser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args, sub_parser)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
