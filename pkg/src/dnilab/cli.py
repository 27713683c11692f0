"""Command line experiment runner.

Every command reads an optional TOML config (``--config``); each config key
can also be given as a flag of the same name, and flags win.  Results go to
CSV (or JSON for ``checks``) plus a ``.summary.json`` next to it.

Exit codes: 0 success, 1 usage error, 2 invariant violation, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import __version__
from .config import SECTIONS, ConfigError, SweepConfig, load_config, parse_direction
from .measurement import BlochDirection, observable_from_bloch
from .models import (
    OUMonteCarloEngine, OUNoiseParams, analytic_d, coherence, make_engine, system_propagator,
)
from .protocol import (
    OUTCOMES, DNIBasisError, Scheme, default_test_states, discord_condition_norm,
    dissipative_decay, dni_scheme, factorization_distance_for, lgi_decay, lgi_from_engine,
    lgi_threshold, markov_propagator_condition, max_lgi_equal_times, p2, p3, invasiveness,
    marginal_zx, superclassicality_deviation,
)
from .qmath import choi_min_eigenvalue

log = logging.getLogger("dnilab")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3


class InvariantViolation(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(x) -> str:
    """Shortest round-trip decimal text."""
    return repr(float(x))


# ----------------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------------

def _header(command: str, cfg: SweepConfig) -> str:
    echo = json.dumps(cfg.stable_dict(), sort_keys=True, separators=(",", ":"))
    return f"# dnilab {command} config_sha256={cfg.digest()}\n# config {echo}\n"


def render_csv(command: str, cfg: SweepConfig, columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(_header(command, cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def render_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_text(path: str, text: str) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def summary_path(out: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + ".summary.json"


def _pmap(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# Shared pieces
# ----------------------------------------------------------------------------

def build_engine(cfg: SweepConfig):
    try:
        return make_engine(cfg.kind, **cfg.engine_kwargs())
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"model section incomplete for kind={cfg.kind!r}: {exc}") from exc


def build_scheme(engine, cfg: SweepConfig, t: float, tau: float) -> Scheme:
    ox = observable_from_bloch(parse_direction(cfg.x))
    oz = observable_from_bloch(parse_direction(cfg.z))
    if cfg.y == "dni":
        return dni_scheme(engine, t, tau, ox, oz)
    return Scheme(t, tau, ox, observable_from_bloch(parse_direction(cfg.y)), oz)


def _check_tables(dist3, dist2_yx, what: str):
    if abs(dist3.table.sum() - 1) > 1e-10:
        raise InvariantViolation(f"{what}: P3 sums to {dist3.table.sum()!r}")
    gap = float(np.max(np.abs(dist3.table.sum(axis=0) - dist2_yx.table)))
    if gap > 1e-10:
        raise InvariantViolation(f"{what}: P2(y,x) differs from sum_z P3 by {gap:.3g}")


def _x_axis_scheme(cfg: SweepConfig) -> bool:
    axes = [parse_direction(cfg.x), parse_direction(cfg.z)]
    if cfg.y != "dni":
        axes.append(parse_direction(cfg.y))
    x_hat = BlochDirection(math.pi / 2, 0.0)
    return all(a.axis_angle(x_hat) < 1e-12 for a in axes)


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def run_coherence(cfg: SweepConfig) -> tuple[str, dict]:
    engine = build_engine(cfg)
    times = cfg.t_grid()
    exact = np.asarray(analytic_d(engine.params, times), dtype=float)
    if isinstance(engine, OUMonteCarloEngine):
        series = coherence(engine, times)
        numeric, stderr = series.d, series.stderr
    else:
        numeric = np.array(_pmap(lambda t: coherence(engine, [t]).d[0], times, cfg.threads))
        stderr = np.zeros_like(numeric)
    diff = np.abs(numeric - exact)
    rows = [[t, a, b, c] for t, a, b, c in zip(times, exact, numeric, diff)]
    text = render_csv("coherence", cfg, ["t", "d_analytic", "d_numeric", "abs_diff"], rows)
    worst = int(np.argmax(diff))
    summary = {"max_abs_diff": float(diff[worst]), "at_t": float(times[worst]),
               "tolerance": cfg.tol if not engine.stochastic or not np.any(stderr) else "4 standard errors"}
    if engine.stochastic and np.any(stderr):
        bad = diff > 4 * stderr + 1e-12
        summary["max_diff_in_stderr"] = float(np.max(diff / np.maximum(stderr, 1e-300)))
    else:
        bad = diff > cfg.tol
    if np.any(bad):
        raise InvariantViolation(f"coherence mismatch at t={times[bad][0]!r}", text, summary)
    return text, summary


def _invasiveness_point(engine, cfg, t, tau):
    scheme = build_scheme(engine, cfg, t, tau)
    dist3 = p3(engine, scheme)
    _check_tables(dist3, p2(engine, scheme, "yx"), f"t={t}, tau={tau}")
    value = invasiveness(marginal_zx(dist3), p2(engine, scheme, "zx"))
    if not -1e-12 <= value <= 2 + 1e-12:
        raise InvariantViolation(f"invasiveness {value} outside [0, 2]")
    d = scheme.obs_y.direction
    return [t, tau, d.theta, d.phi, value], dist3


def run_invasiveness(cfg: SweepConfig) -> tuple[str, dict]:
    engine = build_engine(cfg)
    pairs = cfg.time_pairs()
    results = _pmap(lambda p: _invasiveness_point(engine, cfg, *p)[0], pairs, cfg.threads)
    text = render_csv("invasiveness", cfg, ["t", "tau", "theta", "phi", "I"], results)
    values = [r[4] for r in results]
    worst = int(np.argmax(values))
    return text, {"max_I": values[worst], "at": {"t": results[worst][0], "tau": results[worst][1]},
                  "table_tolerance": 1e-10}


def run_p3_dump(cfg: SweepConfig) -> tuple[str, dict]:
    engine = build_engine(cfg)
    pairs = cfg.time_pairs()

    def point(p):
        row, dist3 = _invasiveness_point(engine, cfg, *p)
        return row[:4] + [dist3.table[iz, iy, ix] for iz, iy, ix in np.ndindex(2, 2, 2)]

    labels = ["p_" + "".join("+" if OUTCOMES[i] > 0 else "-" for i in idx) for idx in np.ndindex(2, 2, 2)]
    rows = _pmap(point, pairs, cfg.threads)
    return render_csv("p3-dump", cfg, ["t", "tau", "theta", "phi"] + labels, rows), {"points": len(rows)}


def _threshold_curve(cfg: SweepConfig, n_bar: int | None):
    if cfg.param == "chi":
        gamma = cfg.gamma if cfg.gamma else 1.0
        return lambda r: max_lgi_equal_times(dissipative_decay(r, n_bar, gamma), 4.0 / gamma)[0]
    gamma = cfg.gamma if cfg.gamma else 1.0
    return lambda tc: max_lgi_equal_times(lambda t: analytic_d(OUNoiseParams(gamma, tc), t),
                                          max(cfg.stop, 4.0 / gamma))[0]


def run_lgi(cfg: SweepConfig) -> tuple[str, dict]:
    engine = build_engine(cfg)
    pairs = cfg.time_pairs()
    check_decay = _x_axis_scheme(cfg) and not engine.stochastic

    def point(p):
        t, tau = p
        k = lgi_from_engine(engine, build_scheme(engine, cfg, t, tau)).K
        if check_decay:
            ref = lgi_decay(engine.params, t, tau)
            if abs(k - ref) > cfg.tol:
                raise InvariantViolation(f"K={k!r} differs from the decay formula {ref!r} at t={t}")
        return k

    ks = _pmap(point, pairs, cfg.threads)
    equal = cfg.tau_grid() is None
    rows = [[t, k] if equal else [t, tau, k] for (t, tau), k in zip(pairs, ks)]
    text = render_csv("lgi", cfg, ["t", "K"] if equal else ["t", "tau", "K"], rows)
    worst = int(np.argmax(ks))
    summary: dict = {"max_K": ks[worst], "at": {"t": pairs[worst][0], "tau": pairs[worst][1]},
                     "violated": bool(ks[worst] > 1 + 1e-12 or min(ks) < -3 - 1e-12)}
    if cfg.param:
        scans = []
        for nb in (cfg.n_bars() if cfg.param == "chi" else [None]):
            th = lgi_threshold(_threshold_curve(cfg, nb), cfg.lo, cfg.hi)
            entry = {"param": cfg.param, "lo": cfg.lo, "hi": cfg.hi, "threshold": th.value}
            if nb is not None:
                entry["n_bar"] = nb
            if cfg.reference is not None:
                entry["reference"] = cfg.reference
                entry["within_0.02_of_reference"] = th.value is not None and abs(th.value - cfg.reference) <= 0.02
            scans.append(entry)
        summary["threshold_scan"] = scans
    return text, summary


def run_checks(cfg: SweepConfig) -> tuple[str, dict]:
    engine = build_engine(cfg)
    pairs = cfg.time_pairs()
    states = default_test_states()

    def point(p):
        t, tau = p
        scheme = build_scheme(engine, cfg, t, tau)
        out = {
            "factorization_distance": float(factorization_distance_for(engine, scheme)),
            "propagator_condition": markov_propagator_condition(engine, t, tau),
            "superclassicality_deviation": superclassicality_deviation(engine, t, tau, states),
        }
        if engine.bipartite:
            out["discord_condition_norm"] = max(discord_condition_norm(engine, rho, t) for rho in states)
        cp, tp = 0.0, 0.0
        for s in (t, t + tau):
            lam = system_propagator(engine, s)
            cp = max(cp, -choi_min_eigenvalue(lam))
            row = np.array([1, 0, 0, 1]) @ lam.matrix
            tp = max(tp, float(np.max(np.abs(row - np.array([1, 0, 0, 1])))))
        out["complete_positivity"] = max(cp, 0.0)
        out["trace_preservation"] = tp
        return out

    results = _pmap(point, pairs, cfg.threads)
    checks = []
    for name in results[0]:
        worst = max(r[name] for r in results)
        checks.append({"name": name, "max_deviation": worst, "pass": bool(worst <= cfg.tol), "tolerance": cfg.tol})
    if not engine.bipartite:
        checks.append({"name": "discord_condition_norm", "max_deviation": None, "pass": None,
                       "tolerance": cfg.tol, "skipped": f"{engine.kind} has no environment operator"})
    channel = {c["name"]: c for c in checks}
    if not channel["complete_positivity"]["pass"] or not channel["trace_preservation"]["pass"]:
        raise InvariantViolation("reduced dynamics is not a CPTP map", render_json({"checks": checks}), {})
    return render_json({"checks": checks, "config_sha256": cfg.digest()}), {"points": len(pairs)}


COMMANDS = {
    "coherence": (run_coherence, ".csv"),
    "invasiveness": (run_invasiveness, ".csv"),
    "lgi": (run_lgi, ".csv"),
    "p3-dump": (run_p3_dump, ".csv"),
    "checks": (run_checks, ".json"),
}


# ----------------------------------------------------------------------------
# SVG helper
# ----------------------------------------------------------------------------

def read_csv_columns(path: str) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader])
    return {name: data[:, i] for i, name in enumerate(header)}


def svg_lines(x: np.ndarray, ys: dict[str, np.ndarray], width: int = 640, height: int = 400) -> str:
    """Bare line plot; one polyline per series."""
    pad = 40
    allys = np.concatenate(list(ys.values()))
    x0, x1 = float(np.min(x)), float(np.max(x))
    y0, y1 = float(np.min(allys)), float(np.max(allys))
    sx = (width - 2 * pad) / ((x1 - x0) or 1.0)
    sy = (height - 2 * pad) / ((y1 - y0) or 1.0)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="black"/>',
             f'<text x="{pad}" y="{height - 10}" font-size="12">{x0:.3g}</text>',
             f'<text x="{width - pad}" y="{height - 10}" font-size="12" text-anchor="end">{x1:.3g}</text>',
             f'<text x="5" y="{height - pad}" font-size="12">{y0:.3g}</text>',
             f'<text x="5" y="{pad + 10}" font-size="12">{y1:.3g}</text>']
    for i, (name, y) in enumerate(ys.items()):
        pts = " ".join(f"{pad + (a - x0) * sx:.2f},{height - pad - (b - y0) * sy:.2f}" for a, b in zip(x, y))
        colour = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 5}" y="{pad + 15 * (i + 1)}" font-size="12" '
                     f'text-anchor="end" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    cols = read_csv_columns(args.csv)
    missing = [c for c in [args.x] + args.y if c not in cols]
    if missing:
        raise ConfigError(f"columns not in {args.csv}: {missing}")
    out = args.out or os.path.splitext(args.csv)[0] + ".svg"
    write_text(out, svg_lines(cols[args.x], {c: cols[c] for c in args.y}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="TOML config file")
    kinds = {f.name: f.type for f in fields(SweepConfig)}
    for key in SECTIONS:
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, default=None, metavar=key.upper(),
                       help=f"override {SECTIONS[key]}.{key} ({kinds[key]})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dnilab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dnilab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        _add_config_flags(sub.add_parser(name, help=f"run the {name} experiment"))
    plot = sub.add_parser("plot", help="line-plot SVG from a result CSV")
    plot.add_argument("csv")
    plot.add_argument("--x", default="t")
    plot.add_argument("--y", nargs="+", default=["I"])
    plot.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "plot":
            return cmd_plot(args)
        overrides = {k: getattr(args, k) for k in SECTIONS}
        cfg = load_config(args.config, overrides)
        runner, suffix = COMMANDS[args.command]
        out = cfg.output_path(args.command, suffix)
        start = time.perf_counter()
        status = EXIT_OK
        try:
            text, summary = runner(cfg)
        except InvariantViolation as exc:
            log.error("invariant violated: %s", exc.args[0])
            text = exc.args[1] if len(exc.args) > 1 else None
            summary = dict(exc.args[2]) if len(exc.args) > 2 else {}
            summary["invariant_violation"] = exc.args[0]
            status = EXIT_INVARIANT
        except DNIBasisError as exc:
            log.error("%s", exc)
            return EXIT_INVARIANT
        summary = {"command": args.command, "config": cfg.stable_dict(),
                   "config_sha256": cfg.digest(), "results": summary}
        if text is not None:
            write_text(out, text)
        write_text(summary_path(out), render_json(summary))
        print(f"dnilab {args.command}: {time.perf_counter() - start:.2f} s wall-clock, wrote {out}", file=sys.stderr)
        return status
    except ConfigError as exc:
        print(f"dnilab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"dnilab: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dnilab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
