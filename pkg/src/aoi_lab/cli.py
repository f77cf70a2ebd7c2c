"""Command-line front end: ``aoi-lab {analytic,chain,simulate,compare}``.

Tables are written as CSV (header row, 17 significant digits, LF endings)
or as a JSON object holding the same rows plus the full PMFs.  Exit codes:
0 success, 1 comparison outside tolerance, 2 invalid input, 3 unstable or
numerically degenerate parameters.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import analytic, chain, sim
from .core import (
    AoiError, InvalidParameters, ModelSpec, NearSingular, Pmf, PreemptionPolicy,
    ServiceDistribution, SystemParams, Unstable, default_n_p, pmf_total_variation,
)

MODELS = ("ber-geo-1-1", "ber-geo-1-1-preempt", "ber-g-1-1",
          "ber-geo-1-2", "ber-geo-1-2star", "ber-geo-1-c")

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DEGENERATE = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Request parsing
# ---------------------------------------------------------------------------

def read_service_file(path: str) -> ServiceDistribution:
    """Parse one ``j,q_j`` pair per line (blank lines and ``#`` comments skipped)."""
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                j_text, q_text = line.split(",")
                j, q = int(j_text), float(q_text)
            except ValueError:
                raise InvalidParameters(f"{path}:{lineno}: expected 'j,q_j', got {raw.strip()!r}")
            if j < 1 or j in pairs:
                raise InvalidParameters(f"{path}:{lineno}: bad or repeated index {j}")
            pairs[j] = q
    if not pairs:
        raise InvalidParameters(f"{path}: no service probabilities")
    q = [pairs.get(j, 0.0) for j in range(1, max(pairs) + 1)]
    return ServiceDistribution.general(q)


def build_model(args) -> ModelSpec:
    params = SystemParams(args.p, args.gamma)
    name = args.model
    if name == "ber-geo-1-1":
        return ModelSpec.ber_geo11(params)
    if name == "ber-geo-1-1-preempt":
        return ModelSpec.ber_geo11_preemptive(params, args.np)
    if name == "ber-g-1-1":
        service = (read_service_file(args.service_file) if args.service_file
                   else ServiceDistribution.geometric(params.gamma))
        policy = PreemptionPolicy.none()
        if args.preempt == "increasing":
            policy = PreemptionPolicy.increasing(default_n_p(params.p) if args.np is None else args.np)
        return ModelSpec.ber_g11(params, service, policy)
    if name == "ber-geo-1-2":
        return ModelSpec.ber_geo12(params)
    if name == "ber-geo-1-2star":
        return ModelSpec.ber_geo12star(params)
    if name == "ber-geo-1-c":
        if args.c is None:
            raise InvalidParameters("ber-geo-1-c needs --c")
        return ModelSpec.ber_geo1c(params, args.c)
    raise InvalidParameters(f"unknown model {name!r}")


def thread_cap() -> int:
    raw = os.environ.get("AOI_LAB_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 3
    except ValueError:
        raise InvalidParameters(f"AOI_LAB_THREADS must be an integer, got {raw!r}")


def chain_defaults(model: ModelSpec, N: Optional[int], inner_tol: Optional[float]):
    """Larger buffers get a shorter horizon and a looser inner-age cap by default."""
    big = model.size >= 3
    return (N if N is not None else (150 if big else 600),
            inner_tol if inner_tol is not None else (1e-10 if big else chain.DEFAULT_INNER_TOL))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def write_table(out, columns, rows, fmt: str, extra: Optional[dict] = None):
    if fmt == "json":
        doc = {"columns": list(columns),
               "rows": [[_json_value(v) for v in r] for r in rows]}
        if extra:
            doc.update(extra)
        out.write(json.dumps(doc, indent=1, allow_nan=False, default=_json_value))
        out.write("\n")
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])


def _json_value(v):
    if isinstance(v, Pmf):
        return v.to_dict()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _pmf_rows(aoi: Pmf, t: Optional[Pmf], w: Optional[Pmf], n_max: int):
    """Rows n, pmf, cdf (+ t_pmf, w_pmf) with the shared index n."""
    cdf = np.cumsum([aoi[n] for n in range(1, n_max + 1)])
    if t is None:
        return ["n", "pmf", "cdf"], [[n, aoi[n], cdf[n - 1]] for n in range(1, n_max + 1)]
    rows = [[0, 0.0, 0.0, t[0], w[0]]]
    rows += [[n, aoi[n], cdf[n - 1], t[n], w[n]] for n in range(1, n_max + 1)]
    return ["n", "pmf", "cdf", "t_pmf", "w_pmf"], rows


def _open_output(path: Optional[str]):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline="\n"), True


def _emit(args, columns, rows, extra=None):
    out, close = _open_output(args.output)
    try:
        write_table(out, columns, rows, args.format, extra)
    finally:
        if close:
            out.close()


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

FIGURE_COLUMNS = ["series", "p", "gamma", "x", "quantity", "value"]


def figure_rows(number: int, n_max: int = 60, k_max: int = 100) -> list:
    """Long-format data for each ``--figure`` plot."""
    rows = []

    def pmf_series(label, model):
        pmf = analytic.aoi_pmf(model, n_max)
        cdf = pmf.cdf()
        p, g = model.params.p, model.params.gamma
        for n in range(1, n_max + 1):
            rows.append([label, p, g, n, "pmf", pmf[n]])
            rows.append([label, p, g, n, "cdf", cdf[n - 1]])

    def exponent_series(label, model, with_bound):
        p, g = model.params.p, model.params.gamma
        for k in range(1, k_max + 1):
            rep = analytic.violation_report(model, None, k)
            rows.append([label, p, g, k, "exponent", rep.exponent])
            if with_bound and rep.lower_bound is not None:
                rows.append([label, p, g, k, "lower_bound", rep.lower_bound])

    base = SystemParams(0.2, 1 / 3)
    if number == 2:
        exponent_series("ber-geo-1-1", ModelSpec.ber_geo11(SystemParams(0.18, 0.3)), True)
    elif number == 3:
        pmf_series("ber-geo-1-1", ModelSpec.ber_geo11(base))
        pmf_series("ber-geo-1-1-preempt", ModelSpec.ber_geo11_preemptive(base, 4))
    elif number == 4:
        pmf_series("ber-geo-1-1", ModelSpec.ber_geo11(base))
        pmf_series("ber-geo-1-2", ModelSpec.ber_geo12(base))
        pmf_series("ber-geo-1-2star", ModelSpec.ber_geo12star(base))
    elif number == 5:
        for rho in (0.05, 0.2, 0.4, 0.6, 0.8, 0.99):
            params = SystemParams(rho * 0.6, 0.6)
            pmf_series(f"ber-geo-1-1@rho={rho}", ModelSpec.ber_geo11(params))
            pmf_series(f"ber-geo-1-2@rho={rho}", ModelSpec.ber_geo12(params))
            pmf_series(f"ber-geo-1-2star@rho={rho}", ModelSpec.ber_geo12star(params))
    elif number == 6:
        params = SystemParams(0.48, 0.6)
        for label, model in (("ber-geo-1-2", ModelSpec.ber_geo12(params)),
                             ("ber-geo-1-2star", ModelSpec.ber_geo12star(params))):
            t = analytic.conditional_positive(analytic.system_time_pmf(model, n_max))
            w = analytic.conditional_positive(analytic.waiting_time_pmf(model, n_max))
            for m in range(1, n_max + 1):
                rows.append([label, 0.48, 0.6, m, "system_time", t[m]])
                rows.append([label, 0.48, 0.6, m, "waiting_time", w[m]])
    elif number == 7:
        exponent_series("ber-geo-1-1", ModelSpec.ber_geo11(base), False)
        exponent_series("ber-geo-1-2", ModelSpec.ber_geo12(base), False)
        exponent_series("ber-geo-1-2star", ModelSpec.ber_geo12star(base), False)
    else:
        raise InvalidParameters("figures 2 to 7 are available")
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_analytic(args) -> int:
    if args.figure is not None:
        _emit(args, FIGURE_COLUMNS, figure_rows(args.figure, args.n_max or 60))
        return EXIT_OK
    model = build_model(args)
    if not analytic.has_closed_form(model):
        raise InvalidParameters(f"{model.describe()} has no closed form; use 'chain'")
    n_max = args.n_max or analytic.DEFAULT_N_MAX
    if args.violation is not None:
        reps = [analytic.violation_report(model, None, k) for k in range(1, args.violation + 1)]
        rows = [[r.k, r.p_violation, r.exponent, r.lower_bound] for r in reps]
        _emit(args, ["k", "p_violation", "exponent", "lower_bound"], rows,
              {"model": model.describe()})
        return EXIT_OK
    aoi = analytic.aoi_pmf(model, n_max)
    t = analytic.system_time_pmf(model, n_max)
    w = analytic.waiting_time_pmf(model, n_max)
    columns, rows = _pmf_rows(aoi, t, w, n_max)
    pmfs = {"aoi": aoi.to_dict()}
    if t is not None:
        pmfs.update(system_time=t.to_dict(), waiting_time=w.to_dict())
    _emit(args, columns, rows, {"model": model.describe(), "pmfs": pmfs})
    return EXIT_OK


def _solve(model: ModelSpec, args):
    N, tol = chain_defaults(model, args.N, args.inner_tol)
    kernel = chain.build_kernel(model, N, inner_tol=tol)
    table = chain.solve_stationary(kernel)
    return kernel, table


def cmd_chain(args) -> int:
    model = build_model(args)
    kernel, table = _solve(model, args)
    if args.dump_kernel:
        with open(args.dump_kernel, "w", encoding="utf-8", newline="\n") as fh:
            kernel.dump(fh)
    aoi = chain.aoi_marginal(table, model)
    t = w = None
    if model.size >= 2:
        t, w = chain.marginal(table, 1), chain.marginal(table, 2)
    n_max = min(args.n_max or kernel.N, kernel.N)
    columns, rows = _pmf_rows(aoi, t, w, n_max)
    meta = {"model": model.describe(), "states": kernel.size, "N": kernel.N,
            "inner_cap": kernel.inner_cap, "residual": table.residual,
            "iterations": table.iterations, "converged": table.converged,
            "pmfs": {"aoi": aoi.to_dict()}}
    _emit(args, columns, rows, meta)
    if not table.converged:
        print(f"warning: stationary solve did not converge (residual {table.residual:.3g})",
              file=sys.stderr)
    return EXIT_OK


def _simulate(model: ModelSpec, args) -> sim.SimStats:
    return sim.run(sim.SimConfig(model, args.slots, args.warmup, args.seed, args.mode))


def cmd_simulate(args) -> int:
    model = build_model(args)
    stats = _simulate(model, args)
    aoi = stats.aoi_pmf
    t = w = None
    if model.size >= 2:
        t, w = stats.system_time_pmf, stats.waiting_time_pmf
    n_max = args.n_max or aoi.last
    columns, rows = _pmf_rows(aoi, t, w, n_max)
    meta = {"model": model.describe(), "slots": stats.slots, "mean_aoi": stats.mean_aoi,
            "generated": stats.generated_packets, "delivered": stats.delivered_packets,
            "discarded": stats.discarded_packets, "replaced": stats.replaced_packets,
            "in_flight": stats.in_flight, "pmfs": {"aoi": aoi.to_dict()}}
    _emit(args, columns, rows, meta)
    return EXIT_OK


def cmd_compare(args) -> int:
    model = build_model(args)
    has_analytic = analytic.has_closed_form(model)
    N, _ = chain_defaults(model, args.N, args.inner_tol)
    with ThreadPoolExecutor(max_workers=min(3, thread_cap())) as pool:
        f_chain = pool.submit(_solve, model, args)
        f_sim = pool.submit(_simulate, model, args)
        f_an = pool.submit(analytic.aoi_pmf, model, N) if has_analytic else None
        table = f_chain.result()[1]
        stats = f_sim.result()
        an = f_an.result() if f_an else None
    ch = chain.aoi_marginal(table, model)
    em = stats.aoi_pmf
    ref = an if an is not None else ch
    checks = []
    if an is not None:
        checks.append(("analytic-chain", pmf_total_variation(an, ch), args.tol_chain))
    else:
        checks.append(("chain-sim", pmf_total_variation(ch, em), args.tol_sim))
    if an is not None:
        checks.append(("analytic-sim", pmf_total_variation(ref, em), args.tol_sim))
    n_max = args.n_max or min(N, 200)
    columns = ["n"] + (["analytic"] if an is not None else []) + ["chain", "sim"]
    rows = []
    for n in range(1, n_max + 1):
        row = [n] + ([an[n]] if an is not None else []) + [ch[n], em[n]]
        rows.append(row)
    summary = [{"check": name, "tv": tv, "tolerance": tol, "pass": tv <= tol}
               for name, tv, tol in checks]
    _emit(args, columns, rows, {"model": model.describe(), "summary": summary})
    ok = True
    for item in summary:
        status = "PASS" if item["pass"] else "FAIL"
        ok &= item["pass"]
        print(f"{status} {item['check']} tv={item['tv']:.3e} tol={item['tolerance']:.1e}",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(float(text))
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoi-lab",
                                     description="Discrete-time age-of-information toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, model_required=True):
        sp.add_argument("--model", choices=MODELS, required=model_required)
        sp.add_argument("--p", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--np", type=int, help="N_p of the increasing preemption family")
        sp.add_argument("--c", type=int, help="system size for ber-geo-1-c")
        sp.add_argument("--service-file", help="general service PMF, one 'j,q_j' per line")
        sp.add_argument("--preempt", choices=("none", "increasing"), default="none",
                        help="preemption policy for ber-g-1-1")
        sp.add_argument("--n-max", type=_positive_int)
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--output", "-o", help="output path (default stdout)")

    def chain_opts(sp):
        sp.add_argument("--N", type=_positive_int, help="AoI truncation level")
        sp.add_argument("--inner-tol", type=float,
                        help="mass allowed past the in-service age cap")

    def sim_opts(sp):
        sp.add_argument("--slots", type=_positive_int, default=1_000_000)
        sp.add_argument("--warmup", type=int, default=sim.DEFAULT_WARMUP)
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--mode", choices=(sim.PHYSICAL, sim.KERNEL_SAMPLING),
                        default=sim.PHYSICAL)

    a = sub.add_parser("analytic", help="closed-form AoI, system and waiting time PMFs")
    common(a, model_required=False)
    a.add_argument("--violation", type=_positive_int, metavar="K",
                   help="violation probabilities and exponents for k = 1..K")
    a.add_argument("--figure", type=int, choices=range(2, 8), metavar="N",
                   help="data table behind figure N (2-7)")
    a.set_defaults(func=cmd_analytic)

    c = sub.add_parser("chain", help="solve the truncated age-state Markov chain")
    common(c)
    chain_opts(c)
    c.add_argument("--dump-kernel", metavar="PATH", help="write the transition list")
    c.set_defaults(func=cmd_chain)

    s = sub.add_parser("simulate", help="slot-level Monte-Carlo simulation")
    common(s)
    sim_opts(s)
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("compare", help="cross-check analytic, chain and simulation")
    common(k)
    chain_opts(k)
    sim_opts(k)
    k.set_defaults(slots=5_000_000)
    k.add_argument("--tol-chain", type=float, default=1e-5)
    k.add_argument("--tol-sim", type=float, default=1e-2)
    k.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command != "analytic" or args.figure is None:
        if args.model is None or args.p is None or args.gamma is None:
            print("error: --model, --p and --gamma are required", file=sys.stderr)
            return EXIT_INVALID
    try:
        return args.func(args)
    except (Unstable, NearSingular) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except InvalidParameters as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BrokenPipeError:
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AoiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
