"""Command-line entry point: ``mfdb {solve,simulate,sweep,compare,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass

import numpy as np

from . import io as mio
from .model import (
    SCENARIO_NAMES,
    ConfigError,
    SystemParams,
    beta_closed_form,
    beta_integral_oracle,
    beta_printed_formula,
    scenario_preset,
    terminal_penalty,
)
from .sim import SessionMetrics, Strategy, StrategyKind, average_delay_sweep, simulate
from .solver import (
    build_grid,
    hjb_backward,
    initial_density,
    optimal_policy_argmin,
    optimal_policy_closed_form,
    solve_mfdb,
)

__all__ = ["main", "dispatch", "render_summary", "run_checks", "CheckResult"]

log = logging.getLogger("mfdb")

STRATEGIES = tuple(k.value for k in StrategyKind)


# ------------------------------------------------------------------ helpers


def _load(args):
    if args.config:
        params, scenario, run = mio.load_config(args.config)
    else:
        params, scenario, run = mio.parse_config({})
    if getattr(args, "scenario", None):
        scenario = scenario_preset(args.scenario)
    if getattr(args, "seeds", None) is not None:
        run.seeds = args.seeds
    if getattr(args, "n_values", None):
        run.n_values = args.n_values
    if getattr(args, "strategy", None):
        run.strategy = args.strategy
    return params, scenario, run


def _provenance(args, params, scenario, run, extra=()) -> list[str]:
    lines = [
        f"command: {args.command}",
        f"config: {args.config or '(defaults)'}",
        f"fingerprint: {mio.fingerprint(params, scenario)}",
        f"scenario: {scenario.name}",
        f"seeds: {run.seeds}",
        f"initial_energy: {run.initial_energy if run.initial_energy is not None else 'default'}",
    ]
    return lines + list(extra)


def _strategy(name, args, scenario, params):
    if name != "mfdb":
        return Strategy(name)
    if not args.policy:
        raise ConfigError("the mfdb strategy needs --policy")
    sol, _ = mio.load_policy(args.policy)
    if sol.params.to_dict() != params.replace(device_count=sol.params.device_count).to_dict():
        log.warning("policy was solved with different parameters than the config")
    return Strategy("mfdb", sol)


def _sessions(strategy, scenario, params, run) -> SessionMetrics:
    runs = [simulate(strategy, scenario, params, seed, run.session_energy) for seed in range(run.seeds)]
    return SessionMetrics.pooled(runs)


SESSION_COLUMNS = ["frame", "strategy", "mean_delay_s", "cdc_s2", "mean_energy", "drop_rate"]
SWEEP_COLUMNS = ["n_devices", "strategy", "mean_delay_s", "stderr_s"]


# ------------------------------------------------------------------ summary


def render_summary(tables) -> str:
    """Aligned per-strategy table of mean delay, CDC at the horizon and exhaustion.

    ``tables`` maps strategy names to ``SessionMetrics``.  Saturated CDCs
    print as ``INF``.
    """
    if not tables:
        return "no data"
    head = ("strategy", "mean_delay_ms", "cdc_T_ms2", "exhaustion_frame")
    rows = []
    for name in sorted(tables):
        m = tables[name]
        cdc = "INF" if m.saturated[-1] else f"{m.cdc[-1] * 1e6:.3f}"
        ex = m.exhaustion_frame
        rows.append((name, f"{m.delay.mean() * 1e3:.4f}", cdc, "none" if ex is None else str(ex)))
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join([fmt.format(*head)] + [fmt.format(*r) for r in rows])


# ------------------------------------------------------------------- checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_beta(n: int = 100) -> list[CheckResult]:
    """Closed-form interference factor against quadrature on a parameter lattice."""
    rhos = np.linspace(0.5, 10.0, 4)
    exps = np.linspace(2.1, 5.0, 5)
    radii = np.geomspace(0.3, 50.0, 5)
    lattice = [(r, a, m) for r in rhos for a in exps for m in radii][:n]
    worst = max(
        abs(beta_closed_form(*p) - beta_integral_oracle(*p)) / beta_integral_oracle(*p) for p in lattice
    )
    out = [CheckResult("beta closed form vs quadrature", worst <= 1e-6,
                       f"max relative deviation {worst:.2e} over {len(lattice)} points")]
    dev = max(
        abs(beta_printed_formula(*p) - beta_integral_oracle(*p)) / beta_integral_oracle(*p)
        for p in lattice if p[2] > 1
    )
    out.append(CheckResult("printed closed form (informational)", True,
                           f"max relative deviation {dev:.2e} for r_m > 1"))
    return out


def check_degenerate(params: SystemParams, margin: float = 0.3) -> CheckResult:
    """Zero interference, static channel, ample energy: the value grows by one
    slot's cost per remaining frame on top of the terminal penalty.

    A cell counts as ample when paying every remaining frame still leaves
    ``margin`` of energy, which keeps it clear of the penalty and of the
    numerical smearing around it.
    """
    p = params.replace(interference_factor=0.0)
    sc = scenario_preset("cc")
    grid = build_grid(p, sc)
    value, _, _ = hjb_backward(np.zeros((p.frames, len(grid.delays))), sc, grid, p)
    F = terminal_penalty(grid.energy, p.penalty_scale, p.penalty_steepness)[:, None]
    cost = p.target_sinr * p.noise_power / grid.gain * p.slot_duration / p.energy_ref
    worst, cells = 0.0, 0
    for i in range(p.frames):
        ample = grid.energy[:, None] - (p.frames - i) * cost[None, :] >= margin
        expect = (p.frames - i) * p.slot_duration**2
        err = np.abs(value[i] - F - expect)[ample] / expect
        cells += int(ample.sum())
        worst = max(worst, float(err.max()))
    return CheckResult("degenerate analytic value", worst <= 0.02,
                       f"max relative error {worst:.2e} over {cells} ample cells")


def check_solution(sol) -> list[CheckResult]:
    g, p = sol.grid, sol.params
    mass = sol.mean_field.sum(axis=(1, 2)) * g.cell_area
    drift = float(np.max(np.abs(mass - mass[0])))
    cf = optimal_policy_closed_form(sol.value, sol.field, sol.policy, g, p)
    inner = (slice(None), slice(1, -1), slice(1, -1))
    share = float(np.mean(np.abs(cf - sol.policy)[inner] <= p.slot_duration))
    # spot check the stored policy against a brute-force argmin
    i, j, k = p.frames // 2, len(g.energy) // 2, int(g.gain_index(sol.scenario.initial_gain))
    brute = optimal_policy_argmin(sol.value[i], sol.field.interference, g, p, i, (j, k))
    return [
        CheckResult("fixed point converged", sol.report.converged, sol.report.summary()),
        CheckResult("mass conservation", drift <= 1e-3, f"max drift {drift:.2e}"),
        CheckResult("closed form vs argmin", share >= 0.95, f"{share:.1%} of interior cells within one slot"),
        CheckResult("brute-force argmin spot check", abs(brute - sol.policy[i, j, k]) <= p.slot_duration,
                    f"{brute * 1e3:.3f} ms vs {sol.policy[i, j, k] * 1e3:.3f} ms"),
    ]


def run_checks(params: SystemParams | None = None, solve: bool = True) -> list[CheckResult]:
    params = SystemParams() if params is None else params
    out = check_beta()
    out.append(check_degenerate(params))
    if solve:
        sol, _ = solve_mfdb(params, scenario_preset("cc"))
        out += check_solution(sol)
    return out


# ----------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    params, scenario, run = _load(args)
    grid = build_grid(params, scenario)
    m0 = None
    if run.initial_energy not in (None, "uniform"):
        m0 = initial_density(grid, scenario, energy=run.initial_energy)
    sol, _ = solve_mfdb(params, scenario, grid=grid, m0=m0)
    energy = None if run.initial_energy in (None, "uniform") else run.initial_energy
    mio.save_policy(args.out, sol, initial_energy=energy)
    prov = _provenance(args, params, scenario, run, [f"policy: {args.out}"])
    r = sol.report
    mio.write_csv(
        f"{args.out}.convergence.csv",
        [{"iteration": i + 1, "sup_change_s": c} for i, c in enumerate(r.sup_changes)],
        comments=prov,
    )
    g = sol.grid
    k = int(g.gain_index(scenario.initial_gain))
    mio.write_csv(
        f"{args.out}.slices.csv",
        [
            {
                "frame": i,
                "energy": float(g.energy[j]),
                "delay_s": float(sol.policy[i, j, k]),
                "mass": float(sol.mean_field[i, j].sum() * g.cell_area),
            }
            for i in range(g.n_frames)
            for j in range(len(g.energy))
        ],
        comments=prov + [f"gain cell: {g.gain[k]!r}"],
    )
    print(f"{'converged' if r.converged else 'NOT converged'} in {r.iterations} iterations "
          f"(residual {r.residual:.3e} s)")
    return 0 if r.converged else 3


def cmd_simulate(args) -> int:
    params, scenario, run = _load(args)
    name = run.strategy or "mfdb"
    m = _sessions(_strategy(name, args, scenario, params), scenario, params, run)
    mio.write_csv(args.out, m.frame_table(), SESSION_COLUMNS, _provenance(args, params, scenario, run))
    print(render_summary({name: m}))
    return 0


def cmd_compare(args) -> int:
    params, scenario, run = _load(args)
    tables = {}
    rows = []
    for name in STRATEGIES:
        if name == "mfdb" and not args.policy:
            log.warning("no --policy given; skipping mfdb")
            continue
        m = _sessions(_strategy(name, args, scenario, params), scenario, params, run)
        tables[name] = m
        rows += m.frame_table()
    mio.write_csv(args.out, rows, SESSION_COLUMNS, _provenance(args, params, scenario, run))
    print(render_summary(tables))
    return 0


def cmd_sweep(args) -> int:
    params, scenario, run = _load(args)
    if not run.n_values:
        raise ConfigError("sweep needs n_values (config key or --n-values)")
    names = [run.strategy] if run.strategy else [s for s in STRATEGIES if s != "mfdb" or args.policy]
    strategies = [_strategy(n, args, scenario, params) for n in names]
    rows = average_delay_sweep(run.n_values, strategies, scenario, params, range(run.seeds), run.session_energy)
    mio.write_csv(args.out, rows, SWEEP_COLUMNS, _provenance(args, params, scenario, run))
    for r in rows:
        print(f"N={r['n_devices']:>6}  {r['strategy']:<6} {r['mean_delay_s'] * 1e3:8.4f} ms "
              f"+- {r['stderr_s'] * 1e3:.4f}")
    return 0


def cmd_check(args) -> int:
    params, _, _ = _load(args)
    results = run_checks(params, solve=not args.quick)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


# ------------------------------------------------------------------- parser


def _n_list(text):
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("n-values must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfdb", description="Mean-field dynamic backoff solver and simulator.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, policy=False, out=True):
        p.add_argument("--config", metavar="PATH", help="JSON config (defaults if omitted)")
        p.add_argument("--scenario", choices=SCENARIO_NAMES, help="named channel scenario")
        if policy:
            p.add_argument("--policy", metavar="PATH", help="policy file written by solve")
            p.add_argument("--seeds", type=int, metavar="INT", help="number of seeds")
            p.add_argument("--strategy", choices=STRATEGIES)
        if out:
            p.add_argument("--out", metavar="PATH", required=True)
        return p

    common(sub.add_parser("solve", help="solve the mean-field game, write a policy file"))
    common(sub.add_parser("simulate", help="simulate one strategy"), policy=True)
    sw = common(sub.add_parser("sweep", help="mean delay against population size"), policy=True)
    sw.add_argument("--n-values", type=_n_list, metavar="CSV-LIST")
    common(sub.add_parser("compare", help="simulate all strategies"), policy=True)
    ck = common(sub.add_parser("check", help="run the oracle checks"), out=False)
    ck.add_argument("--quick", action="store_true", help="skip the checks that need a full solve")
    return ap


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "check": cmd_check,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, mio.PolicyFormatError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
