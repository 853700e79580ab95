"""Policy files, JSON configuration and CSV tables.

All formats are plain text.  Floats are written with 17 significant digits,
which round-trips every IEEE double, and nothing depends on the locale.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import SCENARIO_NAMES, ChannelScenario, ConfigError, SystemParams, scenario_preset
from .solver import (
    ConvergenceReport,
    InterferenceField,
    MFDBSolution,
    SolverGrid,
)

__all__ = [
    "MAGIC",
    "PolicyFormatError",
    "fingerprint",
    "save_policy",
    "load_policy",
    "RunSpec",
    "load_config",
    "parse_config",
    "write_csv",
    "format_number",
]

MAGIC = "MFDB-POLICY v1"
COST_CONVENTION = "D^2/frame_duration per unit time; drop pays (K*slot_duration)^2"
PER_LINE = 6

#: Arrays stored in a policy file, in file order, with their solution source.
_ARRAYS = ("policy", "value", "mean_field", "interference", "lam", "dlam", "transmitting_mass")


class PolicyFormatError(ValueError):
    """A policy file is malformed, truncated or of another version."""


def format_number(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _canonical(params: SystemParams, scenario: ChannelScenario) -> dict:
    return {"params": params.to_dict(), "scenario": scenario.to_dict()}


def fingerprint(params: SystemParams, scenario: ChannelScenario) -> str:
    """SHA-256 of the canonical JSON of the parameters and the scenario."""
    text = json.dumps(_canonical(params, scenario), sort_keys=True, allow_nan=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ policy


def _solution_arrays(sol: MFDBSolution) -> dict[str, np.ndarray]:
    f = sol.field
    return {
        "policy": sol.policy,
        "value": sol.value,
        "mean_field": sol.mean_field,
        "interference": f.interference,
        "lam": f.lam,
        "dlam": f.dlam,
        "transmitting_mass": f.transmitting_mass,
    }


def save_policy(path, sol: MFDBSolution, initial_energy=None) -> None:
    """Write a solved policy with its grid, parameters and convergence report."""
    g, r = sol.grid, sol.report
    header = {
        "fingerprint": fingerprint(sol.params, sol.scenario),
        "cost_convention": COST_CONVENTION,
        "converged": "true" if r.converged else "false",
        "iterations": str(r.iterations),
        "residual_s": format_number(r.residual),
        "sup_changes_s": " ".join(format_number(c) for c in r.sup_changes),
        "clipped_mass": format_number(r.clipped_mass),
        "initial_energy": "uniform" if initial_energy is None else format_number(initial_energy),
        "axis_energy": f"{len(g.energy)} {format_number(g.energy[0])} {format_number(g.energy[-1])}",
        "axis_gain": f"{len(g.gain)} {format_number(g.gain[0])} {format_number(g.gain[-1])}",
        "axis_delay": f"{len(g.delays)} {format_number(g.delays[0])} {format_number(g.delays[-1])}",
        "frames": str(g.n_frames),
        "substeps_per_frame": str(g.substeps_per_frame),
        "fpk_refine": str(g.fpk_refine),
        "params": json.dumps(sol.params.to_dict(), sort_keys=True),
        "scenario": json.dumps(sol.scenario.to_dict(), sort_keys=True),
    }
    lines = [MAGIC]
    if not r.converged:
        lines.append("# WARNING: fixed-point iteration did not converge")
    lines += [f"# {k}: {v}" for k, v in header.items()]
    for name, arr in _solution_arrays(sol).items():
        arr = np.asarray(arr, dtype=float)
        lines.append(f"array {name} {' '.join(map(str, arr.shape))}")
        flat = arr.ravel()
        for i in range(0, flat.size, PER_LINE):
            lines.append(" ".join(format_number(x) for x in flat[i:i + PER_LINE]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _axis(text: str, key: str):
    try:
        n, lo, hi = text.split()
        return int(n), float(lo), float(hi)
    except ValueError as exc:
        raise PolicyFormatError(f"bad axis header {key!r}: {text!r}") from exc


def load_policy(path) -> tuple[MFDBSolution, dict]:
    """Read a policy file back into an ``MFDBSolution``.

    Returns ``(solution, header)``; the report's runtime is not stored and
    comes back as zero.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != MAGIC:
        raise PolicyFormatError(
            f"unsupported policy file version: expected {MAGIC!r}, found {lines[0].strip()!r}"
        )
    header: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and lines[pos].startswith("#"):
        body = lines[pos][1:].strip()
        if ": " in body:
            k, v = body.split(": ", 1)
            header[k] = v
        pos += 1
    for key in ("params", "scenario", "axis_energy", "axis_gain", "axis_delay", "frames",
                "substeps_per_frame", "converged", "iterations", "residual_s"):
        if key not in header:
            raise PolicyFormatError(f"policy header lacks {key!r}")
    arrays: dict[str, np.ndarray] = {}
    while pos < len(lines):
        line = lines[pos].strip()
        pos += 1
        if not line:
            continue
        parts = line.split()
        if parts[0] != "array" or len(parts) < 3:
            raise PolicyFormatError(f"expected an array block, found {line[:40]!r}")
        name, shape = parts[1], tuple(int(x) for x in parts[2:])
        need = int(np.prod(shape))
        values: list[str] = []
        while len(values) < need and pos < len(lines) and lines[pos] and not lines[pos].startswith("array"):
            values.extend(lines[pos].split())
            pos += 1
        if len(values) != need:
            raise PolicyFormatError(f"array {name!r}: expected {need} values, found {len(values)}")
        arr = np.array([float(v) for v in values]).reshape(shape)
        if np.isnan(arr).any():
            raise PolicyFormatError(f"array {name!r} contains NaN")
        arrays[name] = arr
    missing = [a for a in _ARRAYS if a not in arrays]
    if missing:
        raise PolicyFormatError(f"policy file lacks arrays: {', '.join(missing)}")

    params = SystemParams(**json.loads(header["params"]))
    scen = json.loads(header["scenario"])
    scenario = ChannelScenario(**scen)
    if header.get("fingerprint") not in (None, fingerprint(params, scenario)):
        raise PolicyFormatError("fingerprint does not match the stored parameters")
    ne, e0, e1 = _axis(header["axis_energy"], "axis_energy")
    nh, h0, h1 = _axis(header["axis_gain"], "axis_gain")
    nd, d0, d1 = _axis(header["axis_delay"], "axis_delay")
    frames = int(header["frames"])
    grid = SolverGrid(
        energy=np.linspace(e0, e1, ne),
        gain=np.linspace(h0, h1, nh),
        frame_times=np.arange(frames + 1) * params.frame_duration,
        delays=np.linspace(d0, d1, nd),
        slot_delays=np.arange(1, params.slots_per_frame + 1) * params.slot_duration,
        substeps_per_frame=int(header["substeps_per_frame"]),
        fpk_refine=int(header.get("fpk_refine", "1")),
    )
    _check_grid(grid)
    expect = {
        "policy": (frames, ne, nh),
        "value": (frames + 1, ne, nh),
        "mean_field": (frames + 1, ne, nh),
        "interference": (frames, nd),
        "lam": (frames, nd),
        "dlam": (frames, nd),
        "transmitting_mass": (frames,),
    }
    for name, shape in expect.items():
        if arrays[name].shape != shape:
            raise PolicyFormatError(f"array {name!r} has shape {arrays[name].shape}, axes imply {shape}")
    changes = header.get("sup_changes_s", "").split()
    report = ConvergenceReport(
        converged=header["converged"] == "true",
        iterations=int(header["iterations"]),
        sup_changes=[float(c) for c in changes],
        residual=float(header["residual_s"]),
        substeps_per_frame=grid.substeps_per_frame,
        runtime_s=0.0,
        clipped_mass=float(header.get("clipped_mass", "0")),
    )
    sol = MFDBSolution(
        params=params,
        scenario=scenario,
        grid=grid,
        value=arrays["value"],
        mean_field=arrays["mean_field"],
        policy=arrays["policy"],
        field=InterferenceField(
            lam=arrays["lam"],
            dlam=arrays["dlam"],
            interference=arrays["interference"],
            transmitting_mass=arrays["transmitting_mass"],
        ),
        report=report,
    )
    return sol, header


def _check_grid(grid: SolverGrid) -> None:
    for name in ("energy", "gain", "delays", "frame_times"):
        ax = getattr(grid, name)
        if len(ax) < 2 or not np.all(np.diff(ax) > 0):
            raise PolicyFormatError(f"axis {name!r} is not strictly increasing")
    if grid.substeps_per_frame < 1 or grid.fpk_refine < 1:
        raise PolicyFormatError("substeps_per_frame and fpk_refine must be >= 1")


# ------------------------------------------------------------------ config


@dataclass
class RunSpec:
    """Run options of a config file.

    ``initial_energy`` of ``None`` means: the solver starts from a uniform
    energy density and simulated devices from a full budget of 0.7.
    """

    strategy: str | None = None
    seeds: int = 10
    n_values: list[int] | None = None
    initial_energy: float | str | None = None

    @property
    def session_energy(self):
        return 0.7 if self.initial_energy is None else self.initial_energy


_RUN_KEYS = ("strategy", "seeds", "n_values", "initial_energy")
_PARAM_KEYS = tuple(f.name for f in fields(SystemParams))
_SCENARIO_KEYS = tuple(f.name for f in fields(ChannelScenario))


def parse_config(data: dict) -> tuple[SystemParams, ChannelScenario, RunSpec]:
    """Build parameters, scenario and run options from a config mapping.

    ``name`` selects a named scenario preset whose fields the other scenario
    keys then override.  Of ``frame_duration``, ``slots_per_frame`` and
    ``slot_duration`` the slot duration follows from the other two unless it
    is given; if only it and the slot count are given the frame follows.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(_RUN_KEYS) - set(_PARAM_KEYS) - set(_SCENARIO_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    p = {k: data[k] for k in _PARAM_KEYS if k in data}
    defaults = SystemParams()
    if "slot_duration" not in p:
        if "frame_duration" in p or "slots_per_frame" in p:
            fd = p.get("frame_duration", defaults.frame_duration)
            p["slot_duration"] = fd / p.get("slots_per_frame", defaults.slots_per_frame)
    elif "frame_duration" not in p:
        p["frame_duration"] = p.get("slots_per_frame", defaults.slots_per_frame) * p["slot_duration"]
    params = SystemParams(**p)

    s = {k: data[k] for k in _SCENARIO_KEYS if k in data}
    name = s.pop("name", "cc")
    if name in SCENARIO_NAMES:
        base = scenario_preset(name).to_dict()
        if any(k in s for k in ("base_gain", "amplitude", "angular_freq", "phase")):
            base["initial_gain"] = None
        base.update(s)
        scenario = ChannelScenario(**base)
    else:
        scenario = ChannelScenario(name=name, **s)

    run = RunSpec(**{k: data[k] for k in _RUN_KEYS if k in data})
    e = run.initial_energy
    if e is not None and e != "uniform":
        if isinstance(e, str) or not 0 < float(e) <= 1:
            raise ConfigError('initial_energy must lie in (0, 1] or be "uniform"')
        run.initial_energy = float(e)
    if not isinstance(run.seeds, int) or run.seeds < 1:
        raise ConfigError("seeds must be an integer >= 1")
    if run.n_values is not None:
        if not run.n_values or any(not isinstance(n, int) or n < 1 for n in run.n_values):
            raise ConfigError("n_values must be a non-empty list of positive integers")
    if run.strategy is not None and run.strategy not in ("mfdb", "acb", "aloha", "mb"):
        raise ConfigError(f"unknown strategy {run.strategy!r}")
    return params, scenario, run


def load_config(path) -> tuple[SystemParams, ChannelScenario, RunSpec]:
    """Read a JSON config file (see ``parse_config``)."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8") or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)


# --------------------------------------------------------------------- csv


def write_csv(path, rows, columns=None, comments=()) -> None:
    """Write dict rows as CSV with ``#`` provenance lines before the header.

    Columns default to the keys of the first row, in order.
    """
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_number(v)
    return "" if v is None else str(v)
