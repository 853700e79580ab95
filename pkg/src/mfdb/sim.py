"""Monte Carlo simulation of grant-free slotted uplink access.

A population of devices shares the ``K`` slots of every frame.  Each device
picks a slot with one of four strategies, transmits, and learns from the base
station whether its packet was decoded; failed packets are resent a few slots
later within the same frame.  Everything is vectorized over devices and one
``numpy.random.Generator`` per session drives all draws in a fixed order, so a
session is reproducible from its seed.

Interference seen by a device is the sum of the other transmitters' received
powers in its slot, scaled by ``interference_scale``.  Sessions use
``beta / (N - 1)`` so the sum estimates the cluster interference the solver's
mean field describes, independently of how many devices are simulated.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ChannelScenario, ConfigError, SystemParams, channel_step, path_loss
from .solver import (
    MFDBSolution,
    SolverGrid,
    choice_measure,
    energy_cell,
    energy_price,
    gain_bounds,
    interference_factor,
    round_to_slots,
)

__all__ = [
    "StrategyKind",
    "Strategy",
    "Population",
    "DeviceState",
    "FrameLog",
    "SessionMetrics",
    "spawn_devices",
    "decide_backoff",
    "decode_ts",
    "run_frame",
    "run_session",
    "average_delay_sweep",
    "empirical_state_histogram",
    "session_rng",
]

log = logging.getLogger(__name__)

#: Retransmission backoff after a NACK, in slots.
RETRY_SLOTS = (1, 2, 3)
#: Relative slack on the SINR test so exact-threshold arrivals pass.
SINR_RTOL = 1e-12


class StrategyKind(str, enum.Enum):
    MFDB = "mfdb"
    ACB = "acb"
    ALOHA = "aloha"
    MB = "mb"


@dataclass(frozen=True)
class Strategy:
    """Access strategy; MFDB carries the solved policy.

    ``mixed`` MFDB devices draw their delay from the equilibrium logit choice at
    their own state (the population behaviour the solver assumed); otherwise
    they play the bilinearly interpolated policy ``D*``.
    """

    kind: StrategyKind
    solution: MFDBSolution | None = None
    mixed: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is StrategyKind.MFDB and self.solution is None:
            raise ConfigError("the MFDB strategy needs a solved policy")

    @property
    def name(self) -> str:
        return self.kind.value

    def check_covers(self, params: SystemParams, scenario: ChannelScenario) -> None:
        if self.solution is None:
            return
        sp = self.solution.params
        if (sp.frames, sp.slots_per_frame, sp.slot_duration) != (
            params.frames,
            params.slots_per_frame,
            params.slot_duration,
        ):
            raise ConfigError("policy frame layout differs from the simulated parameters")
        if self.solution.scenario != scenario:
            raise ConfigError(
                f"policy was solved for scenario {self.solution.scenario.name!r}, "
                f"not {scenario.name!r}"
            )


@dataclass
class DeviceState:
    id: int
    radius: float
    path_loss: float
    energy: float
    gain: float
    alive: bool


@dataclass
class Population:
    """Struct-of-arrays device population."""

    radius: np.ndarray
    path_loss: np.ndarray
    energy: np.ndarray
    gain: np.ndarray
    alive: np.ndarray
    spent: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.spent is None:
            self.spent = np.zeros_like(self.energy)

    def __len__(self) -> int:
        return len(self.energy)

    def device(self, i: int) -> DeviceState:
        return DeviceState(
            id=int(i),
            radius=float(self.radius[i]),
            path_loss=float(self.path_loss[i]),
            energy=float(self.energy[i]),
            gain=float(self.gain[i]),
            alive=bool(self.alive[i]),
        )

    def copy(self) -> "Population":
        return Population(
            self.radius.copy(), self.path_loss.copy(), self.energy.copy(),
            self.gain.copy(), self.alive.copy(), self.spent.copy(),
        )


def session_rng(seed: int, *labels) -> np.random.Generator:
    """Generator keyed by a root seed and a tuple of integer labels."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, labels)]))


def spawn_devices(params: SystemParams, scenario: ChannelScenario, rng, initial_energy=0.7) -> Population:
    """``N`` devices uniform in the cluster disc.

    ``initial_energy`` is a number, an array of per-device budgets, or
    ``"uniform"`` for budgets uniform on ``(0, 1]``.
    """
    n = params.device_count
    if n < 1:
        raise ConfigError("device_count must be >= 1")
    r = params.cluster_radius * np.sqrt(rng.random(n))
    if isinstance(initial_energy, str):
        if initial_energy != "uniform":
            raise ConfigError(f"unknown initial energy {initial_energy!r}")
        energy = 1.0 - rng.random(n)
    else:
        energy = np.broadcast_to(np.asarray(initial_energy, dtype=float), (n,)).copy()
    if np.any((energy < 0) | (energy > 1)):
        raise ConfigError("initial energy must lie in [0, 1]")
    return Population(
        radius=r,
        path_loss=np.asarray(path_loss(r, params.path_loss_exp)),
        energy=energy,
        gain=np.full(n, float(scenario.initial_gain)),
        alive=energy > 0,
    )


# ----------------------------------------------------------------- decisions


def _bilinear(table, grid: SolverGrid, energy, gain):
    """Bilinear lookup on the (E, H) grid; states outside are clamped to its edge."""
    e = np.clip(energy, grid.energy[0], grid.energy[-1])
    h = np.clip(gain, grid.gain[0], grid.gain[-1])
    if np.any(h != gain) or np.any(e != energy):
        log.debug("%d device states clamped to the policy grid", int(np.sum((h != gain) | (e != energy))))
    x = (e - grid.energy[0]) / grid.dE
    y = (h - grid.gain[0]) / grid.dH
    i = np.minimum(x.astype(int), len(grid.energy) - 2)
    j = np.minimum(y.astype(int), len(grid.gain) - 2)
    fx, fy = x - i, y - j
    return (
        table[i, j] * (1 - fx) * (1 - fy) + table[i + 1, j] * fx * (1 - fy)
        + table[i, j + 1] * (1 - fx) * fy + table[i + 1, j + 1] * fx * fy
    )


def _mfdb_delays(solution: MFDBSolution, pop: Population, idx, frame, rng, mixed):
    grid, params = solution.grid, solution.params
    E, H = pop.energy[idx], pop.gain[idx]
    if not mixed:
        return _bilinear(solution.policy[frame], grid, E, H)
    # the population's choice measure at the device's cell, rebuilt from the
    # value function and the interference the policy was solved against
    w = energy_price(solution.value[frame], grid.dE)
    _, prob = choice_measure(w, solution.field.interference[frame], grid, params)
    j, k = energy_cell(grid, E), grid.gain_index(H)
    p = prob[:, j, k].T
    cdf = np.cumsum(p, axis=1)
    out = np.full(len(idx), params.max_delay)
    alive = cdf[:, -1] > 0
    u = rng.random(int(alive.sum())) * cdf[alive, -1]
    pick = np.minimum((cdf[alive] < u[:, None]).sum(axis=1), p.shape[1] - 1)
    out[alive] = grid.delays[pick]
    return out


def _acb_slots(n, K, b0, rng):
    """First slot at which the barring draw passes, 0 if the frame ends blocked."""
    pos = np.zeros(n, dtype=int)
    slot = np.zeros(n, dtype=int)
    todo = np.arange(n)
    while todo.size:
        passed = rng.random(todo.size) > b0
        go = todo[passed]
        slot[go] = pos[go] + 1 + (rng.random(go.size) * (K - pos[go])).astype(int)
        wait = todo[~passed]
        pos[wait] += rng.choice(RETRY_SLOTS, size=wait.size)
        todo = wait[pos[wait] < K]
    return slot


def decide_backoff(strategy: Strategy, pop: Population, frame: int, rng, params: SystemParams, idx=None):
    """Slot index (1..K, 0 for no attempt) of the first attempt of each device in ``idx``."""
    idx = np.arange(len(pop)) if idx is None else np.asarray(idx)
    K = params.slots_per_frame
    kind = strategy.kind
    if kind is StrategyKind.MB:
        return np.ones(idx.size, dtype=int)
    if kind is StrategyKind.ALOHA:
        return rng.integers(1, K + 1, size=idx.size)
    if kind is StrategyKind.ACB:
        return _acb_slots(idx.size, K, params.acb_factor, rng)
    d = _mfdb_delays(strategy.solution, pop, idx, frame, rng, strategy.mixed)
    return np.rint(round_to_slots(d, params) / params.slot_duration).astype(int)


def _power(strategy: Strategy, gain, slot, frame, params, broadcast):
    kind = strategy.kind
    if kind in (StrategyKind.ACB, StrategyKind.ALOHA):
        return np.full(gain.shape, params.fixed_power)
    if kind is StrategyKind.MB:
        I = broadcast
    else:
        sol = strategy.solution
        I = np.interp(slot * params.slot_duration, sol.grid.delays, sol.field.interference[frame])
    return params.target_sinr * (I + params.noise_power) / gain


# ------------------------------------------------------------------ decoding


def decode_ts(gain, power, params: SystemParams, interference_scale=1.0):
    """Success flags of the transmitters sharing one slot.

    Each transmitter sees the other transmitters' received powers (times
    ``interference_scale``) as interference; it succeeds when its SINR reaches
    the threshold and, if ``params.decode_capacity`` is set, it is among that
    many strongest SINRs of the slot.
    """
    rx = np.asarray(gain, dtype=float) * np.asarray(power, dtype=float)
    if np.any(np.asarray(power) < 0):
        raise ValueError("powers must be >= 0")
    if rx.size == 0:
        return np.zeros(0, dtype=bool)
    interference = interference_scale * (rx.sum() - rx)
    s = rx / (interference + params.noise_power)
    ok = s >= params.sinr_threshold * (1.0 - SINR_RTOL)
    cap = params.decode_capacity
    if cap is not None and ok.sum() > cap:
        order = np.argsort(-s, kind="stable")
        keep = np.zeros_like(ok)
        keep[order[:cap]] = True
        ok &= keep
        # ties at the cut are broken by device order
        ok[order[cap:]] = False
    return ok


# ------------------------------------------------------------------- frames


@dataclass
class FrameLog:
    """Per-device outcome of one frame (delays in seconds)."""

    delay: np.ndarray
    power: np.ndarray
    success: np.ndarray
    retransmits: np.ndarray
    energy: np.ndarray
    starved: np.ndarray
    spent: np.ndarray

    @property
    def dropped(self) -> np.ndarray:
        return ~self.success


def run_frame(pop: Population, strategy: Strategy, frame: int, scenario: ChannelScenario,
              params: SystemParams, rng, interference_scale=1.0, broadcast=0.0,
              gain_limits=None):
    """Play the ``K`` slots of one frame in place and evolve the channel.

    Returns ``(log, broadcast)`` where ``broadcast`` is the first-slot average
    received power per other transmitter, which the MB strategy uses as its
    interference estimate in the next frame.
    """
    n = len(pop)
    K, dtau = params.slots_per_frame, params.slot_duration
    active = np.flatnonzero(pop.alive & (pop.energy > 0))
    nxt = np.zeros(n, dtype=int)
    nxt[active] = decide_backoff(strategy, pop, frame, rng, params, active)
    delay = np.full(n, params.max_delay)
    power = np.zeros(n)
    success = np.zeros(n, dtype=bool)
    retx = np.zeros(n, dtype=int)
    starved = np.zeros(n, dtype=bool)
    spent = np.zeros(n)
    new_broadcast = 0.0
    for k in range(1, K + 1):
        tx = np.flatnonzero(nxt == k)
        if tx.size == 0:
            continue
        p = _power(strategy, pop.gain[tx], k, frame, params, broadcast)
        cost = p * dtau / params.energy_ref
        ok = (p <= params.max_power) & (cost <= pop.energy[tx])
        # attempts the battery or the amplifier cannot serve are skipped and
        # the packet is dropped for this frame
        starved[tx[~ok & (cost > pop.energy[tx])]] = True
        nxt[tx[~ok]] = 0
        tx, p, cost = tx[ok], p[ok], cost[ok]
        if tx.size == 0:
            continue
        pop.energy[tx] -= cost
        pop.spent[tx] += cost
        spent[tx] += cost
        power[tx] = p
        won = decode_ts(pop.gain[tx], p, params, interference_scale)
        if k == 1 and tx.size > 1:
            new_broadcast = float((pop.gain[tx] * p).sum() / (tx.size - 1))
        done = tx[won]
        success[done] = True
        delay[done] = k * dtau
        nxt[done] = 0
        lost = tx[~won]
        nxt[lost] = k + rng.choice(RETRY_SLOTS, size=lost.size)
        late = nxt[lost] > K
        nxt[lost[late]] = 0
        retx[lost[~late]] += 1
    t0 = frame * params.frame_duration
    lo, hi = gain_limits if gain_limits is not None else gain_bounds(params, scenario)
    for s in range(K):
        pop.gain = channel_step(pop.gain, t0 + s * dtau, scenario, dtau, rng, lo, hi)
    pop.alive = pop.energy > 0
    return FrameLog(delay, power, success, retx, pop.energy.copy(), starved, spent), new_broadcast


# ----------------------------------------------------------------- sessions


@dataclass
class SessionMetrics:
    """Per-frame, per-device logs of one session and their aggregates.

    Arrays are ``(frames, N)``.  A device is *exhausted* from the first frame
    in which its battery could not pay for an attempt; the session exhausts at
    the first frame where at least half the devices are exhausted, and from
    then on its CDC is flagged as saturated.  ``cdc`` itself stays finite
    (drops count ``(K * slot_duration)**2``) so strategies remain comparable.
    """

    strategy: str
    delay: np.ndarray
    power: np.ndarray
    success: np.ndarray
    retransmits: np.ndarray
    energy: np.ndarray
    spent: np.ndarray
    starved: np.ndarray
    initial_energy: np.ndarray

    @property
    def frames(self) -> int:
        return self.delay.shape[0]

    @property
    def mean_delay(self) -> np.ndarray:
        return self.delay.mean(axis=1)

    @property
    def device_cdc(self) -> np.ndarray:
        return np.cumsum(self.delay**2, axis=0)

    @property
    def exhausted_from(self) -> np.ndarray:
        """Per device, the first exhausted frame (``frames`` if never)."""
        hit = np.cumsum(self.starved, axis=0) > 0
        return np.where(hit.any(axis=0), hit.argmax(axis=0), self.frames)

    @property
    def exhaustion_frame(self) -> int | None:
        share = (self.exhausted_from[None, :] <= np.arange(self.frames)[:, None]).mean(axis=1)
        hit = np.flatnonzero(share >= 0.5)
        return int(hit[0]) if hit.size else None

    @property
    def cdc(self) -> np.ndarray:
        """Population-mean CDC per frame."""
        return self.device_cdc.mean(axis=1)

    @property
    def saturated(self) -> np.ndarray:
        out = np.zeros(self.frames, dtype=bool)
        ex = self.exhaustion_frame
        if ex is not None:
            out[ex:] = True
        return out

    @classmethod
    def pooled(cls, sessions) -> "SessionMetrics":
        """Devices of several sessions (e.g. seeds) of one strategy side by side."""
        sessions = list(sessions)
        names = ("delay", "power", "success", "retransmits", "energy", "spent", "starved")
        kw = {n: np.concatenate([getattr(m, n) for m in sessions], axis=1) for n in names}
        kw["initial_energy"] = np.concatenate([m.initial_energy for m in sessions])
        return cls(strategy=sessions[0].strategy, **kw)

    @property
    def mean_energy(self) -> np.ndarray:
        return self.energy.mean(axis=1)

    @property
    def drop_rate(self) -> np.ndarray:
        return 1.0 - self.success.mean(axis=1)

    @property
    def drop_count(self) -> int:
        return int((~self.success).sum())

    def frame_table(self) -> list[dict]:
        cdc = np.where(self.saturated, np.inf, self.cdc)
        return [
            {
                "frame": i,
                "strategy": self.strategy,
                "mean_delay_s": float(self.mean_delay[i]),
                "cdc_s2": float(cdc[i]),
                "mean_energy": float(self.mean_energy[i]),
                "drop_rate": float(self.drop_rate[i]),
            }
            for i in range(self.frames)
        ]


def default_interference_scale(params: SystemParams) -> float:
    n = params.device_count
    return interference_factor(params) / (n - 1) if n > 1 else 0.0


def run_session(pop: Population, strategy: Strategy, scenario: ChannelScenario,
                params: SystemParams, rng, interference_scale=None) -> SessionMetrics:
    """All frames of one session; ``pop`` is advanced in place."""
    strategy.check_covers(params, scenario)
    scale = default_interference_scale(params) if interference_scale is None else interference_scale
    limits = gain_bounds(params, scenario)
    e0 = pop.energy.copy()
    logs = []
    broadcast = 0.0
    for i in range(params.frames):
        fl, broadcast = run_frame(pop, strategy, i, scenario, params, rng, scale, broadcast, limits)
        logs.append(fl)

    def stack(name):
        return np.stack([getattr(fl, name) for fl in logs])

    return SessionMetrics(
        strategy=strategy.name,
        delay=stack("delay"),
        power=stack("power"),
        success=stack("success"),
        retransmits=stack("retransmits"),
        energy=stack("energy"),
        spent=stack("spent"),
        starved=stack("starved"),
        initial_energy=e0,
    )


def simulate(strategy: Strategy, scenario: ChannelScenario, params: SystemParams, seed: int,
             initial_energy=0.7, stream: int = 0) -> SessionMetrics:
    """Spawn a population and run one session from a seed."""
    kind_id = list(StrategyKind).index(strategy.kind)
    rng = session_rng(seed, stream, kind_id, params.device_count)
    pop = spawn_devices(params, scenario, rng, initial_energy)
    return run_session(pop, strategy, scenario, params, rng)


def average_delay_sweep(n_values, strategies, scenario: ChannelScenario, params: SystemParams,
                        seeds=range(10), initial_energy=0.7) -> list[dict]:
    """Mean backoff delay over devices and frames per ``(N, strategy)``.

    The mean and its standard error are taken across seeds.
    """
    n_values = list(n_values)
    if not n_values:
        raise ConfigError("n_values must not be empty")
    seeds = list(seeds)
    rows = []
    for n in n_values:
        p = params.replace(device_count=int(n))
        for strat in strategies:
            per_seed = np.array(
                [simulate(strat, scenario, p, s, initial_energy).delay.mean() for s in seeds]
            )
            se = per_seed.std(ddof=1) / math.sqrt(len(seeds)) if len(seeds) > 1 else 0.0
            rows.append(
                {
                    "n_devices": int(n),
                    "strategy": strat.name,
                    "mean_delay_s": float(per_seed.mean()),
                    "stderr_s": float(se),
                }
            )
    return rows


def empirical_state_histogram(energy, gain, grid: SolverGrid) -> np.ndarray:
    """Share of devices per (E, H) cell of the solver grid.

    Energy cell ``j`` collects ``(E_j - dE, E_j]`` (so only an empty battery
    lands in cell 0); gains go to the nearest cell.  States off the grid are
    clamped to its edge.
    """
    energy = np.atleast_1d(np.asarray(energy, dtype=float))
    gain = np.atleast_1d(np.asarray(gain, dtype=float))
    out = np.zeros(grid.shape)
    np.add.at(out, (energy_cell(grid, energy), grid.gain_index(gain)), 1.0)
    return out / len(energy)
