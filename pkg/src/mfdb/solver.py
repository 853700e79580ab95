"""Coupled backward value / forward density iteration for the dynamic backoff game.

State is ``X = (E, H)``: normalized battery energy and combined effective gain.
Within a frame a device picks one backoff delay ``D``; transmitting at ``D``
costs the energy ``c = p(D, H) * slot_duration / energy_ref`` per frame, which
the value equation spreads as the drift ``-c / frame_duration`` while the
density takes the whole debit as one jump per frame.

Conventions used everywhere in this module:

* running cost rate is ``D**2 / frame_duration`` so a frame contributes ``D**2``;
* a device *transmits* at ``D`` when ``p_req <= max_power`` and ``c <= E``;
  otherwise it drops the packet, pays ``(K * slot_duration)**2`` per frame and
  its energy stays put;
* the population picks delays with a choice measure ``choice[D, E, H]`` (a
  probability over delay samples per cell), and energy cell ``j`` holds the
  devices with energy in ``(E_j - dE, E_j]``;
* the density moves on a finer energy lattice (``fpk_refine`` sub-cells per
  energy cell) so the per-frame debit is not smeared over a whole cell;
* the policy entry of a dropping cell is the drop delay ``K * slot_duration``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .model import ChannelScenario, ConfigError, SystemParams, terminal_penalty

__all__ = [
    "SolverGrid",
    "InterferenceField",
    "ConvergenceReport",
    "MFDBSolution",
    "IterationState",
    "build_grid",
    "required_substeps",
    "delay_distribution",
    "mean_field_interference",
    "transmit_measure",
    "delay_mass",
    "refine_density",
    "coarsen_density",
    "choice_measure",
    "point_choice",
    "energy_jump",
    "energy_price",
    "hjb_backward",
    "hamiltonian_argmin",
    "optimal_policy_argmin",
    "optimal_policy_closed_form",
    "fpk_forward",
    "initial_density",
    "energy_cell",
    "initial_state",
    "iterate",
    "solve_mfdb",
    "round_to_slots",
    "afford_fraction",
    "interference_factor",
    "inner_fixed_point",
]

log = logging.getLogger(__name__)

CFL_SAFETY = 0.5


@dataclass(frozen=True)
class SolverGrid:
    """Uniform (E, H) lattice, frame boundaries and the dense delay sample axis."""

    energy: np.ndarray
    gain: np.ndarray
    frame_times: np.ndarray
    delays: np.ndarray
    slot_delays: np.ndarray
    substeps_per_frame: int
    fpk_refine: int = 1

    @property
    def n_frames(self) -> int:
        return len(self.frame_times) - 1

    @property
    def dE(self) -> float:
        return float(self.energy[1] - self.energy[0])

    @property
    def dH(self) -> float:
        return float(self.gain[1] - self.gain[0])

    @property
    def frame_duration(self) -> float:
        return float(self.frame_times[1] - self.frame_times[0])

    @property
    def dt_sub(self) -> float:
        return self.frame_duration / self.substeps_per_frame

    @property
    def cell_area(self) -> float:
        return self.dE * self.dH

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.energy), len(self.gain)

    def with_substeps(self, n: int) -> "SolverGrid":
        return replace(self, substeps_per_frame=int(n))

    def density_grid(self) -> "SolverGrid":
        """The grid the density lives on: every positive energy cell split into
        ``fpk_refine`` equal sub-cells."""
        r = self.fpk_refine
        if r == 1:
            return self
        n = r * (len(self.energy) - 1) + 1
        return replace(self, energy=np.linspace(self.energy[0], self.energy[-1], n), fpk_refine=1)

    def parent_cells(self) -> np.ndarray:
        """Energy cell of this grid holding each density sub-cell."""
        r = self.fpk_refine
        return np.ceil(np.arange(r * (len(self.energy) - 1) + 1) / r).astype(int)

    def gain_index(self, h) -> np.ndarray:
        return np.clip(np.rint((np.asarray(h) - self.gain[0]) / self.dH), 0, len(self.gain) - 1).astype(int)


@dataclass
class InterferenceField:
    """Per-frame delay density, its derivative, and the interference on the delay axis."""

    lam: np.ndarray
    dlam: np.ndarray
    interference: np.ndarray
    transmitting_mass: np.ndarray


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    sup_changes: list[float]
    residual: float
    substeps_per_frame: int
    runtime_s: float
    clipped_mass: float = 0.0

    def summary(self) -> str:
        state = "converged" if self.converged else "NOT converged"
        return f"{state} in {self.iterations} iterations (residual {self.residual:.3e} s)"


@dataclass
class MFDBSolution:
    params: SystemParams
    scenario: ChannelScenario
    grid: SolverGrid
    value: np.ndarray
    mean_field: np.ndarray
    policy: np.ndarray
    field: InterferenceField
    report: ConvergenceReport

    @property
    def rounded_policy(self) -> np.ndarray:
        return round_to_slots(self.policy, self.params)


@dataclass
class IterationState:
    """Everything carried from one fixed-point iteration to the next."""

    policy: np.ndarray
    interference: np.ndarray
    mean_field: np.ndarray
    choice: np.ndarray | None = None
    value: np.ndarray | None = None
    field: InterferenceField | None = None
    grid: SolverGrid | None = None
    clipped_mass: float = 0.0


def interference_factor(params: SystemParams) -> float:
    return params.beta if params.interference_factor is None else params.interference_factor


def round_to_slots(delay, params: SystemParams):
    """Nearest slot delay in {dtau, ..., K dtau}; exact midpoints go to the earlier slot."""
    k = np.ceil(np.asarray(delay) / params.slot_duration - 0.5 - 1e-9)
    k = np.clip(k, 1, params.slots_per_frame)
    return k * params.slot_duration


# --------------------------------------------------------------------------- grid


def gain_bounds(params: SystemParams, scenario: ChannelScenario) -> tuple[float, float]:
    """Gain range covering the deterministic path plus 4 sigma sqrt(T) of diffusion."""
    scenario.check_positive(params.horizon)
    lo, hi = scenario.gain_range(params.horizon)
    lo = min(lo, scenario.initial_gain)
    hi = max(hi, scenario.initial_gain)
    spread = 4.0 * scenario.sigma * math.sqrt(params.horizon)
    pad = max(spread, 0.25 * 0.5 * (lo + hi))
    # keep the lowest cell strictly positive; the spread there is cut off and
    # the reflecting boundary takes over
    h_min = max(lo - pad, 0.1 * lo)
    return h_min, hi + pad


def build_grid(
    params: SystemParams,
    scenario: ChannelScenario,
    n_energy: int = 101,
    n_gain: int = 61,
    samples_per_slot: int = 10,
    interference: np.ndarray | None = None,
    fpk_refine: int = 4,
) -> SolverGrid:
    """Default lattice: 101 energy by 61 gain cells, ten delay samples per slot,
    density sub-cells a quarter of an energy cell wide."""
    if fpk_refine < 1:
        raise ConfigError("fpk_refine must be >= 1")
    h_min, h_max = gain_bounds(params, scenario)
    K = params.slots_per_frame
    grid = SolverGrid(
        energy=np.linspace(0.0, 1.0, n_energy),
        gain=np.linspace(h_min, h_max, n_gain),
        frame_times=np.arange(params.frames + 1) * params.frame_duration,
        delays=np.linspace(params.slot_duration, params.max_delay, samples_per_slot * (K - 1) + 1),
        slot_delays=np.arange(1, K + 1) * params.slot_duration,
        substeps_per_frame=1,
        fpk_refine=int(fpk_refine),
    )
    if interference is None:
        interference = np.zeros((params.frames, len(grid.delays)))
    return grid.with_substeps(required_substeps(params, scenario, grid, interference))


def _frame_energy_cost(I_d, gain, params: SystemParams):
    """Per-frame energy cost and power feasibility for every (delay, gain) pair."""
    p_req = params.target_sinr * (I_d[:, None] + params.noise_power) / gain[None, :]
    cost = p_req * params.slot_duration / params.energy_ref
    return cost, p_req <= params.max_power


def _max_rates(params, scenario, grid, interference):
    t = np.linspace(0.0, params.horizon, 4 * params.frames * 8 + 1)
    alpha = float(np.max(np.abs(scenario.drift(t))))
    b = 0.0
    for I_d in interference:
        cost, ok = _frame_energy_cost(I_d, grid.gain, params)
        usable = ok & (cost <= grid.energy[-1])
        if usable.any():
            b = max(b, float(cost[usable].max()))
    return b / params.frame_duration, alpha, scenario.sigma


def required_substeps(params, scenario, grid, interference) -> int:
    """Smallest substep count meeting the summed explicit stability bound with safety 0.5."""
    b, alpha, sigma = _max_rates(params, scenario, grid, interference)
    rate = b / grid.dE + alpha / grid.dH + sigma**2 / grid.dH**2
    if rate == 0:
        return 1
    return max(1, math.ceil(params.frame_duration * rate / CFL_SAFETY - 1e-9))


def _check_cfl(params, scenario, grid, interference):
    b, alpha, sigma = _max_rates(params, scenario, grid, interference)
    number = grid.dt_sub * (b / grid.dE + alpha / grid.dH + sigma**2 / grid.dH**2)
    if number > CFL_SAFETY + 1e-12:
        raise ConfigError(
            f"CFL violated: {grid.substeps_per_frame} substeps per frame give "
            f"Courant number {number:.3f} > {CFL_SAFETY}"
        )


# ------------------------------------------------------------- delay density


def _kernel_terms(delays, centers, bw, lo, hi):
    z = (delays[:, None] - centers[None, :]) / bw
    pdf = np.exp(-0.5 * z * z) / (bw * math.sqrt(2.0 * math.pi))
    s2 = math.sqrt(2.0)
    norm = 0.5 * (erf((hi - centers) / (bw * s2)) - erf((lo - centers) / (bw * s2)))
    return pdf / norm[None, :], -z / bw


def delay_distribution(policy, mean_field, grid: SolverGrid, params: SystemParams, weights=None,
                       delay_masses=None):
    """Kernel-smoothed pushforward of the density through the policy, per frame.

    ``weights`` optionally restricts the pushforward to a subset of the mass
    (same shape as ``mean_field``, values in [0, 1]).  Given
    ``delay_masses`` (transmitting mass per delay sample and frame, as
    returned by ``fpk_forward``) those are smoothed instead and ``policy``,
    ``mean_field`` and ``weights`` are ignored.  Returns ``(lam, dlam)`` of
    shape ``(frames, n_delays)``; each nonzero ``lam[i]`` integrates to one
    over the delay range (trapezoid rule).  A frame without mass gets zeros.
    """
    frames = len(delay_masses) if delay_masses is not None else policy.shape[0]
    lo, hi = params.slot_duration, params.max_delay
    lam = np.zeros((frames, len(grid.delays)))
    dlam = np.zeros_like(lam)
    for i in range(frames):
        if delay_masses is not None:
            mass = delay_masses[i]
            if not mass.any():
                continue
            k, dz = _kernel_terms(grid.delays, grid.delays, params.kernel_bandwidth, lo, hi)
            raw = k @ mass
            total = np.trapezoid(raw, grid.delays)
            lam[i] = raw / total
            dlam[i] = ((k * dz) @ mass) / total
            continue
        w = mean_field[i] * grid.cell_area
        if weights is not None:
            w = w * weights[i]
        w = w.ravel()
        d = policy[i].ravel()
        nz = w > 0
        if not nz.any():
            continue
        # cells sharing a delay share a kernel
        centers, inv = np.unique(d[nz], return_inverse=True)
        mass = np.bincount(inv, weights=w[nz])
        k, dz = _kernel_terms(grid.delays, centers, params.kernel_bandwidth, lo, hi)
        raw = k @ mass
        draw = (k * dz) @ mass
        total = np.trapezoid(raw, grid.delays)
        lam[i] = raw / total
        dlam[i] = draw / total
    return lam, dlam


def point_choice(policy, grid):
    """Choice measure of a pure policy: each cell's delay split linearly between
    its two neighbouring samples."""
    policy = np.asarray(policy, dtype=float)
    n = len(grid.delays)
    out = np.zeros((policy.shape[0], n) + grid.shape)
    step = grid.delays[1] - grid.delays[0]
    x = np.clip((policy - grid.delays[0]) / step, 0, n - 1)
    lo = np.minimum(np.floor(x).astype(int), n - 2)
    frac = x - lo
    for i in range(policy.shape[0]):
        np.put_along_axis(out[i], lo[i][None], (1.0 - frac[i])[None], axis=0)
        np.put_along_axis(out[i], lo[i][None] + 1, frac[i][None], axis=0)
    return out


def _affordable_part(cost, grid):
    """Lower end and share of each energy cell that can pay ``cost``.

    ``cost`` broadcasts against ``(N_E, N_H)`` from the left; devices are
    taken as uniform inside their cell.
    """
    hi = grid.energy[:, None]
    a = np.maximum(cost, hi - grid.dE)
    return a, np.clip((hi - a) / grid.dE, 0.0, 1.0)


def transmit_measure(choice_i, I_d, grid, params):
    """Measure of choosing each delay and being able to transmit there.

    Returns ``(tx, cost)`` with ``tx[D, E, H]`` and the per-frame energy
    ``cost[D, H]``.
    """
    cost, ok = _frame_energy_cost(I_d, grid.gain, params)
    _, share = _affordable_part(cost[:, None, :], grid)
    return choice_i * share * ok[:, None, :], cost


def delay_mass(choice_i, q, I_d, grid, params):
    """Transmitting population mass per delay sample, from cell masses ``q``."""
    tx, _ = transmit_measure(choice_i, I_d, grid, params)
    return np.tensordot(tx, q, axes=([1, 2], [0, 1]))


def mean_field_interference(lam, transmitting_mass, interference_prev, params):
    """Interference on the delay axis with lagged power (slot mass ``lam * dtau``).

    ``lam`` is the delay density of the transmitting devices and
    ``transmitting_mass`` their share of the population, per frame.  Every
    transmitting device arrives at exactly the target SINR, so ``p H`` equals
    ``gamma0 (I_prev + P_N)`` and the population integral reduces to that
    factor times the transmitting mass.
    """
    beta = interference_factor(params)
    tm = np.asarray(transmitting_mass, dtype=float).reshape(-1, 1)
    return (
        beta * params.slot_duration * lam * params.target_sinr
        * (interference_prev + params.noise_power) * tm
    )


def inner_fixed_point(slot_mass, beta, params: SystemParams):
    """Self-consistent interference of a fully transmitting population at one delay."""
    a = beta * params.target_sinr * np.asarray(slot_mass)
    with np.errstate(divide="ignore"):
        return np.where(a < 1, a * params.noise_power / (1 - a), np.inf)


# ------------------------------------------------------------------- HJB


def afford_fraction(cost, energy, dE):
    """Share of the energy cell ``(E - dE, E]`` that can pay ``cost``.

    The linear share of a uniformly filled cell is passed through a
    smoothstep so the Hamiltonian stays differentiable in the cost.
    """
    x = np.clip((np.asarray(energy) - cost) / dE, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _sample_terms(I_d, grid, params, samples=None):
    """Hamiltonian of every delay sample as ``A + C * price``.

    ``A = f D**2 / dt + (1 - f) * drop_rate`` (``inf`` where the sample is
    unaffordable) and ``C = f c / dt`` with ``f`` the affordable share of the
    energy cell; arrays have shape ``(n_samples, N_E, N_H)``.
    """
    dt = params.frame_duration
    delays = grid.delays if samples is None else grid.delays[samples]
    I_d = I_d if samples is None else I_d[samples]
    cost, ok = _frame_energy_cost(I_d, grid.gain, params)
    f = afford_fraction(cost[:, None, :], grid.energy[None, :, None], grid.dE) * ok[:, None, :]
    drop = params.max_delay**2 / dt
    A = np.where(f > 0, f * (delays**2 / dt)[:, None, None] + (1.0 - f) * drop, np.inf)
    return A, f * cost[:, None, :] / dt, f, cost


def energy_price(v, dE):
    """Backward-difference ``-dv/dE`` (zero on the E=0 row)."""
    w = np.zeros_like(v)
    w[1:] = -(v[1:] - v[:-1]) / dE
    return w


def _hamiltonian_min(A, C, w, params):
    """Minimal Hamiltonian per cell; dropping cells pay the drop rate only."""
    val = A + C * np.maximum(w, 0.0)[None]
    j = np.argmin(val, axis=0)
    a = np.take_along_axis(A, j[None], 0)[0]
    c = np.take_along_axis(C, j[None], 0)[0]
    drop = params.max_delay**2 / params.frame_duration
    return np.where(np.isfinite(a), a + c * w, drop)


def _refined_argmin(h, delays):
    """Smallest minimizing sample moved to the vertex of the parabola through
    it and its two neighbours (at most half a sample), so the minimizer
    responds continuously to the Hamiltonian."""
    n = len(delays)
    step = delays[1] - delays[0]
    j = np.argmin(h, axis=0)
    hm = np.take_along_axis(h, np.maximum(j - 1, 0)[None], 0)[0]
    h0 = np.take_along_axis(h, j[None], 0)[0]
    hp = np.take_along_axis(h, np.minimum(j + 1, n - 1)[None], 0)[0]
    good = (j > 0) & (j < n - 1) & np.isfinite(hm) & np.isfinite(hp)
    with np.errstate(invalid="ignore"):
        den = np.where(good, hm - 2.0 * h0 + hp, 0.0)
        good &= den > 0
        off = np.where(good, 0.5 * step * (hm - hp) / np.where(good, den, 1.0), 0.0)
    return delays[j] + np.clip(off, -0.5 * step, 0.5 * step)


def choice_measure(w, I_d, grid, params):
    """Hamiltonian minimizer and logit response over the delay samples.

    The policy is the minimizing delay (see ``_refined_argmin``); cells that
    cannot transmit at any delay get the drop delay.  The population plays a
    smoothed version of it: every cell spreads its choice over the samples
    with weights ``exp(-(h(D) / min h - 1) / choice_temperature)``, the
    temperature being relative to the cell's own minimal Hamiltonian so cells
    with a high energy price are smoothed as much as cheap ones.  A zero
    temperature puts all weight on the smallest minimizing sample.

    Returns ``(policy, choice)``; ``choice[:, E, H]`` sums to one on cells
    that can transmit somewhere and is zero elsewhere.
    """
    A, C, _, _ = _sample_terms(I_d, grid, params)
    h = A + C * np.maximum(w, 0.0)[None]
    hmin = h.min(axis=0)
    alive = np.isfinite(hmin)
    tau = params.choice_temperature
    if tau > 0:
        ref = np.where(alive, hmin, 1.0)
        with np.errstate(invalid="ignore"):
            z = np.exp(-(h / ref - 1.0) / tau)
        prob = z / np.where(alive, z.sum(axis=0), 1.0)
    else:
        prob = np.zeros_like(h)
        j = np.argmin(h, axis=0)
        np.put_along_axis(prob, j[None], 1.0, axis=0)
        prob *= alive
    policy = np.where(alive, _refined_argmin(h, grid.delays), params.max_delay)
    return policy, prob


def _half_slot_samples(grid, params):
    stride = max(1, int(round(0.5 * params.slot_duration / (grid.delays[1] - grid.delays[0]))))
    return np.arange(0, len(grid.delays), stride)


def _gain_generator_adjoint(v, alpha, sigma, dH):
    """Gain advection (upwind) and diffusion acting on a value slice, zero flux at the ends."""
    out = np.zeros_like(v)
    if alpha > 0:
        out[:, :-1] += alpha * (v[:, 1:] - v[:, :-1]) / dH
    elif alpha < 0:
        out[:, 1:] += -alpha * (v[:, :-1] - v[:, 1:]) / dH
    if sigma > 0:
        k = 0.5 * sigma**2 / dH**2
        out[:, :-1] += k * (v[:, 1:] - v[:, :-1])
        out[:, 1:] += k * (v[:, :-1] - v[:, 1:])
    return out


def hjb_backward(interference, scenario, grid, params):
    """Explicit backward sweep from the terminal penalty.

    Returns ``(value, policy, choice)``: value on the frame boundaries
    ``(frames + 1, N_E, N_H)``, the frame-start policy ``(frames, N_E, N_H)``
    and the transmit choice measure ``(frames, n_delays, N_E, N_H)`` (see
    ``choice_measure``).
    """
    _check_cfl(params, scenario, grid, interference)
    n_e, n_h = grid.shape
    frames = grid.n_frames
    value = np.empty((frames + 1, n_e, n_h))
    policy = np.empty((frames, n_e, n_h))
    choice = np.empty((frames, len(grid.delays), n_e, n_h))
    v = np.broadcast_to(
        terminal_penalty(grid.energy, params.penalty_scale, params.penalty_steepness)[:, None],
        (n_e, n_h),
    ).copy()
    value[frames] = v
    dt = grid.dt_sub
    S = grid.substeps_per_frame
    # the value only needs the minimum, taken on the half-slot lattice
    coarse = _half_slot_samples(grid, params)
    for i in range(frames - 1, -1, -1):
        A, C, _, _ = _sample_terms(interference[i], grid, params, coarse)
        for s in range(S - 1, -1, -1):
            t = grid.frame_times[i] + s * dt
            w = energy_price(v, grid.dE)
            if s == 0:
                policy[i], choice[i] = choice_measure(w, interference[i], grid, params)
            ham = _hamiltonian_min(A, C, w, params)
            v = v + dt * (ham + _gain_generator_adjoint(v, float(scenario.drift(t)), scenario.sigma, grid.dH))
        value[i] = v
    return value, policy, choice


def hamiltonian_argmin(values, delays):
    """Delay of the smallest sampled Hamiltonian; ties go to the smaller delay."""
    values = np.asarray(values, dtype=float)
    delays = np.asarray(delays, dtype=float)
    order = np.argsort(delays, kind="stable")
    return float(delays[order][np.argmin(values[order])])


def optimal_policy_argmin(value, interference, grid, params, frame, cell):
    """Brute-force Hamiltonian minimization over every delay sample at one cell.

    ``value`` is the slice ``v(t_frame)`` and ``cell = (j, k)``.  Returns the
    drop delay when no sample is affordable.
    """
    j, k = cell
    w = float(energy_price(value, grid.dE)[j, k])
    A, C, _, _ = _sample_terms(interference[frame], grid, params)
    val = A[:, j, k] + C[:, j, k] * max(w, 0.0)
    if not np.isfinite(val).any():
        return params.max_delay
    return hamiltonian_argmin(val, grid.delays)


def _interference_slope(field: InterferenceField, params: SystemParams, beta: float):
    """dI/dD at the self-consistent interference, using the kernel derivative of lam."""
    tm = field.transmitting_mass[:, None]
    a = beta * params.slot_duration * params.target_sinr * field.lam * tm
    da = beta * params.slot_duration * params.target_sinr * field.dlam * tm
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(a < 1, da * (field.interference + params.noise_power) / (1 - a), 0.0)
    return slope


def optimal_policy_closed_form(value, field: InterferenceField, policy_prev, grid, params):
    """Stationary point of the Hamiltonian with dI/dD frozen at the previous delay.

    ``D = dt gamma0 / (2 K H E_ref) * dI/dD(D_prev) * dv/dE`` (central
    differences in E), clamped to the delay range.
    """
    beta = interference_factor(params)
    slope = _interference_slope(field, params, beta)
    frames = policy_prev.shape[0]
    out = np.empty_like(policy_prev)
    H = grid.gain[None, :]
    for i in range(frames):
        dv = np.gradient(value[i], grid.dE, axis=0)
        dI = np.interp(policy_prev[i], grid.delays, slope[i])
        d = (
            params.frame_duration * params.target_sinr
            / (2.0 * params.slots_per_frame * H * params.energy_ref)
        ) * dI * dv
        out[i] = np.clip(d, params.slot_duration, params.max_delay)
    return out


# ------------------------------------------------------------------- FPK


def initial_density(grid: SolverGrid, scenario: ChannelScenario, energy_cells=None, energy=None) -> np.ndarray:
    """Density at the gain cell nearest the initial gain.

    Uniform over the positive energy cells by default; ``energy`` puts all
    mass in the cell holding that budget, ``energy_cells`` spreads it evenly
    over the given cells.
    """
    m0 = np.zeros(grid.shape)
    k = int(grid.gain_index(scenario.initial_gain))
    if energy is not None:
        energy_cells = [energy_cell(grid, energy)]
    elif energy_cells is None:
        energy_cells = np.arange(1, len(grid.energy))
    m0[energy_cells, k] = 1.0
    return m0 / (m0.sum() * grid.cell_area)


def energy_cell(grid: SolverGrid, energy):
    """Index of the cell ``(E_j - dE, E_j]`` holding each energy (clamped)."""
    x = (np.asarray(energy, dtype=float) - grid.energy[0]) / grid.dE
    return np.clip(np.ceil(x - 1e-9), 0, len(grid.energy) - 1).astype(int)


def _gain_transport(q, alpha, sigma, dH):
    """Net change rate of cell masses from gain advection and diffusion (zero flux)."""
    out = np.zeros_like(q)
    if alpha > 0:
        f = alpha / dH * q[:, :-1]
        out[:, :-1] -= f
        out[:, 1:] += f
    elif alpha < 0:
        f = -alpha / dH * q[:, 1:]
        out[:, 1:] -= f
        out[:, :-1] += f
    if sigma > 0:
        k = 0.5 * sigma**2 / dH**2
        f = k * (q[:, :-1] - q[:, 1:])
        out[:, :-1] -= f
        out[:, 1:] += f
    return out


def energy_jump(q, choice_i, I_d, grid, params):
    """Debit one frame of transmissions from the cell masses ``q``.

    The affordable part of every cell moves down by the frame cost of each
    chosen delay; the moved interval is remapped onto the cells it overlaps,
    so mass is conserved and the mean energy drops by exactly the expected
    cost.  Cells that can pay in full all shift by the same number of cells
    for a given (delay, gain); only the one cell straddling the cost pays in
    part, and that part lands in the lowest positive cell.

    Returns ``(q_next, masses)`` with the transmitting mass per delay sample.
    """
    cost, ok = _frame_energy_cost(I_d, grid.gain, params)
    n_e, n_h = grid.shape
    x = (cost - grid.energy[0]) / grid.dE
    part = np.ceil(x).astype(int)
    share = np.where(ok & (part < n_e), part - x, 0.0)
    k = np.floor(cost / grid.dE).astype(int)
    frac = cost / grid.dE - k
    j = np.arange(n_e)[:, None]
    cols = np.arange(n_h)
    pc = np.minimum(part, n_e - 1)
    masses = np.zeros(len(I_d))
    paid = np.zeros_like(q)
    stay = np.zeros_like(q)
    down = np.zeros_like(q)
    padded = np.zeros((n_e + 1, n_h))
    # one delay at a time keeps the working set in cache
    for d in np.flatnonzero(ok.any(axis=1)):
        full = padded[:-1]
        np.multiply(q, choice_i[d], out=full)
        full *= (j > part[d]) & ok[d]
        partial = q[pc[d], cols] * choice_i[d][pc[d], cols] * share[d]
        masses[d] = full.sum() + partial.sum()
        paid += full
        paid[pc[d], cols] += partial
        stay[min(1, n_e - 1)] += partial
        # a full cell j lands at E_j - cost, between cells j - k - 1 and j - k
        land = np.take_along_axis(padded, np.minimum(j + k[d], n_e), axis=0)
        stay += land * (1.0 - frac[d])
        down += land * frac[d]
    out = q - paid
    # a fully transmitting cell can go a rounding error below zero
    np.maximum(out, 0.0, out=out)
    out += stay
    out[:-1] += down[1:]
    return out, masses


def refine_density(q, grid: SolverGrid) -> np.ndarray:
    """Split cell masses evenly over the density sub-cells."""
    r = grid.fpk_refine
    return q[grid.parent_cells()] / np.where(np.arange(r * (len(q) - 1) + 1) == 0, 1, r)[:, None]


def coarsen_density(q, grid: SolverGrid) -> np.ndarray:
    """Sum sub-cell masses back onto the energy cells."""
    out = np.zeros(grid.shape)
    np.add.at(out, grid.parent_cells(), q)
    return out


def fpk_forward(policy, interference, scenario, grid, params, m0, choice=None):
    """Forward transport of the density.

    The density is carried on ``grid.density_grid()``; every sub-cell plays
    the choice of its parent cell.  At every frame start the transmitting
    mass takes its energy debit as a jump (``energy_jump``); during the
    frame gain mass is advected upwind and diffused with zero flux at both
    ends.  Without a ``choice`` measure the pure ``policy`` is used.

    Returns ``(m, clipped, masses)``: ``m`` of shape ``(frames + 1, N_E,
    N_H)`` on the energy cells, the total negative mass removed (zero
    whenever the stability bound holds), and the transmitting mass per delay
    sample at each frame start, shape ``(frames, n_delays)``.
    """
    _check_cfl(params, scenario, grid, interference)
    if choice is None:
        choice = point_choice(policy, grid)
    frames = grid.n_frames
    fine = grid.density_grid()
    parents = grid.parent_cells()
    out = np.empty((frames + 1,) + grid.shape)
    masses = np.empty((frames, len(grid.delays)))
    out[0] = np.asarray(m0, dtype=float)
    q = refine_density(out[0] * grid.cell_area, grid)
    dt = grid.dt_sub
    clipped = 0.0
    for i in range(frames):
        q, masses[i] = energy_jump(q, choice[i][:, parents], interference[i], fine, params)
        for s in range(grid.substeps_per_frame):
            t = grid.frame_times[i] + s * dt
            q = q + dt * _gain_transport(q, float(scenario.drift(t)), scenario.sigma, grid.dH)
            neg = q < 0
            if neg.any():
                lost = float(-q[neg].sum())
                clipped += lost
                log.debug("clipped %.3e negative mass at frame %d", lost, i)
                q[neg] = 0.0
        out[i + 1] = coarsen_density(q, grid) / grid.cell_area
    return out, clipped, masses


# ------------------------------------------------------------ fixed point


def initial_state(params, scenario, grid, m0=None) -> IterationState:
    frames = params.frames
    m0 = initial_density(grid, scenario) if m0 is None else m0
    policy = np.full((frames,) + grid.shape, params.slot_duration)
    interference = np.zeros((frames, len(grid.delays)))
    return IterationState(
        policy=policy,
        interference=interference,
        mean_field=np.broadcast_to(m0, (frames + 1,) + grid.shape).copy(),
        choice=point_choice(policy, grid),
        grid=grid,
    )


def iterate(state: IterationState, params, scenario, m0=None):
    """One pass of the fixed-point loop.

    Policy and choice measure are damped with the same factor.  Returns ``(new_state, sup_change)`` where
    ``sup_change`` is the sup-norm change of the damped policy.
    """
    grid = state.grid.with_substeps(
        required_substeps(params, scenario, state.grid, state.interference)
    )
    d = params.damping
    value, raw, raw_choice = hjb_backward(state.interference, scenario, grid, params)
    policy = (1.0 - d) * state.policy + d * raw
    choice = raw_choice
    if state.choice is not None and d < 1:
        choice *= d
        choice += (1.0 - d) * state.choice
    change = float(np.max(np.abs(policy - state.policy)))
    m0 = state.mean_field[0] if m0 is None else m0
    m, clipped, masses = fpk_forward(policy, state.interference, scenario, grid, params, m0, choice=choice)
    lam, dlam = delay_distribution(None, None, grid, params, delay_masses=masses)
    tmass = masses.sum(axis=1)
    inter = mean_field_interference(lam, tmass, state.interference, params)
    new = IterationState(
        policy=policy,
        interference=inter,
        mean_field=m,
        choice=choice,
        value=value,
        field=InterferenceField(lam=lam, dlam=dlam, interference=state.interference, transmitting_mass=tmass),
        grid=grid,
        clipped_mass=state.clipped_mass + clipped,
    )
    return new, change


def solve_mfdb(params, scenario, grid=None, m0=None, warm_start: IterationState | None = None):
    """Run the damped fixed-point loop until the policy stops moving.

    The returned field's ``interference`` is the one the final policy was
    computed against, so value, policy and interference are mutually
    consistent.  On non-convergence the iterate with the smallest change is
    returned with ``report.converged = False``.
    """
    start = time.perf_counter()
    if warm_start is not None:
        state = warm_start
    else:
        grid = build_grid(params, scenario) if grid is None else grid
        state = initial_state(params, scenario, grid, m0)
    changes: list[float] = []
    best = None
    converged = False
    for f in range(1, params.fp_max_iters + 1):
        new, change = iterate(state, params, scenario)
        changes.append(change)
        log.info("iteration %d: sup change %.3e s", f, change)
        # the first cold iteration compares against the arbitrary initial
        # policy, so it never counts as convergence
        counts = warm_start is not None or f > 1
        if counts and (best is None or change < best[1]):
            best = (new, change, f)
        if counts and change < params.fp_tolerance:
            converged = True
            state = new
            break
        state = new
    if not converged and best is not None:
        state = best[0]
    report = ConvergenceReport(
        converged=converged,
        iterations=len(changes),
        sup_changes=changes,
        residual=changes[-1] if converged or best is None else best[1],
        substeps_per_frame=state.grid.substeps_per_frame,
        runtime_s=time.perf_counter() - start,
        clipped_mass=state.clipped_mass,
    )
    return MFDBSolution(
        params=params,
        scenario=scenario,
        grid=state.grid,
        value=state.value,
        mean_field=state.mean_field,
        policy=state.policy,
        field=state.field,
        report=report,
    ), state
