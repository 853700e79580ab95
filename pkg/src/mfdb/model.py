"""Physical quantities and pointwise equations shared by the solver and the simulator.

Everything here is a pure function of its arguments; random draws take an
explicit ``numpy.random.Generator``.  The channel state throughout the package
is the *combined* effective power gain ``H = |w^H h|^2 * l`` of a device, so the
path loss never appears as a separate state variable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import integrate

__all__ = [
    "SystemParams",
    "ChannelScenario",
    "ConfigError",
    "DomainError",
    "dbm_to_watts",
    "path_loss",
    "terminal_penalty",
    "instantaneous_cost",
    "required_power",
    "transmit_power",
    "sinr",
    "energy_step",
    "channel_step",
    "beta_closed_form",
    "beta_integral_oracle",
    "beta_printed_formula",
    "SIGMA_UNIT",
    "scenario_preset",
    "SCENARIO_NAMES",
]


class ConfigError(ValueError):
    """A parameter set or scenario violates one of its invariants."""


class DomainError(ValueError):
    """A pointwise function was called outside its mathematical domain."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


#: Reference combined gain used to derive energy and power defaults.
REFERENCE_GAIN = 3e-3


@dataclass(frozen=True)
class SystemParams:
    """Scalar constants of the system plus solver and protocol knobs.

    ``energy_ref``, ``penalty_scale``, ``fixed_power``, ``fp_tolerance`` and
    ``kernel_bandwidth`` default to ``None`` and are filled in from the other
    fields (see ``resolved``); the stored object always has concrete values.
    """

    frames: int = 20
    frame_duration: float = 10e-3
    slots_per_frame: int = 20
    slot_duration: float = 0.5e-3
    path_loss_exp: float = 2.5
    noise_power: float = dbm_to_watts(-104.0)
    bandwidth: float = 50e3
    device_density: float = 5.0
    sinr_threshold: float = 0.5
    device_count: int = 1000
    cluster_radius: float = 0.45
    interference_factor: float | None = None
    max_power: float = 0.2
    energy_ref: float | None = None
    tx_energy_fraction: float = 0.03
    penalty_scale: float | None = None
    penalty_steepness: float = 100.0
    acb_factor: float = 0.5
    fixed_power: float | None = None
    fixed_power_margin: float = 4.0
    decode_capacity: int | None = None
    power_margin: float = 1.25
    fp_tolerance: float | None = None
    fp_max_iters: int = 50
    kernel_bandwidth: float | None = None
    damping: float = 0.5
    choice_temperature: float = 0.1

    def __post_init__(self) -> None:
        p0 = self.reference_power
        if self.energy_ref is None:
            object.__setattr__(
                self,
                "energy_ref",
                self.power_margin * p0 * self.slot_duration / self.tx_energy_fraction,
            )
        if self.penalty_scale is None:
            object.__setattr__(
                self, "penalty_scale", 2.0 * self.frames * self.max_delay**2
            )
        if self.fixed_power is None:
            object.__setattr__(self, "fixed_power", self.fixed_power_margin * p0)
        if self.fp_tolerance is None:
            object.__setattr__(self, "fp_tolerance", 1e-3 * self.max_delay)
        if self.kernel_bandwidth is None:
            object.__setattr__(self, "kernel_bandwidth", self.slot_duration)
        self.validate()

    @property
    def reference_power(self) -> float:
        """Zero-interference required power at the reference gain."""
        return self.sinr_threshold * self.noise_power / REFERENCE_GAIN

    @property
    def target_sinr(self) -> float:
        """SINR that power-controlled devices aim for, threshold times margin."""
        return self.power_margin * self.sinr_threshold

    @property
    def horizon(self) -> float:
        return self.frames * self.frame_duration

    @property
    def max_delay(self) -> float:
        return self.slots_per_frame * self.slot_duration

    @property
    def beta(self) -> float:
        return beta_closed_form(self.device_density, self.path_loss_exp, self.cluster_radius)

    def validate(self) -> None:
        if self.frames < 1 or self.slots_per_frame < 1:
            raise ConfigError("frames and slots_per_frame must be positive")
        if not math.isclose(
            self.frame_duration, self.slots_per_frame * self.slot_duration, rel_tol=1e-12
        ):
            raise ConfigError(
                "frame_duration must equal slots_per_frame * slot_duration "
                f"({self.frame_duration} != {self.slots_per_frame} * {self.slot_duration})"
            )
        if not self.path_loss_exp > 2:
            raise ConfigError("path_loss_exp must be > 2")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")
        if not self.choice_temperature >= 0:
            raise ConfigError("choice_temperature must be >= 0")
        if not self.fp_tolerance > 0:
            raise ConfigError("fp_tolerance must be > 0")
        if not self.sinr_threshold > 0:
            raise ConfigError("sinr_threshold must be > 0")
        for name in ("noise_power", "max_power", "energy_ref", "fixed_power", "penalty_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.energy_ref > 0:
            raise ConfigError("energy_ref must be > 0")
        if self.interference_factor is not None and not self.interference_factor >= 0:
            raise ConfigError("interference_factor must be >= 0")
        if not self.kernel_bandwidth > 0:
            raise ConfigError("kernel_bandwidth must be > 0")
        if self.device_count < 1:
            raise ConfigError("device_count must be >= 1")
        if not self.power_margin >= 1:
            raise ConfigError("power_margin must be >= 1")
        if self.decode_capacity is not None and self.decode_capacity < 1:
            raise ConfigError("decode_capacity must be >= 1")
        if self.fp_max_iters < 1:
            raise ConfigError("fp_max_iters must be >= 1")

    def replace(self, **changes) -> "SystemParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class ChannelScenario:
    """Deterministic gain trajectory ``H_c + A sin(f0 t + theta)`` plus diffusion."""

    base_gain: float = REFERENCE_GAIN
    amplitude: float = 0.0
    angular_freq: float = 0.0
    phase: float = 0.0
    sigma: float = 0.0
    initial_gain: float | None = None
    name: str = field(default="cc", compare=False)

    def __post_init__(self) -> None:
        if self.initial_gain is None:
            object.__setattr__(self, "initial_gain", float(self.deterministic_gain(0.0)))
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")

    def deterministic_gain(self, t):
        return self.base_gain + self.amplitude * np.sin(self.angular_freq * np.asarray(t) + self.phase)

    def drift(self, t):
        """Signed drift ``dH_d/dt``."""
        return self.amplitude * self.angular_freq * np.cos(self.angular_freq * np.asarray(t) + self.phase)

    def gain_range(self, horizon: float, samples: int = 2001) -> tuple[float, float]:
        t = np.linspace(0.0, horizon, samples)
        h = self.deterministic_gain(t)
        return float(h.min()), float(h.max())

    def check_positive(self, horizon: float) -> None:
        lo, _ = self.gain_range(horizon)
        if not lo > 0:
            raise ConfigError(f"deterministic gain trajectory leaves (0, inf): min {lo:g}")

    def to_dict(self) -> dict:
        return asdict(self)


#: Gain units (per sqrt(second)) of one unit of the uncertainty level used by
#: the named scenarios h1..h4 and dc.
SIGMA_UNIT = 1e-3

SCENARIO_NAMES = ("cc", "dc", "h1", "h2", "h3", "h4")


def scenario_preset(name: str) -> ChannelScenario:
    """Named channel scenarios: constant (cc), fast dynamic (dc), and h1..h4."""
    sine = dict(base_gain=3e-3, amplitude=2e-3, phase=2.0)
    levels = {"h1": 0.0, "h2": 0.1, "h3": 1.0, "h4": 10.0}
    if name == "cc":
        return ChannelScenario(base_gain=3e-3, name="cc")
    if name == "dc":
        return ChannelScenario(angular_freq=20.0, sigma=0.1 * SIGMA_UNIT, name="dc", **sine)
    if name in levels:
        return ChannelScenario(angular_freq=0.4, sigma=levels[name] * SIGMA_UNIT, name=name, **sine)
    raise ConfigError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}")


def path_loss(r, a):
    """``min(1, r^-a)``; distances inside one meter are not amplified."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.minimum(1.0, np.where(r > 0, r, 1.0) ** (-a))
    return out if out.ndim else float(out)


def terminal_penalty(energy, scale, steepness):
    """Logistic terminal cost, zero at empty battery, decreasing in leftover energy."""
    x = -steepness * np.asarray(energy, dtype=float)
    # scale / (1 + e^{k E}) written via the numerically stable logistic
    out = scale * 0.5 * (1.0 + np.tanh(0.5 * x)) - 0.5 * scale
    return out if np.ndim(out) else float(out)


def instantaneous_cost(delay):
    return np.square(delay)


def required_power(gain, interference, noise, threshold):
    gain = np.asarray(gain, dtype=float)
    if np.any(gain <= 0):
        raise DomainError("effective gain must be > 0")
    out = threshold * (np.asarray(interference) + noise) / gain
    return out if np.ndim(out) else float(out)


def transmit_power(p_req, p_max):
    """Required power, or zero when it exceeds the device maximum (packet dropped)."""
    p_req = np.asarray(p_req, dtype=float)
    out = np.where(p_req <= p_max, p_req, 0.0)
    return out if out.ndim else float(out)


def sinr(gain, power, interference, noise):
    out = np.asarray(gain) * np.asarray(power) / (np.asarray(interference) + noise)
    return out if np.ndim(out) else float(out)


def energy_step(energy, power, params: SystemParams):
    """Normalized energy after one slot of transmission at ``power``.

    A device whose battery cannot cover the slot does not transmit, so its
    energy is returned unchanged.
    """
    cost = np.asarray(power) * params.slot_duration / params.energy_ref
    energy = np.asarray(energy, dtype=float)
    out = np.where(cost <= energy, energy - cost, energy)
    return out if out.ndim else float(out)


def channel_step(gain, t, scenario: ChannelScenario, dt, rng, h_min=-np.inf, h_max=np.inf):
    """One Euler-Maruyama step of the gain SDE, reflected into ``[h_min, h_max]``."""
    gain = np.asarray(gain, dtype=float)
    nxt = gain + scenario.drift(t) * dt
    if scenario.sigma > 0:
        nxt = nxt + scenario.sigma * math.sqrt(dt) * rng.standard_normal(gain.shape)
    if np.isfinite(h_min) and np.isfinite(h_max):
        nxt = _reflect(nxt, h_min, h_max)
    else:
        nxt = np.clip(nxt, h_min, h_max)
    return nxt if nxt.ndim else float(nxt)


def _reflect(x, lo, hi):
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


def _check_beta_domain(a, r_m, rho):
    if not a > 2:
        raise DomainError("path loss exponent must be > 2 for the interference factor")
    if not (r_m > 0 and rho > 0):
        raise DomainError("density and cluster radius must be > 0")


def beta_closed_form(rho, a, r_m):
    """Interference factor: cluster population times the mean path loss over the disc."""
    _check_beta_domain(a, r_m, rho)
    if r_m <= 1:
        return rho * math.pi * r_m**2
    return rho * math.pi * (1.0 + (2.0 / (a - 2.0)) * (1.0 - r_m ** (2.0 - a)))


def beta_integral_oracle(rho, a, r_m):
    """Same quantity by adaptive quadrature of the mean path loss over the disc."""
    _check_beta_domain(a, r_m, rho)

    def integrand(r):
        return min(1.0, r ** (-a)) * 2.0 * math.pi * r if r > 0 else 0.0

    pieces = [(0.0, min(1.0, r_m))]
    if r_m > 1:
        pieces.append((1.0, r_m))
    total = sum(
        integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)[0]
        for lo, hi in pieces
    )
    mean_loss = total / (math.pi * r_m**2)
    return mean_loss * rho * math.pi * r_m**2


def beta_printed_formula(rho, a, r_m):
    """The closed form as typeset in the source derivation (kept for the check report)."""
    _check_beta_domain(a, r_m, rho)
    return rho * math.pi * (1.0 + 2.0 / (a - 2.0) - r_m ** (2.0 - a))
