"""Mean-field dynamic backoff for grant-free uplink access.

``model`` holds the physical equations, ``solver`` the coupled value/density
fixed point, ``sim`` the Monte Carlo protocol simulator, ``io`` the file
formats and ``cli`` the command-line entry point.
"""

from .model import ChannelScenario, ConfigError, SystemParams, scenario_preset
from .solver import MFDBSolution, build_grid, solve_mfdb

__all__ = [
    "ChannelScenario",
    "ConfigError",
    "SystemParams",
    "scenario_preset",
    "MFDBSolution",
    "build_grid",
    "solve_mfdb",
]

__version__ = "0.1.0"
