"""Desk-scale hybrid HPC + quantum middleware.

A gateway schedules jobs onto a control-node broker that owns an emulated
superconducting QPU; a compile toolchain lowers OpenQASM 2.0 onto the
device basis and coupling map; engines execute scheduled programs either
as timing-faithful no-ops (echo) or by statevector simulation.
"""

from .errors import QhqError

__version__ = "0.1.0"

__all__ = ["QhqError", "__version__"]
