"""Data-pointer tagging (DPT) capability simulator for a small SSA IR."""

from .instrument import ProtectionPlan, instrument, make_plan
from .machine import MachineConfig, RunResult, Violation, run
from .mini_ir import IrError, format_program, parse_file, parse_program

__version__ = "0.1.0"

__all__ = [
    "IrError",
    "MachineConfig",
    "ProtectionPlan",
    "RunResult",
    "Violation",
    "format_program",
    "instrument",
    "make_plan",
    "parse_file",
    "parse_program",
    "run",
]
