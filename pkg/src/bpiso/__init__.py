"""Branch-predictor isolation simulator.

Trace-driven models of Gshare/Tournament/TAGE predictor stacks with
key-based content and index encoding, flush baselines, side-channel attack
harnesses, and experiment drivers.
"""

from .core import (
    BranchKind,
    BranchRecord,
    Key,
    Mechanism,
    MechanismConfig,
    PhtEncoding,
    Privilege,
    ScheduleEvent,
    ThreadContext,
    codec_apply,
    generate_key,
    rotate_key,
)
from .engine import RunConfig, RunMetrics, RunMode, compare_runs, run_trace

__version__ = "0.1.0"

__all__ = [
    "BranchKind",
    "BranchRecord",
    "Key",
    "Mechanism",
    "MechanismConfig",
    "PhtEncoding",
    "Privilege",
    "RunConfig",
    "RunMetrics",
    "RunMode",
    "ScheduleEvent",
    "ThreadContext",
    "codec_apply",
    "compare_runs",
    "generate_key",
    "rotate_key",
    "run_trace",
    "__version__",
]
