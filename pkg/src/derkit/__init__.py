"""Rule-driven syscall evasion engine with an assisted-analysis region mapper."""

from .der import DerRule, parse_der_file, serialize_der
from .engine import Engine, TraceSource, run
from .events import SyscallEvent, emit_trace, parse_trace
from .memory import AddressSpace, Perm

__version__ = "0.1.0"

__all__ = [
    "AddressSpace",
    "DerRule",
    "Engine",
    "Perm",
    "SyscallEvent",
    "TraceSource",
    "emit_trace",
    "parse_der_file",
    "parse_trace",
    "run",
    "serialize_der",
]
