"""Syscall events and the line-oriented trace format.

One JSON object per line, one line per hook (enter and exit are separate
records)::

    {"seq":1,"phase":"enter","pid":4100,"tid":4100,"comm":"com.example.test",
     "tname":"main","syscall":"openat","args":["0xffffffffffffff9c",...],
     "pc":"0x7a41c4a010","stack":["0x7a41c4a010"],
     "deref":{"1":{"kind":"str","value":"/proc/self/status"}},"ts":1000}

Addresses and registers are ``0x``-prefixed lowercase hex strings; ``retval``
is a signed decimal integer present only on exit records.  ``bytes`` deref
payloads are plain hex digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

MASK64 = (1 << 64) - 1
COMM_LEN = 15

# Pointer arguments whose payload is captured with the event, per syscall.
# Each entry is (arg index, kind, phase).
DEREF_CAPTURE = {
    "openat": [(1, "str", "enter")],
    "open": [(0, "str", "enter")],
    "faccessat": [(1, "str", "enter")],
    "readlinkat": [(1, "str", "enter")],
    "newfstatat": [(1, "str", "enter")],
    "execve": [(0, "str", "enter")],
    "connect": [(1, "bytes", "enter")],
    "mprotect": [(0, "bytes", "enter")],
    "read": [(1, "bytes", "exit")],
    "getdents64": [(1, "bytes", "exit")],
    "clock_gettime": [(1, "bytes", "exit")],
}


class TraceError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class Deref:
    kind: str
    value: str | bytes

    def __post_init__(self):
        if self.kind == "str" and not isinstance(self.value, str):
            raise TypeError("str deref needs a str value")
        if self.kind == "bytes" and not isinstance(self.value, bytes):
            raise TypeError("bytes deref needs a bytes value")
        if self.kind not in ("str", "bytes"):
            raise ValueError(f"unknown deref kind {self.kind!r}")

    @property
    def raw(self) -> bytes:
        if isinstance(self.value, bytes):
            return self.value
        return self.value.encode("utf-8", "surrogateescape")


@dataclass(frozen=True)
class SyscallEvent:
    seq: int
    phase: str
    pid: int
    tid: int
    comm: str
    tname: str
    syscall: str
    args: tuple[int, ...]
    retval: int | None = None
    pc: int = 0
    stack: tuple[int, ...] = ()
    deref: Mapping[int, Deref] = field(default_factory=dict)
    ts: int = 0

    def __post_init__(self):
        if self.phase not in ("enter", "exit"):
            raise ValueError(f"bad phase {self.phase!r}")
        if len(self.args) != 6:
            raise ValueError("an event carries exactly six argument registers")
        if any(not 0 <= a <= MASK64 for a in self.args):
            raise ValueError("argument registers are unsigned 64-bit values")
        if (self.retval is None) == (self.phase == "exit"):
            raise ValueError("retval is present iff phase is exit")
        if self.stack and self.stack[0] != self.pc:
            raise ValueError("stack[0] must equal pc")
        for i in self.deref:
            if not 0 <= i < 6:
                raise ValueError(f"deref index {i} outside 0..5")

    @property
    def is_enter(self) -> bool:
        return self.phase == "enter"

    def arg_str(self, index: int) -> str | None:
        d = self.deref.get(index)
        if d is None:
            return None
        return d.value if d.kind == "str" else d.raw.split(b"\0", 1)[0].decode("utf-8", "surrogateescape")


def _hex(v: int) -> str:
    return f"0x{v:x}"


def event_to_obj(ev: SyscallEvent) -> dict:
    obj = {
        "seq": ev.seq,
        "phase": ev.phase,
        "pid": ev.pid,
        "tid": ev.tid,
        "comm": ev.comm,
        "tname": ev.tname,
        "syscall": ev.syscall,
        "args": [_hex(a) for a in ev.args],
    }
    if ev.retval is not None:
        obj["retval"] = ev.retval
    obj["pc"] = _hex(ev.pc)
    if ev.stack:
        obj["stack"] = [_hex(a) for a in ev.stack]
    if ev.deref:
        obj["deref"] = {
            str(i): {"kind": d.kind, "value": d.value if d.kind == "str" else d.value.hex()}
            for i, d in sorted(ev.deref.items())
        }
    obj["ts"] = ev.ts
    return obj


def emit_trace(events: Iterable[SyscallEvent]) -> str:
    return "".join(json.dumps(event_to_obj(ev), separators=(",", ":")) + "\n" for ev in events)


_REQUIRED = ("seq", "phase", "pid", "tid", "comm", "tname", "syscall", "args", "pc", "ts")
_KNOWN = set(_REQUIRED) | {"retval", "stack", "deref"}


def _int(v, what):
    if not isinstance(v, int) or isinstance(v, bool):
        raise ValueError(f"{what} must be an integer")
    return v


def _addr(v, what) -> int:
    if not isinstance(v, str) or not v.startswith("0x"):
        raise ValueError(f"{what} must be a 0x-prefixed hex string")
    n = int(v, 16)
    if n > MASK64:
        raise ValueError(f"{what} exceeds 64 bits")
    return n


def event_from_obj(obj: dict) -> SyscallEvent:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    unknown = set(obj) - _KNOWN
    if unknown:
        raise ValueError(f"unknown field(s) {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {missing}")
    args = obj["args"]
    if not isinstance(args, list) or len(args) != 6:
        raise ValueError("args must be a list of six hex strings")
    deref = {}
    for key, d in (obj.get("deref") or {}).items():
        if not isinstance(d, dict) or set(d) != {"kind", "value"}:
            raise ValueError(f"deref {key} must be {{kind, value}}")
        if d["kind"] == "bytes":
            deref[int(key)] = Deref("bytes", bytes.fromhex(d["value"]))
        else:
            deref[int(key)] = Deref(d["kind"], d["value"])
    for k in ("comm", "tname", "syscall"):
        if not isinstance(obj[k], str):
            raise ValueError(f"{k} must be a string")
    retval = obj.get("retval")
    return SyscallEvent(
        seq=_int(obj["seq"], "seq"),
        phase=obj["phase"],
        pid=_int(obj["pid"], "pid"),
        tid=_int(obj["tid"], "tid"),
        comm=obj["comm"],
        tname=obj["tname"],
        syscall=obj["syscall"],
        args=tuple(_addr(a, "args") for a in args),
        retval=None if retval is None else _int(retval, "retval"),
        pc=_addr(obj["pc"], "pc"),
        stack=tuple(_addr(a, "stack") for a in obj.get("stack", [])),
        deref=deref,
        ts=_int(obj["ts"], "ts"),
    )


def check_order(events: Iterable[SyscallEvent]) -> None:
    """Validate seq monotonicity and enter/exit pairing; raise TraceError."""
    last = None
    pending: dict[tuple[int, int], SyscallEvent] = {}
    for n, ev in enumerate(events, 1):
        _check_one(ev, last, pending, n)
        last = ev.seq


def _check_one(ev, last_seq, pending, lineno):
    if last_seq is not None and ev.seq <= last_seq:
        raise TraceError(f"seq {ev.seq} is not greater than previous seq {last_seq}", lineno)
    key = (ev.pid, ev.tid)
    if ev.is_enter:
        # a call that never returns (exit_group, fatal signal) leaves no exit
        pending[key] = ev
        return
    enter = pending.pop(key, None)
    if enter is None:
        raise TraceError(f"exit of {ev.syscall} on tid {ev.tid} before its enter", lineno)
    if enter.syscall != ev.syscall or enter.args != ev.args:
        raise TraceError(
            f"exit of {ev.syscall} on tid {ev.tid} does not match pending enter of {enter.syscall}", lineno
        )


def parse_trace(source: str) -> list[SyscallEvent]:
    events = []
    pending: dict = {}
    last_seq = None
    for lineno, line in enumerate(source.splitlines(), 1):
        if not line.strip():
            continue
        try:
            ev = event_from_obj(json.loads(line))
        except (ValueError, TypeError) as exc:
            raise TraceError(f"malformed event: {exc}", lineno) from None
        _check_one(ev, last_seq, pending, lineno)
        last_seq = ev.seq
        events.append(ev)
    return events


def load_trace(path) -> list[SyscallEvent]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh.read())
