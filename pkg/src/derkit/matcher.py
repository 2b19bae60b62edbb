"""Decide whether a DER condition matches one syscall event."""

from __future__ import annotations

from dataclasses import dataclass, field

from .der import DerRule, PathPrefix, RawValue, Wildcard
from .events import COMM_LEN, SyscallEvent
from .memory import AddressSpace, MemoryFault


@dataclass
class MatchResult:
    matched: bool
    rule_id: str
    bindings: dict = field(default_factory=dict)
    reasons: list = field(default_factory=list)

    def failed(self) -> list:
        return [r for r in self.reasons if not r[1]]


def _comm_key(name: str) -> bytes:
    return name.encode("utf-8", "surrogateescape")[:COMM_LEN]


def _deref_bytes(event: SyscallEvent, addr: int, length: int) -> bytes | None:
    for i, d in event.deref.items():
        base = event.args[i]
        raw = d.raw
        if base <= addr and addr + length <= base + len(raw):
            return raw[addr - base : addr - base + length]
    return None


def _read_string(event, index, space, prefer_deref) -> bytes | None:
    d = event.deref.get(index)
    if prefer_deref and d is not None:
        return d.raw.split(b"\0", 1)[0]
    if space is not None:
        try:
            return space.read_c_string(event.args[index]).encode("utf-8", "surrogateescape")
        except MemoryFault:
            pass
    if d is not None:
        return d.raw.split(b"\0", 1)[0]
    return None


def _read_data(event, addr, length, space, prefer_deref) -> bytes | None:
    if prefer_deref:
        got = _deref_bytes(event, addr, length)
        if got is not None:
            return got
    if space is not None:
        try:
            return space.read_bytes(addr, length)
        except MemoryFault:
            pass
    return _deref_bytes(event, addr, length)


def match_rule(
    rule: DerRule,
    event: SyscallEvent,
    space: AddressSpace | None,
    *,
    prefer_deref: bool = False,
) -> MatchResult:
    """Evaluate every present condition field; all must pass.

    With ``prefer_deref`` (trace replay) captured payloads take precedence
    over the address space, otherwise they are only a fallback when live
    memory cannot be read.  Dereference failures never raise.
    """
    cond = rule.condition
    res = MatchResult(False, rule.id)
    reasons = res.reasons

    if event.phase != cond.phase:
        reasons.append(("phase", False, f"rule fires at {cond.phase}"))
        return res

    if cond.comm is not None:
        reasons.append(("comm", _comm_key(cond.comm) == _comm_key(event.comm), event.comm))
    if cond.tname is not None:
        reasons.append(("tname", cond.tname == "*" or cond.tname == event.tname, event.tname))
    reasons.append(("syscall", cond.syscall == event.syscall, event.syscall))

    for index, spec in cond.args.items():
        name = f"args.{index}"
        if isinstance(spec, Wildcard):
            reasons.append((name, True, "wildcard"))
        elif isinstance(spec, RawValue):
            reasons.append((name, spec.matches(event.args[index]), f"0x{event.args[index]:x}"))
        elif isinstance(spec, PathPrefix):
            got = _read_string(event, index, space, prefer_deref)
            if got is None:
                reasons.append((name, False, "deref-failed"))
            else:
                ok = got.startswith(spec.prefix.encode("utf-8", "surrogateescape"))
                reasons.append((name, ok, got.decode("utf-8", "replace")))

    if cond.data is not None:
        addr = cond.data_address_expr.evaluate(event.args)
        res.bindings["data_where"] = addr
        pattern = cond.data.pattern
        got = _read_data(event, addr, len(pattern), space, prefer_deref)
        if got is None:
            reasons.append(("data", False, "deref-failed"))
        else:
            reasons.append(("data", got == pattern, got.hex()))

    res.matched = all(ok for _, ok, _ in reasons)
    return res
