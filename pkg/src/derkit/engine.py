"""Runtime evasion engine: match DERs against syscall events and act on them."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .der import DerRule
from .events import SyscallEvent
from .matcher import match_rule
from .memory import AddressSpace, MemoryFault, ProtectionFault, apply_syscall_effect

log = logging.getLogger(__name__)

ARG_REWRITE = "arg-buffer-rewrite"
MEMORY_PATCH = "memory-patch"
RETVAL_OVERRIDE = "retval-override"
REVERT = "revert"


@dataclass(frozen=True)
class Action:
    event_seq: int
    phase: str
    tid: int
    syscall: str
    rule_id: str
    action: str
    address: int | None
    byte_len: int
    outcome: str
    retval: int | None = None
    detail: str = ""

    @property
    def applied(self) -> bool:
        return self.outcome == "applied"

    def to_obj(self) -> dict:
        obj = {
            "seq": self.event_seq,
            "phase": self.phase,
            "tid": self.tid,
            "syscall": self.syscall,
            "rule": self.rule_id,
            "action": self.action,
            "address": None if self.address is None else f"0x{self.address:x}",
            "len": self.byte_len,
            "outcome": self.outcome,
        }
        if self.retval is not None:
            obj["retval"] = self.retval
        if self.detail:
            obj["detail"] = self.detail
        return obj


def export_log(actions: Iterable[Action]) -> str:
    return "".join(json.dumps(a.to_obj(), separators=(",", ":")) + "\n" for a in actions)


class Engine:
    """Applies a rule set to a stream of events against one address space.

    ``process`` is the entry point for event sources; ``on_syscall_enter`` and
    ``on_syscall_exit`` are the two hooks a kernel backend would call.
    """

    def __init__(self, rules: Sequence[DerRule], space: AddressSpace, *, prefer_deref: bool = False):
        self.rules = list(rules)
        self.space = space
        self.prefer_deref = prefer_deref
        self.log: list[Action] = []
        self._pending: dict[tuple[int, int], list] = {}

    def _entry(self, event, rule_id, action, address, length, outcome, **kw) -> Action:
        a = Action(event.seq, event.phase, event.tid, event.syscall, rule_id, action, address, length, outcome, **kw)
        self.log.append(a)
        return a

    def _fire(self, rule: DerRule, event: SyscallEvent) -> Action:
        ev = rule.evasion
        if ev.is_retval:
            return self._entry(event, rule.id, RETVAL_OVERRIDE, None, 0, "applied", retval=ev.data)
        addr = ev.where.evaluate(event.args)
        payload = ev.data.to_bytes()
        kind = ARG_REWRITE if ev.where.single_arg is not None else MEMORY_PATCH
        try:
            record = self.space.write_bytes(addr, payload, rule.id, event.seq)
        except MemoryFault as exc:
            reason = "not-writable" if isinstance(exc, ProtectionFault) else "unmapped"
            log.info("rule %s: write of %d bytes at 0x%x denied (%s)", rule.id, len(payload), addr, reason)
            return self._entry(event, rule.id, kind, addr, len(payload), "denied", detail=reason)
        if ev.revert_on_exit:
            self._pending.setdefault((event.pid, event.tid), []).append((rule.id, record, event.syscall))
        return self._entry(event, rule.id, kind, addr, len(payload), "applied")

    def _matching(self, event: SyscallEvent):
        for rule in self.rules:
            if rule.condition.phase != event.phase:
                continue
            res = match_rule(rule, event, self.space, prefer_deref=self.prefer_deref)
            if res.matched:
                yield rule
            elif log.isEnabledFor(logging.DEBUG):
                log.debug("rule %s vs seq %d: %s", rule.id, event.seq, res.failed())

    def on_syscall_enter(self, event: SyscallEvent) -> list[Action]:
        # an enter left pending by a call that never returned is dropped
        self._pending.pop((event.pid, event.tid), None)
        return [self._fire(rule, event) for rule in self._matching(event)]

    def on_syscall_exit(self, event: SyscallEvent) -> list[Action]:
        actions = []
        for rule_id, record, _ in reversed(self._pending.pop((event.pid, event.tid), [])):
            try:
                self.space.revert_patch(record)
                outcome = "applied"
            except MemoryFault:
                outcome = "failed"
            actions.append(self._entry(event, rule_id, REVERT, record.address, len(record.new_bytes), outcome))
        actions.extend(self._fire(rule, event) for rule in self._matching(event))
        return actions

    def process(self, event: SyscallEvent) -> SyscallEvent:
        """Run the hook for this event; return it as delivered (retval may change)."""
        if event.is_enter:
            self.on_syscall_enter(event)
            return event
        actions = self.on_syscall_exit(event)
        overrides = [a.retval for a in actions if a.action == RETVAL_OVERRIDE]
        if overrides:
            return dataclasses.replace(event, retval=overrides[-1])
        return event


class EventSource(Protocol):
    """Something that produces syscall events against an address space.

    ``drive`` hands each event to ``engine.process`` in seq order (or skips
    the engine entirely when it is None) and applies the syscall's own side
    effects between the enter and exit hooks.
    """

    space: AddressSpace
    prefer_deref: bool

    def drive(self, engine: Engine | None) -> list[SyscallEvent]: ...


class TraceSource:
    """Replays a recorded trace into a reconstructed address space.

    Mapping syscalls rebuild the region table at their exit; captured deref
    payloads are copied into the space wherever their range is mapped.
    """

    prefer_deref = True

    def __init__(self, events: Sequence[SyscallEvent]):
        self.events = list(events)
        self.space = AddressSpace()

    def _inject(self, event: SyscallEvent) -> None:
        for i, d in event.deref.items():
            raw = d.raw + (b"\0" if d.kind == "str" else b"")
            if self.space.is_mapped(event.args[i], len(raw)):
                self.space.poke(event.args[i], raw)

    def drive(self, engine: Engine | None) -> list[SyscallEvent]:
        delivered = []
        for ev in self.events:
            if not ev.is_enter:
                apply_syscall_effect(self.space, ev)
            self._inject(ev)
            delivered.append(engine.process(ev) if engine is not None else ev)
        return delivered


@dataclass
class RunResult:
    log: list[Action]
    space: AddressSpace
    events: list[SyscallEvent]


def run(rules: Sequence[DerRule] | None, source: EventSource) -> RunResult:
    """Drive a source through the engine; ``rules=None`` runs with no engine at all."""
    engine = None
    if rules is not None:
        engine = Engine(rules, source.space, prefer_deref=source.prefer_deref)
    events = source.drive(engine)
    return RunResult(engine.log if engine else [], source.space, events)
