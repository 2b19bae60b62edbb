"""Assisted analysis: which memory region issued which syscall.

The region table is rebuilt from mmap/mprotect/munmap exits as the trace
is walked, so a region created mid-run by an unpacking stage captures the
syscalls issued from it afterwards.  Every other call is attributed at its
enter record by caller address (``pc`` by default, or a deeper stack frame).
"""

from __future__ import annotations

import ipaddress
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .events import SyscallEvent
from .memory import MAPPING_SYSCALLS, AddressSpace, Perm, apply_syscall_effect

# syscall -> (pointer arg index, display name) for path-taking calls
PATH_ARGS = {
    "openat": (1, "pathname"),
    "open": (0, "pathname"),
    "faccessat": (1, "pathname"),
    "readlinkat": (1, "pathname"),
    "newfstatat": (1, "pathname"),
    "execve": (0, "filename"),
}

PRINCIPLES = (
    "file-based",
    "activity-based",
    "memory-based",
    "timer-based",
    "network-based",
    "java-framework",
    "misc-native",
)
PATTERN_KINDS = ("path", "prefix", "regex", "port", "addr", "syscall")

AF_INET = 2
AF_INET6 = 10


@dataclass
class RegionEntry:
    start: int
    end: int
    display_end: int
    perms: Perm
    origin: str
    events: list[SyscallEvent] = field(default_factory=list)

    def header(self, index: int) -> str:
        return f"[region {index}] 0x{self.start:x} - 0x{self.display_end:x} ({self.perms})"


@dataclass
class RegionSyscallMap:
    regions: list[RegionEntry]
    unattributed: list[SyscallEvent]

    def all_events(self) -> list[SyscallEvent]:
        evs = [ev for r in self.regions for ev in r.events] + self.unattributed
        return sorted(evs, key=lambda e: e.seq)

    def region_of(self, seq: int) -> RegionEntry | None:
        for r in self.regions:
            if any(ev.seq == seq for ev in r.events):
                return r
        return None


def caller_address(event: SyscallEvent, frame: int = 0) -> int | None:
    if frame == 0:
        return event.pc
    if frame < len(event.stack):
        return event.stack[frame]
    return None


def build_map(events: Iterable[SyscallEvent], frame: int = 0) -> RegionSyscallMap:
    space = AddressSpace()
    entries: dict[tuple, RegionEntry] = {}
    unattributed = []

    def entry_for(r) -> RegionEntry:
        key = r.key()
        e = entries.get(key)
        if e is None:
            e = entries[key] = RegionEntry(r.start, r.end, r.display_end, r.perms, r.origin)
        return e

    for ev in events:
        if ev.syscall in MAPPING_SYSCALLS:
            apply_syscall_effect(space, ev)
            continue
        if not ev.is_enter:
            continue
        addr = caller_address(ev, frame)
        region = space.find(addr) if addr is not None else None
        if region is None:
            unattributed.append(ev)
        else:
            entry_for(region).events.append(ev)
    for r in space.regions:
        entry_for(r)
    ordered = sorted(entries.values(), key=lambda e: (e.start, e.end, int(e.perms), e.origin))
    return RegionSyscallMap(ordered, unattributed)


def format_event(ev: SyscallEvent) -> str:
    spec = PATH_ARGS.get(ev.syscall)
    if spec is not None:
        index, name = spec
        path = ev.arg_str(index)
        shown = f"0x{ev.args[index]:x}" + (f"({path})" if path is not None else "")
        return f"{ev.syscall}(*{name}={shown})"
    return f"{ev.syscall}(" + ", ".join(f"arg{i}=0x{a:x}" for i, a in enumerate(ev.args)) + ")"


def render_report(rmap: RegionSyscallMap) -> str:
    lines = []
    for i, entry in enumerate(rmap.regions):
        lines.append(entry.header(i))
        lines.extend(format_event(ev) for ev in entry.events)
    if rmap.unattributed:
        lines.append("[unattributed]")
        lines.extend(format_event(ev) for ev in rmap.unattributed)
    return "".join(line + "\n" for line in lines)


# -- suspicion catalog -------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    principle: str
    kind: str
    pattern: str
    note: str = ""


@dataclass(frozen=True)
class SuspicionFlag:
    event: SyscallEvent
    principle: str
    artifact: str
    note: str


class CatalogError(ValueError):
    pass


def parse_catalog(text: str) -> list[CatalogEntry]:
    """Parse ``principle<TAB>kind<TAB>pattern[<TAB>note]`` records; ``#`` starts a comment line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise CatalogError(f"line {lineno}: expected 3 or 4 tab-separated columns")
        principle, kind, pattern = cols[:3]
        if principle not in PRINCIPLES:
            raise CatalogError(f"line {lineno}: unknown principle {principle!r}")
        if kind not in PATTERN_KINDS:
            raise CatalogError(f"line {lineno}: unknown pattern kind {kind!r}")
        if not pattern:
            raise CatalogError(f"line {lineno}: empty pattern")
        if kind == "regex":
            try:
                re.compile(pattern)
            except re.error as exc:
                raise CatalogError(f"line {lineno}: bad regex: {exc}") from None
        if kind == "port" and not pattern.isdigit():
            raise CatalogError(f"line {lineno}: port must be a number")
        out.append(CatalogEntry(principle, kind, pattern, cols[3] if len(cols) == 4 else ""))
    return out


def default_catalog() -> list[CatalogEntry]:
    text = resources.files("derkit.data").joinpath("catalog.tsv").read_text(encoding="utf-8")
    return parse_catalog(text)


def load_catalog(path) -> list[CatalogEntry]:
    with open(path, encoding="utf-8") as fh:
        return parse_catalog(fh.read())


def sockaddr(raw: bytes) -> tuple[str, int] | None:
    """Destination (address, port) of a sockaddr_in / sockaddr_in6 buffer."""
    if len(raw) < 8:
        return None
    family = struct.unpack_from("<H", raw)[0]
    port = struct.unpack_from(">H", raw, 2)[0]
    if family == AF_INET:
        return str(ipaddress.IPv4Address(raw[4:8])), port
    if family == AF_INET6 and len(raw) >= 24:
        return str(ipaddress.IPv6Address(raw[8:24])), port
    return None


def _entry_matches(entry: CatalogEntry, ev: SyscallEvent) -> bool:
    kind = entry.kind
    if kind == "syscall":
        return ev.syscall == entry.pattern
    if kind in ("path", "prefix", "regex"):
        spec = PATH_ARGS.get(ev.syscall)
        path = ev.arg_str(spec[0]) if spec else None
        if path is None:
            return False
        if kind == "path":
            return path == entry.pattern
        if kind == "prefix":
            return path.startswith(entry.pattern)
        return re.search(entry.pattern, path) is not None
    if ev.syscall != "connect" or 1 not in ev.deref:
        return False
    dest = sockaddr(ev.deref[1].raw)
    if dest is None:
        return False
    if kind == "port":
        return dest[1] == int(entry.pattern)
    return dest[0] == entry.pattern


def flag_suspicious(rmap: RegionSyscallMap, catalog: Sequence[CatalogEntry] | None = None) -> list[SuspicionFlag]:
    """One flag per event, citing the first catalog entry it matches."""
    if catalog is None:
        catalog = default_catalog()
    flags = []
    for ev in rmap.all_events():
        for entry in catalog:
            if _entry_matches(entry, ev):
                flags.append(SuspicionFlag(ev, entry.principle, entry.pattern, entry.note))
                break
    return flags
