"""Scripted anti-analysis checks, one per scenario.

Each script plays the packer side: it issues syscalls through the
simulated process and calls ``detect`` when it spots the analysis
environment.  Call sites sit inside the packer library (or the decrypted
stage for ``suicide_stub``) so the region mapper attributes them there.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Callable

from .sim import (
    AF_INET,
    AT_FDCWD,
    CLOCK_MONOTONIC,
    F_OK,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_PRIVATE,
    O_DIRECTORY,
    O_RDONLY,
    PACKER_BASE,
    PROT_EXEC,
    PROT_READ,
    PROT_WRITE,
    PTRACE_TRACEME,
    SIGKILL,
    SOCK_STREAM,
    SimProcess,
    timespec_ns,
)

# caller frame shared by the packer's check routines
CHECKER = PACKER_BASE + 0x2F00

STAGE2_BASE = 0x7A41C45000
STAGE2_SIZE = 0xDE5C0
STAGE2_STUB_OFFSET = 0x6AAE4
# mov x8, #0x81 (__NR_kill); svc #0
KILL_STUB = bytes.fromhex("281080d2010000d4")

TIMING_THRESHOLD_NS = 50_000_000
SUSPICIOUS_THREADS = {"gum-js-loop", "pool-frida", "gmain", "gdbus"}


@dataclass(frozen=True)
class Scenario:
    name: str
    principle: str
    description: str
    reaction: str
    probes: tuple[str, ...]
    script: Callable[[SimProcess], None] | None
    supported: bool = True


def _site(off: int) -> dict:
    return {"pc": PACKER_BASE + off, "caller": CHECKER}


def _open(p: SimProcess, path: str, off: int, flags: int = O_RDONLY) -> int:
    return p.call("openat", AT_FDCWD, p.cstr(path), flags, 0, **_site(off))


def _read(p: SimProcess, fd: int, off: int, size: int = 4096, syscall: str = "read") -> bytes:
    buf = p.alloc(size)
    n = p.call(syscall, fd, buf, size, **_site(off))
    return p.load(buf, n) if n > 0 else b""


def _slurp(p: SimProcess, path: str, off: int) -> bytes | None:
    fd = _open(p, path, off)
    if fd < 0:
        return None
    data = _read(p, fd, off + 0x20)
    p.call("close", fd, **_site(off + 0x40))
    return data


def tracerpid(p: SimProcess) -> None:
    text = _slurp(p, "/proc/self/status", 0x1A10)
    m = re.search(rb"TracerPid:\s*(\d+)", text or b"")
    if m and int(m.group(1)) != 0:
        p.detect("TracerPid nonzero", m.group(0).decode(), "graceful")


def wchan_probe(p: SimProcess) -> None:
    data = _slurp(p, "/proc/self/wchan", 0x1B10)
    if data and data.startswith(b"ptrace_stop"):
        p.detect("debugger wait channel", data.decode(errors="replace"), "crash")


def frida_artifact(p: SimProcess) -> None:
    path = "/data/local/tmp/frida-server"
    if p.call("faccessat", AT_FDCWD, p.cstr(path), F_OK, 0, **_site(0x1C10)) == 0:
        p.detect("frida-server binary present", path, "graceful")


def magisk_path(p: SimProcess) -> None:
    fd = _open(p, "/sbin/.magisk", 0x1D10)
    if fd >= 0:
        p.detect("Magisk artifact present", "/sbin/.magisk", "crash")


def task_stat_scan(p: SimProcess) -> None:
    fd = _open(p, "/proc/self/task", 0x1E10, O_DIRECTORY)
    if fd < 0:
        return
    names = _read(p, fd, 0x1E30, syscall="getdents64").split(b"\0")
    p.call("close", fd, **_site(0x1E50))
    for tid in (n.decode() for n in names if n):
        stat = _slurp(p, f"/proc/self/task/{tid}/stat", 0x1E70)
        m = re.match(rb"\d+ \((.*)\) ", stat or b"")
        if m and m.group(1).decode() in SUSPICIOUS_THREADS:
            p.detect("instrumentation thread", m.group(1).decode(), "graceful")


def proc_scan(p: SimProcess) -> None:
    fd = _open(p, "/proc", 0x1F10, O_DIRECTORY)
    if fd < 0:
        return
    names = _read(p, fd, 0x1F30, syscall="getdents64").split(b"\0")
    p.call("close", fd, **_site(0x1F50))
    for pid in (n.decode() for n in names if n.isdigit()):
        if int(pid) == p.pid:
            continue
        cmdline = _slurp(p, f"/proc/{pid}/cmdline", 0x1F70) or b""
        for needle in (b"frida-server", b"magiskd"):
            if needle in cmdline:
                p.detect("analysis process running", cmdline.rstrip(b"\0").decode(), "crash")


def maps_scan(p: SimProcess) -> None:
    data = _slurp(p, "/proc/self/maps", 0x2010) or b""
    i = data.find(b"frida-agent")
    if i >= 0:
        line = data[data.rfind(b"\n", 0, i) + 1 : data.find(b"\n", i)]
        p.detect("injected agent in maps", line.decode(), "crash")


def suicide_stub(p: SimProcess) -> None:
    """Two-stage release: decrypt into rw- memory, flip to r-x, run it.

    The decrypted stage starts with a kill() wrapper and inlines the same
    sequence at STAGE2_STUB_OFFSET, which is reached when its (memory-only)
    instrumentation check fires.
    """
    base = p.call(
        "mmap", STAGE2_BASE, STAGE2_SIZE, PROT_READ | PROT_WRITE,
        MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, -1, 0, **_site(0x2110),
    )
    p.space.write(base, KILL_STUB)
    p.space.write(base + STAGE2_STUB_OFFSET, KILL_STUB)
    p.call("mprotect", base, STAGE2_SIZE, PROT_READ | PROT_EXEC, **_site(0x2130))
    if not p.env["frida_agent_loaded"]:
        return
    code = p.load(base + STAGE2_STUB_OFFSET, len(KILL_STUB))
    if code == KILL_STUB:
        p.detect("suicide stub executed", f"kill at 0x{base + STAGE2_STUB_OFFSET:x}", "suicide",
                 pc=base + STAGE2_STUB_OFFSET + 4)


def timing_delta(p: SimProcess) -> None:
    t0, t1 = p.alloc(16), p.alloc(16)
    p.call("clock_gettime", CLOCK_MONOTONIC, t0, **_site(0x2210))
    if p.env["frida_agent_loaded"]:
        p.spend(int(p.env["hook_delay_ns"]))
    p.spend(10_000)
    p.call("clock_gettime", CLOCK_MONOTONIC, t1, **_site(0x2230))
    delta = timespec_ns(p.load(t1, 16)) - timespec_ns(p.load(t0, 16))
    if delta > TIMING_THRESHOLD_NS:
        p.detect("timing anomaly", f"delta {delta} ns", "graceful")


def frida_port_scan(p: SimProcess) -> None:
    fd = p.call("socket", AF_INET, SOCK_STREAM, 0, **_site(0x2310))
    sa = p.blob(struct.pack("<H", AF_INET) + struct.pack(">H", 27049) + bytes([127, 0, 0, 1]) + bytes(8))
    if p.call("connect", fd, sa, 16, **_site(0x2330)) == 0:
        p.detect("frida port open", "127.0.0.1:27049", "crash")
    p.call("close", fd, **_site(0x2350))


def ptrace_traceme(p: SimProcess) -> None:
    if p.call("ptrace", PTRACE_TRACEME, 0, 0, 0, **_site(0x2410)) < 0:
        p.detect("PTRACE_TRACEME refused", f"tracer pid {p.tracer_pid}", "crash")


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in [
        Scenario("tracerpid", "file-based", "reads TracerPid from /proc/self/status",
                 "graceful", ("/proc/self/status",), tracerpid),
        Scenario("wchan_probe", "file-based", "reads /proc/self/wchan for ptrace_stop",
                 "crash", ("/proc/self/wchan",), wchan_probe),
        Scenario("frida_artifact", "file-based", "checks for /data/local/tmp/frida-server",
                 "graceful", ("/data/local/tmp/frida-server",), frida_artifact),
        Scenario("magisk_path", "file-based", "opens /sbin/.magisk",
                 "crash", ("/sbin/.magisk",), magisk_path),
        Scenario("task_stat_scan", "file-based", "reads thread names from /proc/self/task/TID/stat",
                 "graceful", ("/proc/self/task/",), task_stat_scan),
        Scenario("proc_scan", "activity-based", "enumerates /proc for analysis daemons",
                 "crash", ("/proc", r"^/proc/[0-9]+/(cmdline|comm|status)$"), proc_scan),
        Scenario("suicide_stub", "memory-based", "multi-stage code release ending in a kill stub",
                 "suicide", ("kill",), suicide_stub),
        Scenario("maps_scan", "memory-based", "searches /proc/self/maps for frida-agent",
                 "crash", ("/proc/self/maps",), maps_scan),
        Scenario("timing_delta", "timer-based", "two monotonic clock reads around hooked code",
                 "graceful", ("clock_gettime",), timing_delta),
        Scenario("frida_port_scan", "network-based", "connects to 127.0.0.1:27049",
                 "crash", ("27049",), frida_port_scan),
        Scenario("ptrace_traceme", "misc-native", "PTRACE_TRACEME self-attach",
                 "crash", ("ptrace",), ptrace_traceme),
        Scenario("java_debugger", "java-framework",
                 "Debug.isDebuggerConnected() and friends; ART-level, not reachable through syscalls",
                 "graceful", (), None, supported=False),
    ]
}
