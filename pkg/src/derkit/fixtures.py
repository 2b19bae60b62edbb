"""Deterministic recorded traces shipped with the package.

``region_listing_events`` rebuilds a process image whose origin map reproduces
the published syscall-region listing: 94 lower mappings, the decrypted
stage at 0x7a41c45000 (mapped rw-, flipped r-x), a guard page, and the
thread stack.  The stage issues the 13 listed openat calls; one extra
openat of a per-thread stat file comes from the linker so that replaying
the task-stat rule rewrites exactly one buffer.

Regenerate the shipped copy with ``python -m derkit.fixtures``.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

from .events import Deref, SyscallEvent, emit_trace, parse_trace

PID = 4100
COMM = "com.example.test"
TNAME = "main"

STAGE_BASE = 0x7A41C45000
STAGE_SIZE = 0xDE5C0
GUARD = 0x7D79B34000
STACK_BASE = 0x7FDC600000
STACK_SIZE = 0x100000
LINKER_BASE = 0x7A3D500000
LINKER_SIZE = 0x300000
# rw- scratch mapping (one of the lower regions) holding the stat path
HEAP_BASE = 0x7A00B00000

AT_FDCWD = 0xFFFFFFFFFFFFFF9C
PROT = {"---": 0, "r--": 1, "rw-": 3, "r-x": 5}

# (pointer, path) in the listed order
STAGE_OPENS = [
    (0x7A41D2D030, "/proc/self/status"),
    (0x7A41D2D090, "/proc/self/wchan"),
    (0x7A41D2A588, "/proc/self/maps"),
    (0x7FDC6F19E0, "/apex/com.android.art/lib64/libart.so"),
    (0x7FDC6F1A10, "/apex/com.android.art/lib64/libart.so"),
    (0x7FDC6F1A10, "/system/lib64/liblog.so"),
    (0x7A3D701090, "/apex/com.android.art/lib64/libart.so"),
    (0x7A3D505080, "/apex/com.android.runtime/bin/linker64"),
    (0x7A41D2D0E4, "/proc/self/maps"),
    (0x7FDC6F17B0, "/apex/com.android.art/lib64/libart.so"),
    (0x7FDC6F17B0, "/apex/com.android.art/lib64/libart.so"),
    (0x7FDC6F1BA0, "/apex/com.android.art/lib64/libart.so"),
    (0x7A41D2D030, "/proc/self/status"),
]

STAT_PATH = "/proc/self/task/4100/stat"


def _lower_regions():
    """93 small library-like mappings plus the linker: indices 0..93."""
    perms = ("r--", "r-x", "rw-")
    out = []
    for i in range(93):
        size = 0x1000 * (1 + (i * 7) % 16)
        out.append((0x7A00000000 + i * 0x100000, size, perms[i % 3], f"/system/lib64/lib{i:02d}.so"))
    out.append((LINKER_BASE, LINKER_SIZE, "r-x", "/apex/com.android.runtime/bin/linker64"))
    return out


class _Recorder:
    def __init__(self):
        self.events: list[SyscallEvent] = []
        self.seq = 0
        self.ts = 1_000_000_000

    def call(self, name, args, retval, pc, stack=(), deref=None, exit_deref=None):
        args = tuple(args) + (0,) * (6 - len(args))
        stack = tuple(stack)
        for phase in ("enter", "exit"):
            self.seq += 1
            self.ts += 1000
            self.events.append(SyscallEvent(
                seq=self.seq, phase=phase, pid=PID, tid=PID, comm=COMM, tname=TNAME,
                syscall=name, args=args, retval=retval if phase == "exit" else None,
                pc=pc, stack=stack, deref=(deref if phase == "enter" else exit_deref) or {}, ts=self.ts,
            ))

    def mmap(self, addr, size, perm, path, pc):
        d = {4: Deref("str", path)} if path else None
        flags = 0x12 if path else 0x32  # MAP_PRIVATE|MAP_FIXED (+MAP_ANONYMOUS)
        self.call("mmap", (addr, size, PROT[perm], flags, 3 if path else 0xFFFFFFFFFFFFFFFF, 0),
                  addr, pc, deref=d, exit_deref=d)


def region_listing_events() -> list[SyscallEvent]:
    rec = _Recorder()
    loader_pc = LINKER_BASE + 0x4A10
    for base, size, perm, path in _lower_regions():
        rec.mmap(base, size, perm, path, loader_pc)
    rec.mmap(GUARD, 0x1000, "---", None, loader_pc)
    rec.mmap(STACK_BASE, STACK_SIZE, "rw-", None, loader_pc)

    # unpacking: the stage is written while rw- and flipped to r-x
    unpacker_pc = 0x7A00100000 + 0x0A24  # inside lib01 (r-x)
    rec.mmap(STAGE_BASE, STAGE_SIZE, "rw-", None, unpacker_pc)
    rec.call("mprotect", (STAGE_BASE, STAGE_SIZE, PROT["r-x"]), 0, unpacker_pc,
             deref={0: Deref("bytes", bytes.fromhex("281080d2010000d4"))})

    # the linker-side stat probe, pointer in a writable lower mapping
    stat_ptr = HEAP_BASE + 0x40
    rec.call("openat", (AT_FDCWD, stat_ptr, 0, 0), 3, LINKER_BASE + 0x6C40,
             stack=(LINKER_BASE + 0x6C40, LINKER_BASE + 0x1200), deref={1: Deref("str", STAT_PATH)})
    rec.call("close", (3,), 0, LINKER_BASE + 0x6C80)

    # stage-2 checks: the openat wrapper is inlined in the stage; frame 1 is
    # the dispatcher in lib01 that called into it.  The descriptors stay open.
    dispatcher = 0x7A00100000 + 0x0B00
    for n, (ptr, path) in enumerate(STAGE_OPENS):
        pc = STAGE_BASE + 0x6A000 + 0x40 * n
        fd = 4 + n
        rec.call("openat", (AT_FDCWD, ptr, 0, 0), fd, pc, stack=(pc, dispatcher),
                 deref={1: Deref("str", path)})
    return rec.events


def region_listing_text() -> str:
    return resources.files("derkit.data").joinpath("region_listing.jsonl").read_text(encoding="utf-8")


def load_region_listing() -> list[SyscallEvent]:
    return parse_trace(region_listing_text())


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else Path(__file__).parent / "data" / "region_listing.jsonl"
    out.write_text(emit_trace(region_listing_events()), encoding="utf-8")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
