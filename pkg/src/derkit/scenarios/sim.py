"""A tiny deterministic process/kernel model for packed-app scenarios.

Scenario scripts call ``SimProcess.call``; each call becomes an enter
event, the kernel side effect, and an exit event, with the engine (when
present) hooked in before and after the side effect.  Everything the app
sees -- file contents, clock, memory -- lives here, so runs are exactly
reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from ..events import DEREF_CAPTURE, Deref, SyscallEvent
from ..memory import AddressSpace, MemoryFault, Perm

MASK64 = (1 << 64) - 1

AT_FDCWD = -100
O_RDONLY = 0
O_DIRECTORY = 0o200000
F_OK = 0
PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4
MAP_PRIVATE, MAP_FIXED, MAP_ANONYMOUS = 0x02, 0x10, 0x20
AF_INET, SOCK_STREAM = 2, 1
CLOCK_MONOTONIC = 1
PTRACE_TRACEME = 0
SIGKILL, SIGSEGV = 9, 11

EPERM, ENOENT, EBADF, ENOMEM, EFAULT, ENOTDIR, EINVAL = 1, 2, 9, 12, 14, 20, 22
ECONNREFUSED = 111

SYSCALL_COST_NS = 1_000
BOOT_TIME_NS = 1_000_000_000

PID = 4100
COMM = "com.example.test"

LINKER_BASE = 0x7A3D500000
PACKER_BASE = 0x7A41B00000
LIBC_BASE = 0x7D79A00000
GUARD_PAGE = 0x7D79B34000
FRIDA_AGENT_BASE = 0x7A39000000
HEAP_SIZE = 0x40000

LINKER_PATH = "/apex/com.android.runtime/bin/linker64"
LIBC_PATH = "/apex/com.android.runtime/lib64/bionic/libc.so"
PACKER_PATH = "/data/app/com.example.test/lib/arm64/libjiagu_64.so"
FRIDA_AGENT_PATH = "/data/local/tmp/re.frida.server/frida-agent-64.so"

FRIDA_THREADS = {5001: "gum-js-loop", 5002: "pool-frida", 5003: "gmain"}
FRIDA_SERVER_PID = 4242
MAGISKD_PID = 611


class Terminated(Exception):
    """The simulated process is gone; no further syscalls run."""


@dataclass
class _OpenFile:
    data: bytes
    pos: int = 0
    is_dir: bool = False


def _sword(v: int) -> int:
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


@dataclass
class Detection:
    check: str
    evidence: str


@dataclass
class SimProcess:
    env: dict
    engine: object | None = None
    comm: str = COMM
    pid: int = PID
    tname: str = "main"
    space: AddressSpace = field(default_factory=AddressSpace)

    def __post_init__(self):
        self.events: list[SyscallEvent] = []
        self.detections: list[Detection] = []
        self.seq = 0
        self.clock = BOOT_TIME_NS
        self.fds: dict[int, _OpenFile | str] = {}
        self._heap = 0
        self._heap_top = 0
        self.files, self.dirs = self._filesystem()

    # -- environment ---------------------------------------------------------

    @property
    def tracer_pid(self) -> int:
        return int(self.env["tracer_pid"])

    def _threads(self) -> dict[int, str]:
        threads = {self.pid: self.tname}
        if self.env["frida_threads"]:
            threads.update(FRIDA_THREADS)
        return threads

    def _processes(self) -> dict[int, bytes]:
        procs = {1: b"/init\0", self.pid: self.comm.encode() + b"\0"}
        if self.env["frida_server_running"]:
            procs[FRIDA_SERVER_PID] = b"/data/local/tmp/frida-server\0"
        if self.env["magisk_present"]:
            procs[MAGISKD_PID] = b"magiskd\0"
        return dict(sorted(procs.items()))

    def _filesystem(self):
        env = self.env
        files: dict[str, bytes | Callable[[], bytes]] = {
            "/proc/self/status": self._status,
            "/proc/self/wchan": lambda: b"ptrace_stop" if self.tracer_pid else b"do_epoll_wait",
            "/proc/self/maps": self._maps,
            # analyst-staged decoys referenced by the shipped rules
            "/data/local/tmp/fake": f"{self.pid} ({self.comm[:15]}) S 1 {self.pid} 0 0\n".encode(),
            "/data/local/tmp/fake_status": self._status_text(0),
            "/data/local/tmp/fake_cmdline": b"zygote64\0",
        }
        for tid, name in self._threads().items():
            files[f"/proc/self/task/{tid}/stat"] = f"{tid} ({name}) S 1 {self.pid} 0 0\n".encode()
        for pid, cmdline in self._processes().items():
            files[f"/proc/{pid}/cmdline"] = cmdline
        if env["frida_server_present"]:
            files["/data/local/tmp/frida-server"] = b"\x7fELF"
        if env["magisk_present"]:
            files["/sbin/.magisk"] = b""
        dirs = {
            "/proc": lambda: [str(p) for p in self._processes()] + ["self"],
            "/proc/self/task": lambda: [str(t) for t in self._threads()],
        }
        return files, dirs

    def _status_text(self, tracer: int) -> bytes:
        return (
            f"Name:\t{self.comm[:15]}\nState:\tS (sleeping)\nTgid:\t{self.pid}\n"
            f"Pid:\t{self.pid}\nPPid:\t1\nTracerPid:\t{tracer}\n"
        ).encode()

    def _status(self) -> bytes:
        return self._status_text(self.tracer_pid)

    def _maps(self) -> bytes:
        lines = []
        for r in self.space.regions:
            name = r.origin[5:] if r.origin.startswith("file:") else ""
            lines.append(f"{r.start:x}-{r.end:x} {r.perms}p 00000000 00:00 0 {name}".rstrip())
        return ("\n".join(lines) + "\n").encode()

    # -- process memory helpers ---------------------------------------------

    def alloc(self, size: int, align: int = 64) -> int:
        size = max(size, align)
        addr = (self._heap_top + align - 1) & ~(align - 1)
        if addr + size > self._heap + HEAP_SIZE:
            raise MemoryError("simulated heap exhausted")
        self._heap_top = addr + size
        return addr

    def cstr(self, text: str) -> int:
        raw = text.encode() + b"\0"
        addr = self.alloc(len(raw))
        self.space.write(addr, raw)
        return addr

    def blob(self, data: bytes) -> int:
        addr = self.alloc(len(data))
        self.space.write(addr, data)
        return addr

    def load(self, addr: int, length: int) -> bytes:
        return self.space.read_bytes(addr, length)

    # -- syscall plumbing ----------------------------------------------------

    def _capture(self, name: str, phase: str, args, retval=None) -> dict[int, Deref]:
        out = {}
        for index, kind, when in DEREF_CAPTURE.get(name, ()):
            if when != phase:
                continue
            try:
                if kind == "str":
                    out[index] = Deref("str", self.space.read_c_string(args[index]))
                    continue
                if name == "connect":
                    n = args[2]
                elif name == "mprotect":
                    n = 16
                elif retval is not None and retval > 0:
                    n = retval if name != "clock_gettime" else 16
                elif name == "clock_gettime" and retval == 0:
                    n = 16
                else:
                    continue
                out[index] = Deref("bytes", self.space.read_bytes(args[index], min(n, 4096)))
            except MemoryFault:
                pass
        return out

    def _event(self, phase, name, args, pc, stack, deref, retval=None) -> SyscallEvent:
        self.seq += 1
        return SyscallEvent(
            seq=self.seq, phase=phase, pid=self.pid, tid=self.pid, comm=self.comm,
            tname=self.tname, syscall=name, args=args, retval=retval, pc=pc,
            stack=stack, deref=deref, ts=self.clock,
        )

    def call(self, name: str, *args: int, pc: int, caller: int | None = None, deref=None) -> int:
        regs = tuple(a & MASK64 for a in args) + (0,) * (6 - len(args))
        stack = (pc, caller) if caller is not None else ()
        captured = self._capture(name, "enter", regs)
        captured.update(deref or {})
        enter = self._event("enter", name, regs, pc, stack, captured)
        if self.engine is not None:
            self.engine.process(enter)
        self.events.append(enter)
        handler = getattr(self, f"_sys_{name}")
        ret = handler(*regs)
        self.clock += SYSCALL_COST_NS
        exit_ev = self._event("exit", name, regs, pc, stack, self._capture(name, "exit", regs, ret), ret)
        if self.engine is not None:
            exit_ev = self.engine.process(exit_ev)
        self.events.append(exit_ev)
        return exit_ev.retval

    def spend(self, ns: int) -> None:
        """Advance the clock for work done outside syscalls."""
        self.clock += ns

    def detect(self, check: str, evidence: str, reaction: str = "graceful", pc: int | None = None) -> None:
        self.detections.append(Detection(check, evidence))
        pc = pc if pc is not None else PACKER_BASE + 0xF000
        if reaction == "graceful":
            self.call("exit_group", 1, pc=pc)
        elif reaction == "crash":
            self.call("tgkill", self.pid, self.pid, SIGSEGV, pc=pc)
        else:
            self.call("kill", self.pid, SIGKILL, pc=pc)
        raise Terminated(check)

    def boot(self) -> None:
        """Map the initial image the way the loader would."""
        anon = -1
        self.mmap(LINKER_BASE, 0x100000, PROT_READ | PROT_EXEC, LINKER_PATH, pc=0)
        ld = LINKER_BASE + 0x4A10
        self.mmap(LIBC_BASE, 0x100000, PROT_READ | PROT_EXEC, LIBC_PATH, pc=ld)
        self.call("mmap", GUARD_PAGE, 0x1000, 0, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, anon, 0, pc=ld)
        self.mmap(PACKER_BASE, 0x40000, PROT_READ | PROT_EXEC, PACKER_PATH, pc=ld)
        if self.env["frida_agent_loaded"]:
            self.mmap(FRIDA_AGENT_BASE, 0x20000, PROT_READ | PROT_EXEC, FRIDA_AGENT_PATH, pc=ld)
        self._heap = self.call(
            "mmap", 0, HEAP_SIZE, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, anon, 0, pc=ld
        )
        self._heap_top = self._heap

    def mmap(self, addr: int, length: int, prot: int, path: str | None, pc: int) -> int:
        flags = MAP_PRIVATE | MAP_FIXED | (0 if path else MAP_ANONYMOUS)
        deref = {4: Deref("str", path)} if path else None
        return self.call("mmap", addr, length, prot, flags, 3 if path else -1, 0, pc=pc, deref=deref)

    # -- kernel side ---------------------------------------------------------

    def _new_fd(self, obj) -> int:
        fd = 3
        while fd in self.fds:
            fd += 1
        self.fds[fd] = obj
        return fd

    def _path(self, ptr: int) -> str | int:
        try:
            return self.space.read_c_string(ptr)
        except MemoryFault:
            return -EFAULT

    def _sys_openat(self, dirfd, path_ptr, flags, mode, *_):
        path = self._path(path_ptr)
        if isinstance(path, int):
            return path
        if path in self.dirs:
            names = self.dirs[path]()
            return self._new_fd(_OpenFile(b"".join(n.encode() + b"\0" for n in names), is_dir=True))
        if flags & O_DIRECTORY:
            return -ENOTDIR if path in self.files else -ENOENT
        content = self.files.get(path)
        if content is None:
            return -ENOENT
        return self._new_fd(_OpenFile(content() if callable(content) else content))

    def _sys_faccessat(self, dirfd, path_ptr, mode, flags, *_):
        path = self._path(path_ptr)
        if isinstance(path, int):
            return path
        return 0 if path in self.files or path in self.dirs else -ENOENT

    def _read_into(self, fd, buf, count, want_dir):
        f = self.fds.get(_sword(fd))
        if not isinstance(f, _OpenFile) or f.is_dir != want_dir:
            return -EBADF
        chunk = f.data[f.pos : f.pos + count]
        try:
            self.space.write(buf, chunk)
        except MemoryFault:
            return -EFAULT
        f.pos += len(chunk)
        return len(chunk)

    def _sys_read(self, fd, buf, count, *_):
        return self._read_into(fd, buf, count, want_dir=False)

    def _sys_getdents64(self, fd, buf, count, *_):
        return self._read_into(fd, buf, count, want_dir=True)

    def _sys_close(self, fd, *_):
        return 0 if self.fds.pop(_sword(fd), None) is not None else -EBADF

    def _sys_mmap(self, addr, length, prot, flags, fd, off):
        path = self.events[-1].arg_str(4) if self.events and self.events[-1].syscall == "mmap" else None
        if not flags & MAP_FIXED:
            addr = 0
        try:
            region = self.space.mmap(addr, length, Perm(prot & 7), f"file:{path}" if path else "anon")
        except (ValueError, MemoryError):
            return -EINVAL
        return region.start

    def _sys_mprotect(self, addr, length, prot, *_):
        try:
            self.space.mprotect(addr, length, Perm(prot & 7))
        except ValueError:
            return -EINVAL
        except MemoryFault:
            return -ENOMEM
        return 0

    def _sys_munmap(self, addr, length, *_):
        try:
            self.space.munmap(addr, length)
        except ValueError:
            return -EINVAL
        return 0

    def _sys_socket(self, domain, type_, proto, *_):
        return self._new_fd(f"socket:{domain}:{type_}")

    def _sys_connect(self, fd, addr_ptr, addrlen, *_):
        if not str(self.fds.get(_sword(fd), "")).startswith("socket:"):
            return -EBADF
        try:
            raw = self.space.read_bytes(addr_ptr, addrlen)
        except MemoryFault:
            return -EFAULT
        if len(raw) < 8 or struct.unpack_from("<H", raw)[0] != AF_INET:
            return -EINVAL
        port = struct.unpack_from(">H", raw, 2)[0]
        host = raw[4:8]
        if host == bytes([127, 0, 0, 1]) and port in self.env["open_ports"]:
            return 0
        return -ECONNREFUSED

    def _sys_clock_gettime(self, clk, ts_ptr, *_):
        try:
            self.space.write(ts_ptr, struct.pack("<qq", *divmod(self.clock, 1_000_000_000)))
        except MemoryFault:
            return -EFAULT
        return 0

    def _sys_ptrace(self, request, pid, addr, data, *_):
        if request == PTRACE_TRACEME:
            return -EPERM if self.tracer_pid else 0
        return -EPERM

    def _sys_getpid(self, *_):
        return self.pid

    def _die(self):
        # the enter event is already recorded; a dead process has no exit
        raise Terminated("killed")

    def _sys_exit_group(self, status, *_):
        self._die()

    def _sys_kill(self, pid, sig, *_):
        if pid == self.pid and sig in (SIGKILL, SIGSEGV):
            self._die()
        return 0

    def _sys_tgkill(self, tgid, tid, sig, *_):
        if tgid == self.pid and sig in (SIGKILL, SIGSEGV):
            self._die()
        return 0


def timespec_ns(raw: bytes) -> int:
    sec, nsec = struct.unpack("<qq", raw)
    return sec * 1_000_000_000 + nsec
