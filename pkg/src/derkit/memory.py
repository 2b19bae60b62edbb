"""Simulated virtual address space of a target process.

Regions are page-aligned, non-overlapping and carry r/w/x permissions.
Content lives in a sparse page store keyed by page address, so splitting a
region never copies bytes and untouched pages cost nothing.

Writes come in three flavours:

* ``write``       -- a store by the process or its kernel; permission checked.
* ``write_bytes`` -- an engine patch; permission checked and journaled.
* ``poke``        -- privileged store (trace reconstruction); unchecked.

Journal rollback (``revert_patch``) ignores page permissions.  While a patch
is outstanding, later non-engine stores into its range replace the bytes it
will restore, so a rollback never undoes what the process itself wrote.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field

PAGE_SIZE = 0x1000
PAGE_MASK = PAGE_SIZE - 1
MASK64 = (1 << 64) - 1
MMAP_BASE = 0x7000_0000_0000
C_STRING_MAX = 4096


class Perm(enum.IntFlag):
    NONE = 0
    R = 1
    W = 2
    X = 4

    @classmethod
    def parse(cls, text: str) -> "Perm":
        if len(text) != 3 or any(c not in f"{flag}-" for c, flag in zip(text, "rwx")):
            raise ValueError(f"bad permission string {text!r}")
        p = cls.NONE
        for c, bit in zip(text, (cls.R, cls.W, cls.X)):
            if c != "-":
                p |= bit
        return p

    def __str__(self) -> str:
        return "".join(c if self & bit else "-" for c, bit in zip("rwx", (Perm.R, Perm.W, Perm.X)))


class MemoryFault(Exception):
    def __init__(self, msg: str, address: int):
        self.address = address
        super().__init__(f"{msg} at 0x{address:x}")


class UnmappedError(MemoryFault):
    def __init__(self, address: int):
        super().__init__("unmapped address", address)


class ProtectionFault(MemoryFault):
    def __init__(self, address: int, access: str, perms: Perm):
        self.access = access
        self.perms = perms
        super().__init__(f"{access} denied on {perms} page", address)


class UnterminatedString(MemoryFault):
    def __init__(self, address: int, limit: int):
        super().__init__(f"no NUL within {limit} bytes", address)


def page_floor(addr: int) -> int:
    return addr & ~PAGE_MASK


def page_ceil(addr: int) -> int:
    return (addr + PAGE_MASK) & ~PAGE_MASK


@dataclass
class MemoryRegion:
    start: int
    end: int
    perms: Perm
    origin: str = "anon"
    # mapping end as requested by the caller, before page rounding
    nominal_end: int | None = None

    @property
    def display_end(self) -> int:
        return self.nominal_end if self.nominal_end is not None else self.end

    @property
    def size(self) -> int:
        return self.end - self.start

    def __contains__(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def key(self) -> tuple:
        return (self.start, self.end, int(self.perms), self.origin, self.display_end)


@dataclass
class PatchRecord:
    address: int
    original_bytes: bytes
    new_bytes: bytes
    rule_id: str
    event_seq: int
    restore: bytearray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.original_bytes) != len(self.new_bytes):
            raise ValueError("original and new bytes differ in length")
        if self.restore is None:
            self.restore = bytearray(self.original_bytes)


@dataclass(frozen=True)
class Snapshot:
    regions: tuple
    pages: tuple

    def dump(self) -> str:
        return "".join(
            f"[region {i}] 0x{start:x} - 0x{dend:x} ({Perm(perms)})\n"
            for i, (start, _end, perms, _origin, dend) in enumerate(self.regions)
        )


class AddressSpace:
    def __init__(self):
        self._regions: list[MemoryRegion] = []
        self._starts: list[int] = []
        self._pages: dict[int, bytearray] = {}
        self.journal: list[PatchRecord] = []
        self._active: list[PatchRecord] = []

    # -- lookup --------------------------------------------------------------

    @property
    def regions(self) -> list[MemoryRegion]:
        return list(self._regions)

    def find(self, addr: int) -> MemoryRegion | None:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i >= 0 and addr < self._regions[i].end:
            return self._regions[i]
        return None

    def _span(self, addr: int, length: int) -> list[MemoryRegion]:
        """Regions covering [addr, addr+length) contiguously, else UnmappedError."""
        out = []
        cur, end = addr, addr + length
        while cur < end:
            r = self.find(cur)
            if r is None:
                raise UnmappedError(cur)
            out.append(r)
            cur = r.end
        return out

    def is_mapped(self, addr: int, length: int) -> bool:
        try:
            self._span(addr, max(length, 1))
        except UnmappedError:
            return False
        return True

    # -- region table --------------------------------------------------------

    def _replace(self, old: list[MemoryRegion], new: list[MemoryRegion]) -> None:
        for r in old:
            i = bisect.bisect_left(self._starts, r.start)
            del self._regions[i]
            del self._starts[i]
        for r in new:
            if r.start >= r.end:
                continue
            i = bisect.bisect_left(self._starts, r.start)
            self._regions.insert(i, r)
            self._starts.insert(i, r.start)

    def _overlapping(self, start: int, end: int) -> list[MemoryRegion]:
        i = max(bisect.bisect_right(self._starts, start) - 1, 0)
        out = []
        for r in self._regions[i:]:
            if r.start >= end:
                break
            if r.end > start:
                out.append(r)
        return out

    @staticmethod
    def _cut(r: MemoryRegion, start: int, end: int, mid_perms: Perm | None) -> list[MemoryRegion]:
        """Split r around [start, end); the middle piece gets mid_perms or is dropped."""
        pieces = []
        if r.start < start:
            pieces.append(MemoryRegion(r.start, start, r.perms, r.origin))
        if mid_perms is not None:
            lo, hi = max(r.start, start), min(r.end, end)
            pieces.append(MemoryRegion(lo, hi, mid_perms, r.origin, r.nominal_end if hi == r.end else None))
        if end < r.end:
            pieces.append(MemoryRegion(end, r.end, r.perms, r.origin, r.nominal_end))
        return pieces

    def _carve(self, start: int, end: int) -> None:
        old = self._overlapping(start, end)
        new = []
        for r in old:
            new.extend(self._cut(r, start, end, None))
        self._replace(old, new)

    def _free_gap(self, length: int) -> int:
        cur = MMAP_BASE
        for r in self._regions:
            if r.end <= cur:
                continue
            if r.start - cur >= length:
                return cur
            cur = max(cur, r.end)
        if cur + length > MASK64 + 1:
            raise MemoryError("address space exhausted")
        return cur

    def mmap(self, addr: int, length: int, perms: Perm, origin: str = "anon") -> MemoryRegion:
        """Map zero-filled pages; a non-zero addr replaces whatever was there."""
        if length <= 0:
            raise ValueError("mmap length must be positive")
        if addr & PAGE_MASK:
            raise ValueError(f"mmap address 0x{addr:x} is not page-aligned")
        size = page_ceil(length)
        if addr == 0:
            addr = self._free_gap(size)
        end = addr + size
        if end > MASK64 + 1:
            raise ValueError("mapping exceeds the 64-bit address space")
        self._carve(addr, end)
        self._zero(addr, end)
        nominal = addr + length if length != size else None
        region = MemoryRegion(addr, end, Perm(perms), origin, nominal)
        self._replace([], [region])
        return region

    def mprotect(self, addr: int, length: int, perms: Perm) -> None:
        if addr & PAGE_MASK:
            raise ValueError(f"mprotect address 0x{addr:x} is not page-aligned")
        if length == 0:
            return
        end = addr + page_ceil(length)
        self._span(addr, end - addr)
        perms = Perm(perms)
        old = [r for r in self._overlapping(addr, end) if r.perms != perms]
        new = []
        for r in old:
            new.extend(self._cut(r, addr, end, perms))
        self._replace(old, new)

    def munmap(self, addr: int, length: int) -> None:
        if addr & PAGE_MASK:
            raise ValueError(f"munmap address 0x{addr:x} is not page-aligned")
        if length <= 0:
            raise ValueError("munmap length must be positive")
        end = addr + page_ceil(length)
        self._carve(addr, end)
        self._zero(addr, end)

    # -- content -------------------------------------------------------------

    def _zero(self, start: int, end: int) -> None:
        if any(rec.address < end and start < rec.address + len(rec.restore) for rec in self._active):
            self._shadow(start, bytes(end - start))
        for page in [p for p in self._pages if start <= p < end]:
            del self._pages[page]

    def _load(self, addr: int, length: int) -> bytes:
        out = bytearray()
        cur, end = addr, addr + length
        while cur < end:
            page = page_floor(cur)
            off = cur - page
            n = min(end - cur, PAGE_SIZE - off)
            buf = self._pages.get(page)
            out += buf[off : off + n] if buf is not None else bytes(n)
            cur += n
        return bytes(out)

    def _store(self, addr: int, data: bytes, shadow: bool = True) -> None:
        if shadow and self._active:
            self._shadow(addr, data)
        cur, pos = addr, 0
        while pos < len(data):
            page = page_floor(cur)
            off = cur - page
            n = min(len(data) - pos, PAGE_SIZE - off)
            buf = self._pages.get(page)
            if buf is None:
                buf = self._pages[page] = bytearray(PAGE_SIZE)
            buf[off : off + n] = data[pos : pos + n]
            cur += n
            pos += n

    def _shadow(self, addr: int, data: bytes) -> None:
        end = addr + len(data)
        for rec in self._active:
            lo = max(addr, rec.address)
            hi = min(end, rec.address + len(rec.restore))
            if lo < hi:
                rec.restore[lo - rec.address : hi - rec.address] = data[lo - addr : hi - addr]

    def _check(self, addr: int, length: int, bit: Perm, access: str) -> None:
        for r in self._span(addr, length):
            if not r.perms & bit:
                raise ProtectionFault(max(addr, r.start), access, r.perms)

    def read_bytes(self, addr: int, length: int) -> bytes:
        if length == 0:
            return b""
        self._check(addr, length, Perm.R, "read")
        return self._load(addr, length)

    def read_c_string(self, addr: int, max: int = C_STRING_MAX) -> str:
        out = bytearray()
        cur = addr
        while len(out) < max:
            r = self.find(cur)
            if r is None:
                raise UnmappedError(cur)
            if not r.perms & Perm.R:
                raise ProtectionFault(cur, "read", r.perms)
            n = min(r.end - cur, max - len(out), PAGE_SIZE - (cur & PAGE_MASK))
            chunk = self._load(cur, n)
            nul = chunk.find(b"\0")
            if nul >= 0:
                out += chunk[:nul]
                return out.decode("utf-8", "surrogateescape")
            out += chunk
            cur += n
        raise UnterminatedString(addr, max)

    def write(self, addr: int, data: bytes) -> None:
        """Store on behalf of the target process (permission checked)."""
        if not data:
            return
        self._check(addr, len(data), Perm.W, "write")
        self._store(addr, bytes(data))

    def poke(self, addr: int, data: bytes) -> None:
        """Privileged store: range must be mapped, permissions ignored."""
        if not data:
            return
        self._span(addr, len(data))
        self._store(addr, bytes(data))

    def write_bytes(self, addr: int, data: bytes, rule_id: str = "", event_seq: int = -1) -> PatchRecord:
        """Engine patch: succeeds iff every touched page is writable; journaled."""
        data = bytes(data)
        if not data:
            raise ValueError("empty patch")
        self._check(addr, len(data), Perm.W, "write")
        record = PatchRecord(addr, self._load(addr, len(data)), data, rule_id, event_seq)
        self._store(addr, data, shadow=False)
        self.journal.append(record)
        self._active.append(record)
        return record

    def revert_patch(self, record: PatchRecord) -> None:
        self._span(record.address, len(record.restore))
        self._store(record.address, bytes(record.restore), shadow=False)
        self._active = [r for r in self._active if r is not record]

    # -- snapshots -----------------------------------------------------------

    def snapshot(self) -> Snapshot:
        regions = tuple(r.key() for r in self._regions)
        pages = tuple(
            (p, bytes(buf)) for p, buf in sorted(self._pages.items()) if any(buf)
        )
        return Snapshot(regions, pages)

    def dump(self) -> str:
        return "".join(
            f"[region {i}] 0x{r.start:x} - 0x{r.display_end:x} ({r.perms})\n"
            for i, r in enumerate(self._regions)
        )

    def perm_map(self) -> dict[int, Perm]:
        """Per-page permissions of every mapped page."""
        return {
            page: r.perms for r in self._regions for page in range(r.start, r.end, PAGE_SIZE)
        }


def apply_syscall_effect(space: AddressSpace, event) -> bool:
    """Replay the mapping side effect of a recorded exit event.

    Returns True if the space changed shape.  Failed calls (negative retval)
    and inconsistent records are ignored.
    """
    if event.phase != "exit" or event.retval is None or event.retval < 0:
        return False
    a = event.args
    try:
        if event.syscall == "mmap":
            origin = event.arg_str(4)
            space.mmap(event.retval, a[1], Perm(a[2] & 7), f"file:{origin}" if origin else "anon")
        elif event.syscall == "mprotect":
            space.mprotect(a[0], a[1], Perm(a[2] & 7))
        elif event.syscall == "munmap":
            space.munmap(a[0], a[1])
        else:
            return False
    except (ValueError, MemoryFault):
        return False
    return True


MAPPING_SYSCALLS = frozenset({"mmap", "mprotect", "munmap"})
