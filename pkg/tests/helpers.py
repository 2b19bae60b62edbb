"""Independent oracles and random generators shared by the test modules.

The oracles deliberately avoid the package's own data structures: the
page oracle is a flat dict keyed by page number, the where-expression
oracle is a string splitter with unbounded integers, and the attribution
oracle rescans every recorded region version for every event.
"""

import json
import random
import re

from derkit.der import encode_byte_string
from derkit.events import Deref, SyscallEvent
from derkit.memory import MMAP_BASE, AddressSpace, apply_syscall_effect
from derkit.regions import build_map

PAGE = 4096
M64 = 1 << 64
COMM = "com.example.test"


# -- where expressions ----------------------------------------------------------


def naive_where(text, args):
    tokens = re.sub(r"([+-])", r" \1 ", text).split()
    total, sign = 0, 1
    for tok in tokens:
        if tok == "+":
            sign = 1
        elif tok == "-":
            sign = -1
        else:
            if tok.startswith("args"):
                v = args[int(tok[4:])]
            elif tok.lower().startswith("0x"):
                v = int(tok, 16)
            else:
                v = int(tok)
            total += sign * v
    return total % M64


def random_where_text(rng):
    terms = []
    for _ in range(rng.randint(1, 6)):
        kind = rng.randrange(3)
        if kind == 0:
            terms.append(f"args{rng.randrange(6)}")
        elif kind == 1:
            terms.append(hex(rng.choice([0, 1, rng.getrandbits(12), rng.getrandbits(64)])))
        else:
            terms.append(str(rng.choice([0, 7, rng.getrandbits(20), rng.getrandbits(64)])))
    out = terms[0]
    for t in terms[1:]:
        sp1, sp2 = rng.choice(["", " ", "  "]), rng.choice(["", " ", "\t"])
        out += f"{sp1}{rng.choice('+-')}{sp2}{t}"
    return out


# -- address space -------------------------------------------------------------


class PageOracle:
    """Per-page permission map with the same mapping semantics, done the slow way."""

    def __init__(self):
        self.perms = {}  # page number -> 0..7

    def mmap(self, addr, length, perm):
        npages = -(-length // PAGE)
        if addr == 0:
            page = MMAP_BASE // PAGE
            while any(p in self.perms for p in range(page, page + npages)):
                page += 1
            addr = page * PAGE
        for p in range(addr // PAGE, addr // PAGE + npages):
            self.perms[p] = perm
        return addr

    def mprotect(self, addr, length, perm):
        pages = range(addr // PAGE, addr // PAGE + -(-length // PAGE))
        if not all(p in self.perms for p in pages):
            return False
        for p in pages:
            self.perms[p] = perm
        return True

    def munmap(self, addr, length):
        for p in range(addr // PAGE, addr // PAGE + -(-length // PAGE)):
            self.perms.pop(p, None)

    def perm_at(self, addr):
        return self.perms.get(addr // PAGE)


def random_mapping_ops(rng, n, window=48, base=0x10000):
    """A list of (op, addr, length, perm) over a small page window."""
    ops = []
    for _ in range(n):
        op = rng.choice(["mmap", "mmap", "mprotect", "mprotect", "munmap"])
        first = rng.randrange(window)
        npages = rng.randint(1, 8)
        length = npages * PAGE - rng.choice([0, 0, 1, 0x7FF])
        addr = 0 if op == "mmap" and rng.random() < 0.15 else base + first * PAGE
        ops.append((op, addr, length, rng.randrange(8)))
    return ops


# -- traces --------------------------------------------------------------------


class TraceBuilder:
    def __init__(self, pid=4100):
        self.pid = pid
        self.seq = 0
        self.events = []

    def call(self, name, args, retval, pc=0, tid=None, deref_enter=None, deref_exit=None, stack=()):
        args = tuple(args) + (0,) * (6 - len(args))
        tid = tid or self.pid
        for phase in ("enter", "exit"):
            self.seq += 1
            self.events.append(SyscallEvent(
                seq=self.seq, phase=phase, pid=self.pid, tid=tid, comm=COMM, tname="main",
                syscall=name, args=args, retval=retval if phase == "exit" else None,
                pc=pc, stack=tuple(stack), ts=self.seq * 1000,
                deref=(deref_enter if phase == "enter" else deref_exit) or {},
            ))

    def mapping(self, op, addr, length, perm, retval=None, pc=0):
        if op == "mmap":
            self.call("mmap", (addr, length, perm, 0x22, 0xFFFFFFFFFFFFFFFF, 0), addr if retval is None else retval, pc)
        elif op == "mprotect":
            self.call("mprotect", (addr, length, perm), 0 if retval is None else retval, pc)
        else:
            self.call("munmap", (addr, length), 0 if retval is None else retval, pc)


def random_attribution_trace(rng, n_ops=40):
    """Mapping calls interleaved with getpid calls from random pcs."""
    tb = TraceBuilder()
    base = 0x40000
    for _ in range(n_ops):
        if rng.random() < 0.4:
            op, addr, length, perm = random_mapping_ops(rng, 1, window=24, base=base)[0]
            if op == "mmap" and addr == 0:
                addr = base
            tb.mapping(op, addr, length, perm, retval=rng.choice([None, None, None, -22]))
        else:
            pc = base - PAGE + rng.randrange(28 * PAGE)
            stack = (pc, base + rng.randrange(28 * PAGE)) if rng.random() < 0.5 else ()
            tb.call("getpid", (), tb.pid, pc=pc, stack=stack)
    return tb.events


def check_attribution(events):
    """Compare build_map against a rescan of every region version."""
    # time-indexed region versions, recorded after every mapping call
    versions = [(0, ())]
    pages = PageOracle()
    page_perm_at = {}
    replay = AddressSpace()
    for ev in events:
        if ev.syscall in ("mmap", "mprotect", "munmap"):
            if ev.phase == "exit" and ev.retval >= 0:
                a = ev.args
                if ev.syscall == "mmap":
                    pages.mmap(ev.retval, a[1], a[2] & 7)
                elif ev.syscall == "mprotect":
                    pages.mprotect(a[0], a[1], a[2] & 7)
                else:
                    pages.munmap(a[0], a[1])
                apply_syscall_effect(replay, ev)
                versions.append((ev.seq, tuple((r.start, r.end, int(r.perms)) for r in replay.regions)))
        elif ev.is_enter:
            page_perm_at[ev.seq] = pages.perm_at(ev.pc)

    rmap = build_map(events)
    for ev in events:
        if ev.syscall in ("mmap", "mprotect", "munmap") or not ev.is_enter:
            continue
        current = [regs for since, regs in versions if since < ev.seq][-1]
        expect = [r for r in current if r[0] <= ev.pc < r[1]]
        got = rmap.region_of(ev.seq)
        if not expect:
            assert got is None and ev in rmap.unattributed
            assert page_perm_at[ev.seq] is None
        else:
            assert got is not None and (got.start, got.end, int(got.perms)) == expect[0]
            assert page_perm_at[ev.seq] == expect[0][2]


def random_revert_scenario(rng):
    """(events, rules_text) where every rule reverts on exit.

    Buffers live in a couple of anonymous mappings; some calls carry
    captured payloads that the replay writes into memory, and a few
    mprotect/munmap calls change the ground under outstanding patches.
    """
    tb = TraceBuilder()
    regions = [(0x100000, 4 * PAGE, 3), (0x200000, 2 * PAGE, 1), (0x300000, 3 * PAGE, 3)]
    for addr, length, perm in regions:
        tb.mapping("mmap", addr, length, perm)

    def pointer():
        addr, length, _ = rng.choice(regions)
        return addr + rng.randrange(length - 64)

    tids = [4100, 4101, 4102]
    for _ in range(rng.randint(10, 30)):
        r = rng.random()
        tid = rng.choice(tids)
        if r < 0.35:
            p = pointer()
            path = rng.choice(["/proc/self/status", "/proc/self/maps", "/data/app/base.apk", "/proc/self/task/1/stat"])
            tb.call("openat", (0xFFFFFFFFFFFFFF9C, p, 0, 0), rng.randrange(3, 20), tid=tid,
                    deref_enter={1: Deref("str", path)})
        elif r < 0.7:
            p = pointer()
            data = bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 48)))
            tb.call("read", (rng.randrange(3, 20), p, 64), len(data), tid=tid,
                    deref_exit={1: Deref("bytes", data)})
        elif r < 0.8:
            addr, length, _ = rng.choice(regions)
            tb.mapping("mprotect", addr, length, rng.choice([1, 3, 5]))
        elif r < 0.85:
            addr, length, _ = rng.choice(regions)
            tb.mapping("munmap", addr, PAGE, 0)
        else:
            tb.call("getpid", (), 4100, tid=tid)

    rules = []
    for _ in range(rng.randint(1, 5)):
        syscall = rng.choice(["openat", "read", "getpid", "mprotect"])
        payload = bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 24)))
        cond = {"comm": COMM, "tname": "*", "syscall": syscall}
        if syscall == "openat" and rng.random() < 0.5:
            cond["args"] = {"1": "/proc/self/"}
        rules.append({
            "condition": cond,
            "evasion": {
                "where": rng.choice(["args1", "args1 + 0x8", "args0", "args1 - 4"]),
                "data": encode_byte_string(payload) if rng.random() < 0.7 else "patched",
                "revert_on_exit": True,
            },
        })
    return tb.events, json.dumps(rules, indent=1)


def random_event(rng, seq=1, phase=None):
    phase = phase or rng.choice(["enter", "exit"])
    deref = {}
    for i in rng.sample(range(6), rng.randint(0, 2)):
        if rng.random() < 0.5:
            deref[i] = Deref("str", "".join(rng.choice("abc/._-é") for _ in range(rng.randint(0, 20))))
        else:
            deref[i] = Deref("bytes", bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 20))))
    pc = rng.getrandbits(64)
    stack = (pc,) + tuple(rng.getrandbits(64) for _ in range(rng.randint(0, 3))) if rng.random() < 0.5 else ()
    return SyscallEvent(
        seq=seq, phase=phase, pid=rng.randrange(1, 1 << 22), tid=rng.randrange(1, 1 << 22),
        comm=rng.choice([COMM, "sh", "x" * 20]), tname=rng.choice(["main", "gum-js-loop", ""]),
        syscall=rng.choice(["openat", "read", "mmap", "connect", "exit_group"]),
        args=tuple(rng.choice([0, 1, rng.getrandbits(64), M64 - 1]) for _ in range(6)),
        retval=rng.choice([0, -2, rng.randrange(-(1 << 63), 1 << 63)]) if phase == "exit" else None,
        pc=pc, stack=stack, deref=deref, ts=rng.randrange(1 << 62),
    )


def seeded(seed):
    return random.Random(seed)
