"""DER (defined evasion rule) data model and file format.

A DER file holds one rule object, a JSON array of rule objects, or several
top-level rule objects one after another.  ``/* ... */`` comments are
allowed anywhere outside string literals.

Example::

    /* redirect per-thread stat probes */
    {
      "condition": {
        "comm": "com.example.test",
        "tname": "*",
        "syscall": "openat",
        "args": { "1": "/proc/self/task/" }
      },
      "evasion": {
        "where": "args1",
        "data": "/data/local/tmp/fake"
      }
    }
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

MASK64 = (1 << 64) - 1
MAX_ARGS = 6
PHASES = ("enter", "exit")


class DerError(ValueError):
    """Base class for every DER parsing problem."""


class DerSyntaxError(DerError):
    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        if line is not None:
            msg = f"line {line} column {col}: {msg}"
        super().__init__(msg)


class DerSchemaError(DerError):
    def __init__(self, msg: str, rule_index: int | None = None, path: str = ""):
        self.rule_index = rule_index
        self.path = path
        where = ""
        if rule_index is not None:
            where = f"rule {rule_index}"
            if path:
                where += f" field {path}"
            where += ": "
        super().__init__(where + msg)


class ByteStringError(DerError):
    pass


class WhereExprError(DerError):
    pass


# -- byte strings -------------------------------------------------------------

_ESCAPES_RE = re.compile(r"(?:\\x[0-9a-fA-F]{2})+")
_ESCAPE_START_RE = re.compile(r"\\x")


def decode_byte_string(literal: str) -> bytes:
    """Decode a DER byte literal.

    Escape-free strings become their UTF-8 bytes.  Strings using ``\\xHH``
    escapes must consist of escapes only.
    """
    if "\\x" not in literal:
        return literal.encode("utf-8", "surrogateescape")
    if _ESCAPES_RE.fullmatch(literal):
        return bytes.fromhex(literal.replace("\\x", ""))
    for m in _ESCAPE_START_RE.finditer(literal):
        unit = literal[m.start() : m.start() + 4]
        if not re.fullmatch(r"\\x[0-9a-fA-F]{2}", unit):
            raise ByteStringError(f"malformed escape {unit!r} at offset {m.start()}")
    raise ByteStringError(f"mixed literal and \\x-escaped content in {literal!r}")


def encode_byte_string(data: bytes) -> str:
    return "".join(f"\\x{b:02x}" for b in data)


# -- where expressions --------------------------------------------------------


@dataclass(frozen=True)
class ArgRef:
    index: int

    def __str__(self) -> str:
        return f"args{self.index}"


@dataclass(frozen=True)
class Literal:
    value: int
    hex: bool = True

    def __str__(self) -> str:
        return f"0x{self.value:x}" if self.hex else str(self.value)


Term = Union[ArgRef, Literal]


@dataclass(frozen=True)
class WhereExpr:
    """``term (('+'|'-') term)*`` with terms ``argsN``, hex or decimal literals."""

    terms: tuple[tuple[str, Term], ...]

    def __post_init__(self):
        if not self.terms:
            raise WhereExprError("empty expression")
        if self.terms[0][0] != "+":
            raise WhereExprError("expression cannot start with an operator")

    def __str__(self) -> str:
        out = str(self.terms[0][1])
        for op, term in self.terms[1:]:
            out += f" {op} {term}"
        return out

    @property
    def single_arg(self) -> int | None:
        """Argument index when the expression is a bare ``argsN``."""
        if len(self.terms) == 1 and isinstance(self.terms[0][1], ArgRef):
            return self.terms[0][1].index
        return None

    def evaluate(self, args: Sequence[int]) -> int:
        acc = 0
        for op, term in self.terms:
            v = args[term.index] if isinstance(term, ArgRef) else term.value
            acc = (acc + v) & MASK64 if op == "+" else (acc - v) & MASK64
        return acc


_WHERE_TOKEN_RE = re.compile(
    r"\s*(?:(?P<hex>0[xX][0-9a-fA-F]+)|(?P<dec>\d+)|(?P<ident>[A-Za-z_]\w*)"
    r"|(?P<op>[+-])|(?P<bad>\S))"
)
_ARGS_IDENT_RE = re.compile(r"args([0-5])")


def parse_where_expr(text: str) -> WhereExpr:
    terms: list[tuple[str, Term]] = []
    pending_op: str | None = "+"
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _WHERE_TOKEN_RE.match(text, pos)
        pos = m.end()
        kind = m.lastgroup
        tok = m.group(kind)
        if kind == "bad":
            raise WhereExprError(f"unexpected character {tok!r} in {text!r}")
        if kind == "op":
            if pending_op is not None:
                raise WhereExprError(f"operator {tok!r} without a left operand in {text!r}")
            pending_op = tok
            continue
        if pending_op is None:
            raise WhereExprError(f"missing operator before {tok!r} in {text!r}")
        if kind == "ident":
            am = _ARGS_IDENT_RE.fullmatch(tok)
            if not am:
                raise WhereExprError(f"unknown identifier {tok!r} in {text!r}")
            term: Term = ArgRef(int(am.group(1)))
        else:
            value = int(tok, 16 if kind == "hex" else 10)
            if value > MASK64:
                raise WhereExprError(f"literal {tok} does not fit in 64 bits")
            term = Literal(value, hex=kind == "hex")
        terms.append((pending_op, term))
        pending_op = None
    if not terms:
        raise WhereExprError("empty expression")
    if pending_op is not None:
        raise WhereExprError(f"trailing operator in {text!r}")
    return WhereExpr(tuple(terms))


def eval_where(expr: WhereExpr, event) -> int:
    return expr.evaluate(event.args)


DEFAULT_DATA_WHERE = WhereExpr((("+", ArgRef(0)),))


# -- argument specs and payloads ---------------------------------------------


@dataclass(frozen=True)
class Wildcard:
    index: int

    def __str__(self) -> str:
        return f"arg{self.index}"


@dataclass(frozen=True)
class RawValue:
    value: int
    hex: bool = True

    def __str__(self) -> str:
        return f"0x{self.value:x}" if self.hex else str(self.value)

    def matches(self, register: int) -> bool:
        return (self.value & MASK64) == (register & MASK64)


@dataclass(frozen=True)
class PathPrefix:
    prefix: str

    def __str__(self) -> str:
        return self.prefix


ArgSpec = Union[Wildcard, RawValue, PathPrefix]

_WILDCARD_RE = re.compile(r"arg(\d+)")
_HEX_RE = re.compile(r"0[xX][0-9a-fA-F]+")
_DEC_RE = re.compile(r"-?\d+")


def parse_arg_spec(key: int, text: str) -> ArgSpec:
    """Dispatch on surface form: ``argN``, numeric literal, else string prefix."""
    m = _WILDCARD_RE.fullmatch(text)
    if m:
        if int(m.group(1)) != key:
            raise DerError(f"wildcard {text!r} does not match argument index {key}")
        return Wildcard(key)
    if _HEX_RE.fullmatch(text):
        value = int(text, 16)
        if value > MASK64:
            raise DerError(f"value {text} does not fit in 64 bits")
        return RawValue(value, hex=True)
    if _DEC_RE.fullmatch(text):
        value = int(text)
        if not -(1 << 63) <= value <= MASK64:
            raise DerError(f"value {text} does not fit in 64 bits")
        return RawValue(value, hex=False)
    if not text:
        raise DerError("empty string argument spec")
    return PathPrefix(text)


@dataclass(frozen=True)
class Text:
    """Escape-free string; written to memory NUL-terminated."""

    value: str

    @property
    def pattern(self) -> bytes:
        return self.value.encode("utf-8", "surrogateescape")

    def to_bytes(self) -> bytes:
        return self.pattern + b"\0"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class RawBytes:
    """``\\xHH``-escaped payload; written verbatim."""

    value: bytes

    @property
    def pattern(self) -> bytes:
        return self.value

    def to_bytes(self) -> bytes:
        return self.value

    def __str__(self) -> str:
        return encode_byte_string(self.value)


Payload = Union[Text, RawBytes]


def parse_payload(literal: str) -> Payload:
    data = decode_byte_string(literal)
    if "\\x" in literal:
        return RawBytes(data)
    return Text(literal)


@dataclass(frozen=True)
class Retval:
    def __str__(self) -> str:
        return "retval"


RETVAL = Retval()
WhereTarget = Union[WhereExpr, Retval]


# -- rules -------------------------------------------------------------------


@dataclass(frozen=True)
class DerCondition:
    syscall: str
    comm: str | None = None
    tname: str | None = None
    args: Mapping[int, ArgSpec] = field(default_factory=dict)
    data: Payload | None = None
    data_where: WhereExpr | None = None
    phase: str = "enter"

    @property
    def data_address_expr(self) -> WhereExpr:
        return self.data_where if self.data_where is not None else DEFAULT_DATA_WHERE


@dataclass(frozen=True)
class DerEvasion:
    where: WhereTarget
    data: Union[Payload, int]
    revert_on_exit: bool = False

    @property
    def is_retval(self) -> bool:
        return isinstance(self.where, Retval)


@dataclass(frozen=True)
class DerRule:
    condition: DerCondition
    evasion: DerEvasion
    id: str = ""
    labelled: bool = field(default=False, compare=False)

    def summary(self) -> str:
        c, e = self.condition, self.evasion
        args = ", ".join(f"{i}={spec}" for i, spec in sorted(c.args.items()))
        parts = [f"[{self.id}] {c.syscall}@{c.phase}"]
        if c.comm is not None:
            parts.append(f"comm={c.comm}")
        if args:
            parts.append(f"args({args})")
        if c.data is not None:
            parts.append(f"data[{len(c.data.pattern)}]@{c.data_address_expr}")
        if e.is_retval:
            parts.append(f"-> retval := {e.data}")
        else:
            kind = "text" if isinstance(e.data, Text) else "bytes"
            parts.append(f"-> write {kind}[{len(e.data.to_bytes())}] at {e.where}")
        if e.revert_on_exit:
            parts.append("(revert on exit)")
        return " ".join(parts)


# -- parsing -----------------------------------------------------------------


def strip_comments(source: str) -> str:
    """Blank out ``/* */`` comments outside strings, keeping line/column layout."""
    out = []
    i, n = 0, len(source)
    in_str = False
    while i < n:
        ch = source[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(source[i + 1])
                i += 2
                continue
            if ch == '"':
                in_str = False
            i += 1
        elif ch == '"':
            in_str = True
            out.append(ch)
            i += 1
        elif source.startswith("/*", i):
            end = source.find("*/", i + 2)
            if end < 0:
                line = source.count("\n", 0, i) + 1
                col = i - source.rfind("\n", 0, i)
                raise DerSyntaxError("unterminated comment", line, col)
            out.append("".join(c if c == "\n" else " " for c in source[i : end + 2]))
            i = end + 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


class _Pairs(list):
    """Raw JSON object: key/value pairs in source order, duplicates kept."""


def _to_dict(pairs, rule_index, path) -> dict:
    if not isinstance(pairs, _Pairs):
        raise DerSchemaError("expected an object", rule_index, path)
    out = {}
    for k, v in pairs:
        if k in out:
            raise DerSchemaError(f"duplicate key {k!r}", rule_index, _join(path, k))
        out[k] = v
    return out


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _check_keys(obj: dict, allowed, required, rule_index, path):
    for k in obj:
        if k not in allowed:
            raise DerSchemaError(f"unknown field {k!r}", rule_index, _join(path, k))
    for k in required:
        if k not in obj:
            raise DerSchemaError(f"missing field {k!r}", rule_index, _join(path, k))


def _string(obj, key, rule_index, path) -> str:
    v = obj[key]
    if not isinstance(v, str):
        raise DerSchemaError("expected a string", rule_index, _join(path, key))
    return v


_CONDITION_KEYS = ("comm", "tname", "syscall", "args", "data", "data_where", "phase")
_EVASION_KEYS = ("where", "data", "revert_on_exit")
_SYSCALL_RE = re.compile(r"[a-z_][a-z0-9_]*")
_INDEX_RE = re.compile(r"\d+")


def _parse_condition(raw, idx) -> DerCondition:
    path = "condition"
    obj = _to_dict(raw, idx, path)
    _check_keys(obj, _CONDITION_KEYS, ("syscall",), idx, path)
    kw: dict = {}
    syscall = _string(obj, "syscall", idx, path)
    if not _SYSCALL_RE.fullmatch(syscall):
        raise DerSchemaError(f"bad syscall name {syscall!r}", idx, _join(path, "syscall"))
    for key in ("comm", "tname"):
        if key in obj:
            kw[key] = _string(obj, key, idx, path)
    if "phase" in obj:
        phase = _string(obj, "phase", idx, path)
        if phase not in PHASES:
            raise DerSchemaError(f"phase must be 'enter' or 'exit', got {phase!r}", idx, _join(path, "phase"))
        kw["phase"] = phase
    if "args" in obj:
        args_path = _join(path, "args")
        args_obj = _to_dict(obj["args"], idx, args_path)
        specs = {}
        for key, value in args_obj.items():
            kpath = _join(args_path, key)
            if not _INDEX_RE.fullmatch(key) or int(key) >= MAX_ARGS:
                raise DerSchemaError(f"argument index {key!r} outside 0..5", idx, kpath)
            if int(key) in specs:
                raise DerSchemaError(f"duplicate argument index {key!r}", idx, kpath)
            if not isinstance(value, str):
                raise DerSchemaError("expected a string", idx, kpath)
            try:
                specs[int(key)] = parse_arg_spec(int(key), value)
            except DerError as exc:
                raise DerSchemaError(str(exc), idx, kpath) from None
        kw["args"] = dict(sorted(specs.items()))
    if "data" in obj:
        try:
            kw["data"] = parse_payload(_string(obj, "data", idx, path))
        except ByteStringError as exc:
            raise ByteStringError(f"rule {idx} field {path}.data: {exc}") from None
    if "data_where" in obj:
        try:
            kw["data_where"] = parse_where_expr(_string(obj, "data_where", idx, path))
        except WhereExprError as exc:
            raise WhereExprError(f"rule {idx} field {path}.data_where: {exc}") from None
    return DerCondition(syscall=syscall, **kw)


def _parse_evasion(raw, idx, condition: DerCondition) -> DerEvasion:
    path = "evasion"
    obj = _to_dict(raw, idx, path)
    _check_keys(obj, _EVASION_KEYS, ("where", "data"), idx, path)
    where_text = _string(obj, "where", idx, path)
    revert = obj.get("revert_on_exit", False)
    if not isinstance(revert, bool):
        raise DerSchemaError("expected true or false", idx, _join(path, "revert_on_exit"))
    data = obj["data"]
    if where_text.strip() == "retval":
        if condition.phase != "exit":
            raise DerSchemaError("retval evasion requires condition phase 'exit'", idx, _join(path, "where"))
        if not isinstance(data, int) or isinstance(data, bool):
            raise DerSchemaError("retval evasion needs an integer payload", idx, _join(path, "data"))
        if revert:
            raise DerSchemaError("revert_on_exit only applies to memory writes", idx, _join(path, "revert_on_exit"))
        return DerEvasion(RETVAL, data)
    try:
        where = parse_where_expr(where_text)
    except WhereExprError as exc:
        raise WhereExprError(f"rule {idx} field {path}.where: {exc}") from None
    if not isinstance(data, str):
        raise DerSchemaError("memory evasion needs a string payload", idx, _join(path, "data"))
    try:
        payload = parse_payload(data)
    except ByteStringError as exc:
        raise ByteStringError(f"rule {idx} field {path}.data: {exc}") from None
    if revert and condition.phase == "exit":
        raise DerSchemaError("revert_on_exit needs an enter-phase condition", idx, _join(path, "revert_on_exit"))
    return DerEvasion(where, payload, revert)


def _parse_rule(raw, idx) -> DerRule:
    obj = _to_dict(raw, idx, "")
    _check_keys(obj, ("condition", "evasion", "id"), ("condition", "evasion"), idx, "")
    condition = _parse_condition(obj["condition"], idx)
    evasion = _parse_evasion(obj["evasion"], idx, condition)
    if "id" in obj:
        rule_id = _string(obj, "id", idx, "")
        if not rule_id:
            raise DerSchemaError("id must be non-empty", idx, "id")
        return DerRule(condition, evasion, rule_id, labelled=True)
    return DerRule(condition, evasion, str(idx))


def _position(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    return line, pos - text.rfind("\n", 0, pos)


def parse_der_file(source: str) -> list[DerRule]:
    text = strip_comments(source)
    decoder = json.JSONDecoder(object_pairs_hook=_Pairs)
    items = []
    pos = 0
    ws = re.compile(r"\s*")
    pos = ws.match(text, pos).end()
    if pos == len(text):
        raise DerSyntaxError("no rules found (empty file)")
    while pos < len(text):
        try:
            value, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise DerSyntaxError(exc.msg, exc.lineno, exc.colno) from None
        if isinstance(value, _Pairs):
            items.append(value)
        elif isinstance(value, list):
            items.extend(value)
        else:
            line, col = _position(text, pos)
            raise DerSyntaxError("expected a rule object or array", line, col)
        pos = ws.match(text, pos).end()
    rules = [_parse_rule(raw, i) for i, raw in enumerate(items)]
    seen = set()
    for i, rule in enumerate(rules):
        if rule.id in seen:
            raise DerSchemaError(f"duplicate rule id {rule.id!r}", i, "id")
        seen.add(rule.id)
    return rules


def load_der_file(path) -> list[DerRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_der_file(fh.read())


# -- serialization -----------------------------------------------------------


def _rule_to_obj(rule: DerRule) -> dict:
    c, e = rule.condition, rule.evasion
    cond: dict = {}
    if c.comm is not None:
        cond["comm"] = c.comm
    if c.tname is not None:
        cond["tname"] = c.tname
    cond["syscall"] = c.syscall
    if c.args:
        cond["args"] = {str(i): str(spec) for i, spec in sorted(c.args.items())}
    if c.data is not None:
        cond["data"] = str(c.data)
    if c.data_where is not None:
        cond["data_where"] = str(c.data_where)
    if c.phase != "enter":
        cond["phase"] = c.phase
    ev: dict = {"where": str(e.where)}
    ev["data"] = e.data if e.is_retval else str(e.data)
    if e.revert_on_exit:
        ev["revert_on_exit"] = True
    obj = {"condition": cond, "evasion": ev}
    if rule.labelled:
        obj["id"] = rule.id
    return obj


def serialize_rule(rule: DerRule) -> str:
    return json.dumps(_rule_to_obj(rule), indent=2, ensure_ascii=False)


def serialize_der(rules: Sequence[DerRule]) -> str:
    return json.dumps([_rule_to_obj(r) for r in rules], indent=2, ensure_ascii=False)
