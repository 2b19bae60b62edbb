import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derkit.der import (
    RETVAL,
    ArgRef,
    ByteStringError,
    DerSchemaError,
    DerSyntaxError,
    Literal,
    PathPrefix,
    RawBytes,
    RawValue,
    Text,
    WhereExprError,
    Wildcard,
    decode_byte_string,
    encode_byte_string,
    parse_arg_spec,
    parse_der_file,
    parse_payload,
    parse_where_expr,
    serialize_der,
    strip_comments,
)
from helpers import naive_where


def rule(cond=None, ev=None, **extra):
    obj = {
        "condition": {"comm": "com.example.test", "tname": "*", "syscall": "openat", **(cond or {})},
        "evasion": {"where": "args1", "data": "/x", **(ev or {})},
    }
    obj.update(extra)
    return json.dumps(obj)


# -- byte strings and payloads


def test_decode_plain_and_escaped():
    assert decode_byte_string("/proc") == b"/proc"
    assert decode_byte_string("\\x28\\x10\\x80\\xD2") == bytes.fromhex("281080d2")
    assert decode_byte_string("") == b""


@pytest.mark.parametrize("bad", ["a\\x00", "\\x0g", "\\x1", "\\x00b"])
def test_decode_rejects_mixed_or_malformed(bad):
    with pytest.raises(ByteStringError):
        decode_byte_string(bad)


@given(st.binary(max_size=64))
def test_byte_string_round_trip(data):
    assert decode_byte_string(encode_byte_string(data)) == data


def test_payload_forms():
    t = parse_payload("/data/local/tmp/fake")
    assert isinstance(t, Text) and t.to_bytes() == b"/data/local/tmp/fake\0"
    assert t.pattern == b"/data/local/tmp/fake"
    r = parse_payload("\\x00\\x01")
    assert isinstance(r, RawBytes) and r.to_bytes() == b"\0\1" == r.pattern


# -- arg specs


def test_arg_spec_dispatch():
    assert parse_arg_spec(0, "arg0") == Wildcard(0)
    assert parse_arg_spec(1, "0xde5c0") == RawValue(0xDE5C0)
    assert parse_arg_spec(2, "5") == RawValue(5, hex=False)
    assert parse_arg_spec(1, "/proc/self/task/") == PathPrefix("/proc/self/task/")


def test_wildcard_must_name_its_own_slot():
    with pytest.raises(DerSchemaError):
        parse_der_file(rule({"args": {"1": "arg0"}}))


def test_raw_value_matches_register():
    assert RawValue(5).matches(5) and not RawValue(5).matches(7)


# -- where expressions


@pytest.mark.parametrize(
    "text,canon",
    [("args1", "args1"), ("args0+0x6aae4", "args0 + 0x6aae4"), ("args2 -  16 + args3", "args2 - 16 + args3")],
)
def test_where_canonical_form(text, canon):
    assert str(parse_where_expr(text)) == canon


def test_where_terms():
    e = parse_where_expr("args0 + 0x6aae4")
    assert e.terms == (("+", ArgRef(0)), ("+", Literal(0x6AAE4)))
    assert e.single_arg is None and parse_where_expr("args3").single_arg == 3


def test_where_wraps_64_bits():
    assert parse_where_expr("args0 - 1").evaluate([0] * 6) == (1 << 64) - 1
    assert parse_where_expr("args0 + 0x10").evaluate([(1 << 64) - 8] + [0] * 5) == 8


@pytest.mark.parametrize("bad", ["", "+ args1", "args1 +", "args6", "argz", "args1 * 2", "args1 args2", "0x1" + "0" * 17])
def test_where_rejects(bad):
    with pytest.raises(WhereExprError):
        parse_where_expr(bad)


term = st.one_of(
    st.integers(0, 5).map(lambda i: f"args{i}"),
    st.integers(0, (1 << 64) - 1).map(hex),
    st.integers(0, (1 << 64) - 1).map(str),
)


@settings(max_examples=1000)
@given(st.lists(st.tuples(st.sampled_from("+-"), term), min_size=1, max_size=8),
       st.lists(st.integers(0, (1 << 64) - 1), min_size=6, max_size=6))
def test_where_matches_naive_interpreter(parts, args):
    text = parts[0][1] + "".join(f" {op} {t}" for op, t in parts[1:])
    expr = parse_where_expr(text)
    assert expr.evaluate(args) == naive_where(text, args)
    assert str(parse_where_expr(str(expr))) == str(expr)


# -- files


def test_concatenated_objects_and_arrays():
    two = rule() + "\n" + rule({"syscall": "read"})
    assert [r.id for r in parse_der_file(two)] == ["0", "1"]
    arr = "[" + rule() + "," + rule() + "]"
    assert len(parse_der_file(arr)) == 2
    assert parse_der_file("[]") == []


def test_comments_keep_positions():
    src = '/* a\n comment */ {"x": 1}'
    out = strip_comments(src)
    assert len(out) == len(src) and out.count("\n") == 1
    assert strip_comments('{"s": "/* not a comment */"}') == '{"s": "/* not a comment */"}'


def test_syntax_error_has_location():
    with pytest.raises(DerSyntaxError) as e:
        parse_der_file('{\n  "condition": {,}\n}')
    assert e.value.line == 2


@pytest.mark.parametrize("src", ["", "   ", "/* only a comment */", "/* open"])
def test_empty_or_unterminated(src):
    with pytest.raises(DerSyntaxError):
        parse_der_file(src)


@pytest.mark.parametrize(
    "text,field",
    [
        (rule({"args": {"7": "0x1"}}), "condition.args.7"),
        (rule({"args": {"x": "0x1"}}), "condition.args.x"),
        (rule({"phase": "middle"}), "condition.phase"),
        (rule({"bogus": 1}), "condition.bogus"),
        (rule(ev={"where": "retval", "data": "5"}), "evasion.where"),
        (rule({"phase": "exit"}, {"where": "retval", "data": "x"}), "evasion.data"),
        (rule({"phase": "exit"}, {"revert_on_exit": True}), "evasion.revert_on_exit"),
        (rule(ev={"data": "a\\\\x00"}), "evasion.data"),
        ('{"condition": {"syscall": "openat", "syscall": "read"}, "evasion": {"where": "args1", "data": "x"}}',
         "condition.syscall"),
    ],
)
def test_schema_errors_name_the_field(text, field):
    with pytest.raises(Exception) as e:
        parse_der_file(text)
    assert field in str(e.value)


def test_missing_syscall_rejected():
    with pytest.raises(DerSchemaError):
        parse_der_file('{"condition": {"comm": "a"}, "evasion": {"where": "args1", "data": "x"}}')


def test_retval_rule():
    [r] = parse_der_file(rule({"phase": "exit"}, {"where": "retval", "data": -2}))
    assert r.evasion.is_retval and r.evasion.where is RETVAL and r.evasion.data == -2


def test_ids():
    rs = parse_der_file(rule(id="hide-status") + rule())
    assert [r.id for r in rs] == ["hide-status", "1"]
    with pytest.raises(DerSchemaError):
        parse_der_file(rule(id="a") + rule(id="a"))


def test_serialize_round_trip_defaults_omitted():
    rs = parse_der_file(rule() + rule({"phase": "exit", "data": "\\x01", "data_where": "args2"}, {"where": "retval", "data": 0}))
    out = serialize_der(rs)
    back = parse_der_file(out)
    assert back == rs and serialize_der(back) == out
    first = json.loads(out)[0]
    assert "phase" not in first["condition"] and "revert_on_exit" not in first["evasion"]
    assert serialize_der([]) == "[]"


payload = st.one_of(
    st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\\"), max_size=12),
    st.binary(min_size=1, max_size=12).map(encode_byte_string),
)


@given(
    syscall=st.sampled_from(["openat", "read", "mprotect", "connect"]),
    args=st.dictionaries(st.integers(0, 5), st.one_of(st.just("w"), st.integers(0, 2**64 - 1).map(hex), st.just("/p/")), max_size=3),
    data=st.one_of(st.none(), st.binary(min_size=1, max_size=8).map(encode_byte_string)),
    phase=st.sampled_from(["enter", "exit"]),
    where=st.sampled_from(["args1", "args0 + 0x10", "args2 - 8"]),
    out=payload,
    revert=st.booleans(),
)
def test_generated_rules_round_trip(syscall, args, data, phase, where, out, revert):
    cond = {"syscall": syscall, "phase": phase,
            "args": {str(k): (f"arg{k}" if v == "w" else v) for k, v in args.items()}}
    if data is not None:
        cond["data"] = data
    ev = {"where": where, "data": out}
    if revert and phase == "enter":
        ev["revert_on_exit"] = True
    rs = parse_der_file(json.dumps({"condition": cond, "evasion": ev}))
    assert parse_der_file(serialize_der(rs)) == rs
