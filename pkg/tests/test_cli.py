import json
from importlib import resources

import pytest

from derkit.cli import main
from derkit.fixtures import region_listing_text
from derkit.scenarios import list_scenarios

RULES = resources.files("derkit.rules")


@pytest.fixture
def files(tmp_path):
    trace = tmp_path / "listing.jsonl"
    trace.write_text(region_listing_text())
    listing = tmp_path / "reference.der"
    listing.write_text(RULES.joinpath("reference.der").read_text())
    ex1 = tmp_path / "ex1.der.json"
    ex1.write_text(RULES.joinpath("task_stat_scan.der.json").read_text())
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    return tmp_path, trace, listing, ex1, empty


def test_validate(files, capsys):
    tmp, _, listing, _, _ = files
    assert main(["validate", str(listing)]) == 0
    out = capsys.readouterr().out
    assert "2 rule(s)" in out and "mprotect@enter" in out
    blank = tmp / "blank.der"
    blank.write_text("")
    assert main(["validate", str(blank)]) == 2
    bad = tmp / "bad.der"
    bad.write_text('{"condition": {"syscall": "openat", "args": {"7": "0x1"}}, "evasion": {"where": "args1", "data": "x"}}')
    assert main(["validate", str(bad)]) == 2
    assert "condition.args.7" in capsys.readouterr().err
    assert main(["validate", str(tmp / "missing")]) == 2


def test_validate_json(files, capsys):
    _, _, listing, _, _ = files
    assert main(["validate", str(listing), "--json"]) == 0
    assert [r["id"] for r in json.loads(capsys.readouterr().out)["rules"]] == ["0", "1"]


def test_replay(files, capsys):
    tmp, trace, _, ex1, empty = files
    log = tmp / "actions.jsonl"
    assert main(["replay", "--trace", str(trace), "--der", str(empty), "--log", str(log)]) == 0
    assert log.read_text() == ""
    assert main(["replay", "--trace", str(trace), "--der", str(ex1), "--log", str(log)]) == 0
    [entry] = [json.loads(line) for line in log.read_text().splitlines()]
    assert entry["action"] == "arg-buffer-rewrite" and entry["outcome"] == "applied"
    capsys.readouterr()
    assert main(["replay", "--trace", str(trace), "--der", str(ex1), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["actions"][0]["rule"] == "0"


def test_replay_errors(files, capsys):
    tmp, trace, _, ex1, _ = files
    corrupt = tmp / "corrupt.jsonl"
    lines = region_listing_text().splitlines()
    lines[4] = lines[4][:-5]
    corrupt.write_text("\n".join(lines))
    assert main(["replay", "--trace", str(corrupt), "--der", str(ex1)]) == 2
    assert "line 5" in capsys.readouterr().err
    # a denied action is a failure, not a usage error
    bad = tmp / "denied.der.json"
    bad.write_text('{"condition": {"syscall": "openat"}, "evasion": {"where": "args1 + 0x10000000", "data": "x"}}')
    assert main(["replay", "--trace", str(trace), "--der", str(bad), "--log", str(tmp / "l")]) == 1


def test_scenario_run(files, capsys):
    tmp = files[0]
    assert main(["scenario", "run", "tracerpid"]) == 1
    assert "detected" in capsys.readouterr().out
    assert main(["scenario", "run", "tracerpid", "--shipped"]) == 0
    assert main(["scenario", "run", "tracerpid", "--der", str(RULES.joinpath("tracerpid.der.json"))]) == 0
    assert main(["scenario", "run", "tracerpid", "--set", "tracer_pid=0"]) == 0
    capsys.readouterr()
    assert main(["scenario", "run", "frida_port_scan", "--shipped", "--json", "--trace-out", str(tmp / "t.jsonl")]) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["survived"] is True and obj["actions"][0]["action"] == "retval-override"
    assert (tmp / "t.jsonl").read_text().count("\n") == obj["events"]


@pytest.mark.parametrize(
    "argv",
    [
        ["scenario", "run", "nope"],
        ["scenario", "run", "java_debugger"],
        ["scenario", "run", "tracerpid", "--set", "oops"],
        ["scenario", "run", "tracerpid", "--set", "bogus=1"],
        ["scenario", "run", "tracerpid", "--der", "/does/not/exist"],
        ["scenario", "run", "tracerpid", "--shipped", "--der", "x"],
        ["scenario"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors(argv):
    assert main(argv) == 2


def test_scenario_list(capsys):
    assert main(["scenario", "list"]) == 0
    out = capsys.readouterr().out
    assert all(s.name in out for s in list_scenarios())
    assert main(["scenario", "list", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {r["name"] for r in rows} == {s.name for s in list_scenarios()}


def test_map(files, capsys):
    tmp, trace, _, _, _ = files
    out = tmp / "report.txt"
    assert main(["map", "--trace", str(trace), "--out", str(out)]) == 0
    report = out.read_text()
    assert "[region 94] 0x7a41c45000 - 0x7a41d235c0 (r-x)\nopenat(*pathname=0x7a41d2d030(/proc/self/status))\n" in report
    assert "[/proc/self/wchan]" in capsys.readouterr().out

    out1 = tmp / "report1.txt"
    assert main(["map", "--trace", str(trace), "--out", str(out1), "--frame", "1"]) == 0
    assert out1.read_text() != report
    assert "[region 94] 0x7a41c45000 - 0x7a41d235c0 (r-x)\n[region 95]" in out1.read_text()

    cat = tmp / "cat.tsv"
    cat.write_text("misc-native\tpath\t/system/lib64/liblog.so\n")
    capsys.readouterr()
    assert main(["map", "--trace", str(trace), "--out", str(out), "--catalog", str(cat), "--json"]) == 0
    flags = json.loads(capsys.readouterr().out)["flags"]
    assert [f["artifact"] for f in flags] == ["/system/lib64/liblog.so"]

    assert main(["map", "--trace", str(tmp / "missing"), "--out", str(out)]) == 2
    cat.write_text("bad line\n")
    assert main(["map", "--trace", str(trace), "--out", str(out), "--catalog", str(cat)]) == 2
    assert main(["map", "--trace", str(trace), "--out", str(out), "--frame", "-1"]) == 2
