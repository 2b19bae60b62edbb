"""Simulated packed-app scenarios used as the evasion ground truth."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

from ..der import DerRule, parse_der_file
from ..engine import Action, Engine, run
from ..events import SyscallEvent
from ..memory import Snapshot
from .catalog import SCENARIOS, Scenario
from .sim import Detection, SimProcess, Terminated

__all__ = [
    "DEFAULT_ENV",
    "Scenario",
    "ScenarioOutcome",
    "ScenarioSource",
    "UnknownScenario",
    "UnsupportedScenario",
    "list_scenarios",
    "make_env",
    "run_scenario",
    "shipped_rules",
]

# The default environment is an instrumented device: every artifact present.
DEFAULT_ENV = {
    "tracer_pid": 7777,
    "frida_server_present": True,
    "frida_server_running": True,
    "frida_agent_loaded": True,
    "frida_threads": True,
    "magisk_present": True,
    "hook_delay_ns": 250_000_000,
    "open_ports": frozenset({27049}),
}

_PORT_KEY = re.compile(r"port_(\d+)_open")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UnknownScenario(KeyError):
    pass


class UnsupportedScenario(ValueError):
    pass


def _parse_bool(key, value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


def make_env(overrides: Mapping[str, object] | None = None) -> dict:
    """Default environment with ``key=value`` overrides applied.

    ``port_N_open`` toggles whether loopback port N accepts connections.
    """
    env = dict(DEFAULT_ENV)
    ports = set(env["open_ports"])
    for key, value in (overrides or {}).items():
        m = _PORT_KEY.fullmatch(key)
        if m:
            (ports.add if _parse_bool(key, value) else ports.discard)(int(m.group(1)))
            continue
        if key not in env or key == "open_ports":
            raise ValueError(f"unknown environment key {key!r}")
        if isinstance(env[key], bool):
            env[key] = _parse_bool(key, value)
        else:
            try:
                env[key] = value if isinstance(value, int) else int(str(value), 0)
            except ValueError:
                raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    env["open_ports"] = frozenset(ports)
    return env


def list_scenarios() -> list[Scenario]:
    return list(SCENARIOS.values())


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None


def shipped_rules_text(name: str) -> str:
    return resources.files("derkit.rules").joinpath(f"{name}.der.json").read_text(encoding="utf-8")


def shipped_rules(name: str) -> list[DerRule]:
    return parse_der_file(shipped_rules_text(name))


@dataclass
class ScenarioOutcome:
    scenario: str
    survived: bool
    detections: list[Detection]
    events_emitted: list[SyscallEvent]
    patches_observed: int
    reaction: str | None
    actions: list[Action] = field(default_factory=list)
    snapshot: Snapshot | None = None

    def to_obj(self) -> dict:
        return {
            "scenario": self.scenario,
            "survived": self.survived,
            "reaction": self.reaction,
            "detections": [{"check": d.check, "evidence": d.evidence} for d in self.detections],
            "patches_observed": self.patches_observed,
            "events": len(self.events_emitted),
            "actions": [a.to_obj() for a in self.actions],
        }


class ScenarioSource:
    """Event source backed by a live simulated process."""

    prefer_deref = False

    def __init__(self, scenario: Scenario, env: dict):
        self.scenario = scenario
        self.process = SimProcess(env)
        self.space = self.process.space

    def drive(self, engine: Engine | None) -> list[SyscallEvent]:
        p = self.process
        p.engine = engine
        try:
            p.boot()
            self.scenario.script(p)
        except Terminated:
            pass
        return p.events


def run_scenario(
    name: str,
    rules: Sequence[DerRule] | None = None,
    overrides: Mapping[str, object] | None = None,
) -> ScenarioOutcome:
    """Run one scenario; ``rules=None`` leaves the engine out entirely."""
    scenario = get_scenario(name)
    if not scenario.supported:
        raise UnsupportedScenario(f"{name}: {scenario.description}")
    source = ScenarioSource(scenario, make_env(overrides))
    result = run(rules, source)
    detections = source.process.detections
    return ScenarioOutcome(
        scenario=name,
        survived=not detections,
        detections=list(detections),
        events_emitted=result.events,
        patches_observed=sum(1 for a in result.log if a.applied and a.action != "revert"),
        reaction=scenario.reaction if detections else None,
        actions=result.log,
        snapshot=result.space.snapshot(),
    )
