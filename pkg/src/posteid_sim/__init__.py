"""Desk-scale simulator of the PosteID device-activation protocol and an
Attacker-in-the-Device privilege escalation against it."""

from .scenario import ScenarioConfig, ScenarioName, run_scenario, simulate, verify_transcript
from .server import PolicyConfig, PolicyMode

__all__ = [
    "PolicyConfig",
    "PolicyMode",
    "ScenarioConfig",
    "ScenarioName",
    "run_scenario",
    "simulate",
    "verify_transcript",
]
