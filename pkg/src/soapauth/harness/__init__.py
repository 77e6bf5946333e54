"""Adversarial scenario engine and trace-property checkers."""

from ..trace import Trace, TraceEvent
from .checks import (
    ALLOWED_OBSERVATION_FIELDS,
    Verdict,
    check_privacy_leakage,
    check_sender_correspondence,
    minimal_witness,
)
from .scenario import (
    Scenario,
    ScenarioOutcome,
    ScenarioRun,
    evaluate_expectations,
    execute,
    run_scenario,
)
from .world import ADVERSARY, DIRECTIVES, IdpSpec, World, WorldConfig

__all__ = [
    "ADVERSARY", "ALLOWED_OBSERVATION_FIELDS", "DIRECTIVES", "IdpSpec", "Scenario", "ScenarioOutcome",
    "ScenarioRun", "Trace", "TraceEvent", "Verdict", "World", "WorldConfig", "check_privacy_leakage",
    "check_sender_correspondence", "evaluate_expectations", "execute", "minimal_witness", "run_scenario",
]
