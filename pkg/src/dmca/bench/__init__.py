"""Scenario generators, evaluation metrics, the episode runner and the CLI."""

from .metrics import (NR, Histogram, LinkCensus, MetricsReport, TrialResult, comm_histogram,
                      comm_link_census, report_from_logs, trial_result)
from .runner import PolicyPlanner, evaluate, make_planner, run_episode
from .scenarios import FAMILIES, Scenario, ScenarioError, default_circle_radius, gen_scenario

__all__ = [
    "NR", "Histogram", "LinkCensus", "MetricsReport", "TrialResult", "comm_histogram", "comm_link_census",
    "report_from_logs", "trial_result", "PolicyPlanner", "evaluate", "make_planner", "run_episode",
    "FAMILIES", "Scenario", "ScenarioError", "default_circle_radius", "gen_scenario",
]
