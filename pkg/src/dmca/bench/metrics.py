"""Evaluation metrics over episode logs.

Conventions for a population of trials:

* an agent succeeds if it ends at its goal (reaching the goal before t_max
  without colliding), collides if it ends collided, and is deadlocked
  otherwise; the three rates sum to 1 in every trial;
* rates are averaged over trials;
* time to goal averages the completion step (last agent at goal) over the
  trials in which every agent succeeded, and is ``NR`` when there are none.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..episode import EpisodeLog

NR = "NR"


@dataclass(frozen=True)
class TrialResult:
    seed: int | None
    n_agents: int
    n_success: int
    n_collided: int
    n_deadlock: int
    completion_step: int | None
    steps: int
    links_per_agent: float

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_agents

    @property
    def collision_rate(self) -> float:
        return self.n_collided / self.n_agents

    @property
    def deadlock_rate(self) -> float:
        return self.n_deadlock / self.n_agents


def trial_result(log: EpisodeLog) -> TrialResult:
    final = log.final_status()
    n = len(final)
    succ = sum(s == "at_goal" for s in final.values())
    coll = sum(s == "collided" for s in final.values())
    census = comm_link_census([log])[0]
    return TrialResult(seed=log.header.get("seed"), n_agents=n, n_success=succ, n_collided=coll,
                       n_deadlock=n - succ - coll, completion_step=log.completion_step(),
                       steps=log.n_steps, links_per_agent=sum(census.per_agent.values()) / max(n, 1))


@dataclass
class MetricsReport:
    success_rate: float
    collision_rate: float
    deadlock_rate: float
    time_to_goal: float | str      # completion steps, or NR
    time_to_goal_s: float | str    # the same in seconds
    mean_links_per_agent: float
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate, "collision_rate": self.collision_rate,
            "deadlock_rate": self.deadlock_rate, "time_to_goal": self.time_to_goal,
            "time_to_goal_s": self.time_to_goal_s, "mean_links_per_agent": self.mean_links_per_agent,
            "n_trials": self.n_trials,
            "trials": [{**t.__dict__} for t in self.trials],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self, title: str = "") -> str:
        ttg = self.time_to_goal_s if self.time_to_goal_s == NR else f"{self.time_to_goal_s:.1f} s"
        rows = [
            ("trials", str(self.n_trials)),
            ("success rate", f"{self.success_rate:.2f}"),
            ("collision rate", f"{self.collision_rate:.2f}"),
            ("deadlock rate", f"{self.deadlock_rate:.2f}"),
            ("time to goal", ttg),
            ("links / agent", f"{self.mean_links_per_agent:.1f}"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [title] if title else []
        lines += [f"{k:<{width}}  {v}" for k, v in rows]
        return "\n".join(lines)


def report_from_logs(logs: list[EpisodeLog], dt: float | None = None) -> MetricsReport:
    if not logs:
        raise ValueError("no episode logs to aggregate")
    trials = [trial_result(log) for log in logs]
    done = [t.completion_step for t in trials if t.completion_step is not None]
    dt = dt if dt is not None else logs[0].header.get("dt", 0.1)
    ttg = sum(done) / len(done) if done else NR
    return MetricsReport(
        success_rate=sum(t.success_rate for t in trials) / len(trials),
        collision_rate=sum(t.collision_rate for t in trials) / len(trials),
        deadlock_rate=sum(t.deadlock_rate for t in trials) / len(trials),
        time_to_goal=ttg,
        time_to_goal_s=ttg if ttg == NR else ttg * dt,
        mean_links_per_agent=sum(t.links_per_agent for t in trials) / len(trials),
        trials=trials,
    )


@dataclass
class LinkCensus:
    per_agent: dict[int, int]        # granted links summed over the episode
    broadcast: dict[int, int]        # steps x neighbours a broadcast scheme would contact


def comm_link_census(logs: list[EpisodeLog], bound: float | None = None) -> list[LinkCensus]:
    """Per-agent link totals, plus the broadcast-equivalent count.

    With ``bound=None`` the broadcast estimate counts every other agent still
    acting at each step; otherwise only logged neighbours closer than ``bound``.
    """
    out = []
    for log in logs:
        per = {i: 0 for i in log.agent_ids}
        bcast = {i: 0 for i in log.agent_ids}
        acting: dict[int, int] = {}
        for r in log.records:
            acting[r.t] = acting.get(r.t, 0) + 1
        for r in log.records:
            per[r.agent_id] += len(r.links)
            if bound is None:
                bcast[r.agent_id] += acting[r.t] - 1
            else:
                bcast[r.agent_id] += sum(1 for n in r.nbrs if math.hypot(n[1], n[2]) < bound)
        out.append(LinkCensus(per, bcast))
    return out


@dataclass
class Histogram:
    """Mean link decision per ego-frame cell; NaN marks cells with no samples."""
    x_edges: np.ndarray
    y_edges: np.ndarray
    mean: np.ndarray     # (nx, ny)
    count: np.ndarray    # (nx, ny)

    def rows(self):
        """(x_center, y_center, mean, count) for every occupied cell."""
        xc = (self.x_edges[:-1] + self.x_edges[1:]) / 2
        yc = (self.y_edges[:-1] + self.y_edges[1:]) / 2
        for a in range(len(xc)):
            for b in range(len(yc)):
                if self.count[a, b]:
                    yield float(xc[a]), float(yc[b]), float(self.mean[a, b]), int(self.count[a, b])

    def to_csv(self) -> str:
        lines = ["x,y,mean_link,count"]
        lines += [f"{x},{y},{m},{c}" for x, y, m, c in self.rows()]
        return "\n".join(lines) + "\n"


def comm_histogram(logs: list[EpisodeLog], half_width: float = 4.0, cell: float = 0.25) -> Histogram:
    n = int(round(2 * half_width / cell))
    edges = np.linspace(-half_width, half_width, n + 1)
    total = np.zeros((n, n))
    count = np.zeros((n, n), dtype=np.int64)
    for log in logs:
        for r in log.records:
            for _, x, y, link in r.nbrs:
                if -half_width <= x < half_width and -half_width <= y < half_width:
                    a = min(int((x + half_width) // cell), n - 1)
                    b = min(int((y + half_width) // cell), n - 1)
                    total[a, b] += link
                    count[a, b] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return Histogram(edges, edges.copy(), mean, count)
