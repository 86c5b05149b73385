"""Per-step episode records and their JSON-lines export.

File layout: the first line is a header object, then one object per
(t, agent_id) for every agent that was active at the start of step t.
Step record fields, in this order:

    t         step index (1 = first step)
    agent_id
    p         [x, y] after the step
    v         [vx, vy] after the step
    psi       heading after the step
    action    [speed, psi_cmd] as commanded
    reward    scalar reward for this step (includes the link cost)
    links     ids of neighbours whose hidden state was requested
    status    "active" | "at_goal" | "collided" after the step
    d_min     clearance to the closest body (null when none)
    nbrs      [[id, x_ego, y_ego, link], ...] agent neighbours in the ego frame
              at decision time, link in {0, 1}

Floats are written with Python's shortest round-trip repr, so a log written
twice from the same run is byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .core import AgentState


@dataclass
class StepRecord:
    t: int
    agent_id: int
    p: tuple
    v: tuple
    psi: float
    action: tuple
    reward: float
    links: list
    status: str
    d_min: float | None
    nbrs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "t": self.t, "agent_id": self.agent_id, "p": list(self.p), "v": list(self.v),
            "psi": self.psi, "action": list(self.action), "reward": self.reward,
            "links": list(self.links), "status": self.status,
            "d_min": None if self.d_min is None or math.isinf(self.d_min) else self.d_min,
            "nbrs": [list(n) for n in self.nbrs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "StepRecord":
        return cls(t=d["t"], agent_id=d["agent_id"], p=tuple(d["p"]), v=tuple(d["v"]),
                   psi=d["psi"], action=tuple(d["action"]), reward=d["reward"],
                   links=list(d["links"]), status=d["status"], d_min=d["d_min"],
                   nbrs=[list(n) for n in d.get("nbrs", [])])


def agent_header(a: AgentState) -> dict:
    return {"id": a.id, "p": list(a.p.astuple()), "v": list(a.v.astuple()), "psi": a.psi,
            "r": a.r, "v_pref": a.v_pref, "g": list(a.g.astuple())}


@dataclass
class EpisodeLog:
    header: dict
    records: list[StepRecord] = field(default_factory=list)

    @property
    def agent_ids(self) -> list[int]:
        return [a["id"] for a in self.header["agents"]]

    @property
    def n_steps(self) -> int:
        return max((r.t for r in self.records), default=0)

    def by_agent(self) -> dict[int, list[StepRecord]]:
        out = {i: [] for i in self.agent_ids}
        for r in self.records:
            out[r.agent_id].append(r)
        return out

    def final_status(self) -> dict[int, str]:
        out = {i: "active" for i in self.agent_ids}
        for r in self.records:
            out[r.agent_id] = r.status
        return out

    def goal_steps(self) -> dict[int, int]:
        """Step at which each agent reached its goal (agents that never did are absent)."""
        return {r.agent_id: r.t for r in self.records if r.status == "at_goal"}

    def completion_step(self) -> int | None:
        """Step at which the last agent reached its goal, or None if any agent did not."""
        steps = self.goal_steps()
        if len(steps) != len(self.agent_ids):
            return None
        return max(steps.values(), default=0)

    def returns(self) -> dict[int, float]:
        out = {i: 0.0 for i in self.agent_ids}
        for r in self.records:
            out[r.agent_id] += r.reward
        return out

    def dumps(self) -> str:
        lines = [json.dumps({"kind": "header", **self.header})]
        lines += [json.dumps({"kind": "step", **r.to_json()}) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EpisodeLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty episode log")
        head = json.loads(lines[0])
        if head.pop("kind", None) != "header":
            raise ValueError("episode log must start with a header record")
        recs = []
        for ln in lines[1:]:
            d = json.loads(ln)
            if d.pop("kind", None) != "step":
                raise ValueError(f"unexpected record kind in {ln[:60]!r}")
            recs.append(StepRecord.from_json(d))
        return cls(head, recs)

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        return cls.loads(Path(path).read_text())
