"""Benchmark scenario families.

Every family builds agents with ids 0..n-1, zero initial velocity and a
heading pointing at the goal. Geometry defaults are configurable on
:class:`Scenario`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..core import AgentState, Vec2
from ..sim import Obstacle, World, WorldConfig

FAMILIES = ("circle", "swap", "grid_formation", "random", "static_obstacle_swap")
START_EPS = 1e-6


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """Description of one scenario instance.

    ``radius`` is either a fixed agent radius or a (lo, hi) range sampled per
    agent from ``seed``. ``circle_radius=None`` picks :func:`default_circle_radius`.
    """
    family: str
    n_agents: int
    radius: float | tuple = 0.2
    v_pref: float = 1.0
    seed: int = 0
    circle_radius: float | None = None
    spacing: float = 1.0          # swap row spacing and grid spacing
    gap: float = 4.0              # distance between the swap columns
    workspace: float = 4.0        # random scenarios: half-width of the square
    clearance: float = 0.1        # random scenarios: extra gap between sampled disks
    n_obstacles: int = 2
    obstacle_radius: float = 0.3
    max_tries: int = 10000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ScenarioError(f"unknown scenario family {self.family!r}; expected one of {FAMILIES}")
        if self.n_agents < 1:
            raise ScenarioError("n_agents must be >= 1")

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario(**{**asdict(self), "seed": seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["radius"], tuple):
            d["radius"] = list(d["radius"])
        return d


def default_circle_radius(n: int, r: float) -> float:
    """At least 3 m, and large enough that neighbours are >= 4 r apart along the arc."""
    return max(3.0, 2.0 * n * r / math.pi)


def _radii(spec: Scenario, rng) -> list[float]:
    if isinstance(spec.radius, (tuple, list)):
        lo, hi = spec.radius
        if not 0 < lo <= hi:
            raise ScenarioError(f"bad radius range {spec.radius}")
        return [float(x) for x in rng.uniform(lo, hi, spec.n_agents)]
    if spec.radius <= 0:
        raise ScenarioError("radius must be > 0")
    return [float(spec.radius)] * spec.n_agents


def _agent(k, p: Vec2, g: Vec2, r, v_pref) -> AgentState:
    d = g - p
    psi = d.angle() if d.norm() > 0 else 0.0
    return AgentState(id=k, p=p, v=Vec2(0.0, 0.0), psi=psi, r=r, v_pref=v_pref, g=g)


def _circle(spec, radii):
    R = spec.circle_radius or default_circle_radius(spec.n_agents, max(radii))
    out = []
    for k in range(spec.n_agents):
        th = 2 * math.pi * k / spec.n_agents
        p = Vec2(R * math.cos(th), R * math.sin(th))
        g = Vec2(R * math.cos(th + math.pi), R * math.sin(th + math.pi))
        out.append((p, g))
    return out


def _columns(spec):
    """Two facing columns; row k of the left column swaps with row k of the right."""
    n = spec.n_agents
    left = (n + 1) // 2
    pairs = []
    for k in range(n):
        row = k if k < left else k - left
        rows = left if k < left else n - left
        y = (row - (rows - 1) / 2) * spec.spacing
        x = -spec.gap / 2 if k < left else spec.gap / 2
        pairs.append((Vec2(x, y), Vec2(-x, y)))
    return pairs


def _grid(spec):
    m = math.isqrt(spec.n_agents)
    if m * m != spec.n_agents:
        raise ScenarioError(f"grid_formation needs a square agent count, got {spec.n_agents}")
    c = (m + 1) / 2

    def pos(row, col):
        return Vec2((col - c) * spec.spacing, (c - row) * spec.spacing)

    out = []
    for row in range(1, m + 1):
        for col in range(1, m + 1):
            out.append((pos(row, col), pos(m - row + 1, m - col + 1)))
    return out


def _sample_disks(rng, radii, half, clearance, max_tries, fixed=()):
    """Rejection-sample non-overlapping centres in [-half, half]^2."""
    placed = list(fixed)
    out = []
    for r in radii:
        for _ in range(max_tries):
            p = Vec2(*rng.uniform(-half + r, half - r, 2))
            if all((p - q).norm() >= r + rq + clearance for q, rq in placed):
                placed.append((p, r))
                out.append(p)
                break
        else:
            raise ScenarioError(f"could not place {len(radii)} disks in a {2 * half} m square "
                                f"after {max_tries} attempts per disk")
    return out


def _random(spec, radii, rng):
    if spec.workspace <= max(radii):
        raise ScenarioError("workspace too small for the agent radii")
    starts = _sample_disks(rng, radii, spec.workspace, spec.clearance, spec.max_tries)
    goals = _sample_disks(rng, radii, spec.workspace, spec.clearance, spec.max_tries)
    return list(zip(starts, goals))


def _obstacles(spec, pairs, radii):
    if spec.n_obstacles == 0:
        return []
    rows = spec.n_obstacles
    # spread over the columns' height, but never closer than one row spacing
    span = max([abs(p.y) for p, _ in pairs] + [(rows - 1) * spec.spacing / 2])
    out = []
    for k in range(rows):
        y = 0.0 if rows == 1 else -span + 2 * span * k / (rows - 1)
        out.append(Obstacle(-(k + 1), Vec2(0.0, y), spec.obstacle_radius))
    if rows > 1 and 2 * span / (rows - 1) < 2 * spec.obstacle_radius + START_EPS:
        raise ScenarioError("obstacles overlap each other; increase the spacing")
    for o in out:
        for (p, g), r in zip(pairs, radii):
            if min((p - o.center).norm(), (g - o.center).norm()) < r + o.radius + START_EPS:
                raise ScenarioError("obstacle overlaps a start or goal; widen the column gap")
    return out


def gen_scenario(spec: Scenario, config: WorldConfig | None = None) -> World:
    rng = np.random.default_rng(spec.seed)
    radii = _radii(spec, rng)
    if spec.family == "circle":
        pairs = _circle(spec, radii)
    elif spec.family in ("swap", "static_obstacle_swap"):
        pairs = _columns(spec)
    elif spec.family == "grid_formation":
        pairs = _grid(spec)
    else:
        pairs = _random(spec, radii, rng)
    obstacles = _obstacles(spec, pairs, radii) if spec.family == "static_obstacle_swap" else []

    agents = [_agent(k, p, g, r, spec.v_pref) for k, ((p, g), r) in enumerate(zip(pairs, radii))]
    for a in agents:
        for b in agents:
            if a.id < b.id and (a.p - b.p).norm() < a.r + b.r + START_EPS:
                raise ScenarioError(f"agents {a.id} and {b.id} start overlapping; increase the spacing")
    return World(agents, config or WorldConfig(), obstacles)
