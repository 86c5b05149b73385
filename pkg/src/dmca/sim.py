"""World stepping, collision/goal detection, neighbour queries and the link bus."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Action, AgentState, HiddenState, NeighborObs, Vec2, ego_frame, obs_in_frame, wrap_angle

PROXIMITY_MARGIN = 0.2
GOAL_REWARD = 1.0
COLLISION_REWARD = -0.25


class Status(str, enum.Enum):
    ACTIVE = "active"
    AT_GOAL = "at_goal"
    COLLIDED = "collided"


class SimError(ValueError):
    pass


class LinkError(SimError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 0.1
    r_neighbor: float = 3.0
    goal_tol: float | None = None   # None: each agent's own radius
    max_dpsi: float = math.pi / 6
    t_max: int = 500
    lambda_comm: float = 0.0

    def __post_init__(self):
        if self.dt <= 0 or self.r_neighbor <= 0 or self.t_max < 1:
            raise ValueError(f"invalid WorldConfig {self}")
        if self.goal_tol is not None and self.goal_tol <= 0:
            raise ValueError("goal_tol must be > 0")
        if not 0 < self.max_dpsi <= math.pi:
            raise ValueError("max_dpsi must be in (0, pi]")
        if self.lambda_comm < 0:
            raise ValueError("lambda_comm must be >= 0")


@dataclass(frozen=True)
class Obstacle:
    """Static disk. Obstacles get negative ids so they never clash with agents."""
    id: int
    center: Vec2
    radius: float


@dataclass
class AgentEvent:
    reached_goal: bool = False
    collided: bool = False
    d_min: float = math.inf


@dataclass
class StepOutcome:
    rewards: dict[int, float]
    events: dict[int, AgentEvent]
    done: bool


@dataclass
class World:
    agents: list[AgentState]
    config: WorldConfig = field(default_factory=WorldConfig)
    obstacles: list[Obstacle] = field(default_factory=list)
    t: int = 0
    status: dict[int, Status] = field(default_factory=dict)

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise SimError(f"duplicate agent ids {ids}")
        if any(i < 0 for i in ids):
            raise SimError("agent ids must be >= 0 (negative ids are reserved for obstacles)")
        self._index = {a.id: k for k, a in enumerate(self.agents)}
        for i in ids:
            self.status.setdefault(i, Status.ACTIVE)

    def agent(self, i: int) -> AgentState:
        k = self._index.get(i)
        if k is None:
            raise SimError(f"unknown agent id {i}")
        return self.agents[k]

    def goal_tol(self, a: AgentState) -> float:
        return a.r if self.config.goal_tol is None else self.config.goal_tol

    def active_ids(self) -> list[int]:
        return [a.id for a in self.agents if self.status[a.id] is Status.ACTIVE]

    def is_done(self) -> bool:
        return self.t >= self.config.t_max or not self.active_ids()

    def bodies(self):
        """(id, p, v, r) of everything physically present: agents not at goal, then obstacles."""
        out = [(a.id, a.p, a.v, a.r) for a in self.agents if self.status[a.id] is not Status.AT_GOAL]
        out += [(o.id, o.center, Vec2(0.0, 0.0), o.radius) for o in self.obstacles]
        return out

    def copy(self) -> "World":
        return World(list(self.agents), self.config, list(self.obstacles), self.t, dict(self.status))


def neighbors(world: World, i: int) -> set[int]:
    """Ids within r_neighbor (strict) of agent ``i``: agents not at goal, plus obstacles."""
    ego = world.agent(i)
    out = set()
    for j, p, _, _ in world.bodies():
        if j != i and (p - ego.p).norm() < world.config.r_neighbor:
            out.add(j)
    return out


def observe(world: World, i: int) -> list[NeighborObs]:
    """Ego-frame observations of every neighbour of ``i`` (order: agents by id, then obstacles)."""
    ego = world.agent(i)
    frame = ego_frame(ego)
    out = []
    for j, p, v, r in world.bodies():
        if j != i and (p - ego.p).norm() < world.config.r_neighbor:
            out.append(obs_in_frame(frame, ego.r, p, v, r, id=j))
    return out


def exchange(world: World, links: dict[int, list[int]]) -> dict[int, list[tuple[NeighborObs, HiddenState]]]:
    """Deliver the hidden state of every requested neighbour, as of the start of the step."""
    replies = {}
    for i, requested in links.items():
        if not requested:
            replies[i] = []
            continue
        ego = world.agent(i)
        nbs = neighbors(world, i)
        frame = ego_frame(ego)
        out = []
        for j in requested:
            if j < 0:
                raise LinkError(f"agent {i} requested a link to obstacle {j}")
            if j not in nbs:
                raise LinkError(f"agent {i} requested a link to non-neighbour {j}")
            nb = world.agent(j)
            out.append((obs_in_frame(frame, ego.r, nb.p, nb.v, nb.r, id=j), nb.hidden()))
        replies[i] = out
    return replies


def reward(event: AgentEvent, n_links: int = 0, lambda_comm: float = 0.0) -> float:
    """Per-step reward; the link cost is added on top of whichever case applies."""
    if event.reached_goal:
        r = GOAL_REWARD
    elif event.collided:
        r = COLLISION_REWARD
    elif event.d_min < PROXIMITY_MARGIN:
        r = -0.1 + event.d_min / 2.0
    else:
        r = 0.0
    return r - lambda_comm * n_links


def _pairwise(bodies):
    ids = np.array([b[0] for b in bodies], dtype=np.int64)
    pos = np.array([b[1].astuple() for b in bodies], dtype=np.float64).reshape(-1, 2)
    rad = np.array([b[3] for b in bodies], dtype=np.float64)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return ids, dist, rad[:, None] + rad[None, :]


def detect_collisions(world: World) -> set[tuple[int, int]]:
    """Unordered (lo, hi) id pairs whose disks overlap. Obstacle-obstacle pairs are ignored."""
    bodies = world.bodies()
    if len(bodies) < 2:
        return set()
    ids, dist, rsum = _pairwise(bodies)
    hit = np.triu(dist < rsum, k=1)
    out = set()
    for a, b in zip(*np.nonzero(hit)):
        i, j = int(ids[a]), int(ids[b])
        if i < 0 and j < 0:
            continue
        out.add((min(i, j), max(i, j)))
    return out


def step(world: World, actions: dict[int, Action], links: dict[int, list[int]] | None = None) -> StepOutcome:
    """Advance ``world`` by one dt (in place)."""
    cfg = world.config
    active = world.active_ids()
    for i in actions:
        if i not in world._index:
            raise SimError(f"action for unknown agent {i}")
        if world.status[i] is not Status.ACTIVE:
            raise SimError(f"action for inactive agent {i} ({world.status[i].value})")
    missing = set(active) - set(actions)
    if missing:
        raise SimError(f"no action for active agents {sorted(missing)}")
    if world.t >= cfg.t_max:
        raise SimError("episode already at t_max")

    for i in active:
        a = world.agent(i)
        act = actions[i]
        turn = max(-cfg.max_dpsi, min(cfg.max_dpsi, wrap_angle(act.psi_cmd - a.psi)))
        psi = wrap_angle(a.psi + turn)
        speed = min(max(act.speed, 0.0), a.v_pref)
        v = Vec2(speed * math.cos(psi), speed * math.sin(psi))
        world.agents[world._index[i]] = replace(a, p=a.p + v * cfg.dt, v=v, psi=psi)

    events = {i: AgentEvent() for i in active}
    bodies = world.bodies()
    if len(bodies) >= 2:
        ids, dist, rsum = _pairwise(bodies)
        clearance = dist - rsum
        np.fill_diagonal(clearance, np.inf)
        row = {int(j): k for k, j in enumerate(ids)}
        for i in active:
            c = clearance[row[i]]
            events[i].d_min = float(c.min())
            events[i].collided = bool((dist[row[i]] < rsum[row[i]])[np.arange(len(ids)) != row[i]].any())

    for i in active:
        k = world._index[i]
        a = world.agents[k]
        if events[i].collided:
            world.status[i] = Status.COLLIDED
            world.agents[k] = replace(a, v=Vec2(0.0, 0.0))
        elif (a.p - a.g).norm() <= world.goal_tol(a):
            events[i].reached_goal = True
            world.status[i] = Status.AT_GOAL
            world.agents[k] = replace(a, v=Vec2(0.0, 0.0))

    world.t += 1
    links = links or {}
    rewards = {i: reward(events[i], len(links.get(i, ())), cfg.lambda_comm) for i in active}
    return StepOutcome(rewards=rewards, events=events, done=world.is_done())
