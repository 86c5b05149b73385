"""Agent state types and the ego-frame observation vectors fed to the policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

AT_GOAL_EPS = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; exactly -pi maps to +pi."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w <= -math.pi else w


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite Vec2({self.x}, {self.y})")

    def __add__(self, o):
        return Vec2(self.x + o.x, self.y + o.y)

    def __sub__(self, o):
        return Vec2(self.x - o.x, self.y - o.y)

    def __mul__(self, k: float):
        return Vec2(self.x * k, self.y * k)

    __rmul__ = __mul__

    def __neg__(self):
        return Vec2(-self.x, -self.y)

    def dot(self, o) -> float:
        return self.x * o.x + self.y * o.y

    def cross(self, o) -> float:
        return self.x * o.y - self.y * o.x

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def angle(self) -> float:
        return math.atan2(self.y, self.x)

    def rotate(self, theta: float) -> "Vec2":
        c, s = math.cos(theta), math.sin(theta)
        return Vec2(c * self.x - s * self.y, s * self.x + c * self.y)

    def astuple(self):
        return (self.x, self.y)

    @classmethod
    def polar(cls, r: float, theta: float) -> "Vec2":
        return cls(r * math.cos(theta), r * math.sin(theta))


@dataclass(frozen=True)
class AgentState:
    """Full state of one disk robot.

    Observable part: p, v, r. Hidden part (shared only over a granted link):
    g, v_pref, psi.
    """
    id: int
    p: Vec2
    v: Vec2
    psi: float
    r: float
    v_pref: float
    g: Vec2

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError(f"agent {self.id}: radius must be > 0, got {self.r}")
        if self.v_pref <= 0:
            raise ValueError(f"agent {self.id}: v_pref must be > 0, got {self.v_pref}")
        if abs(self.psi) > math.pi:
            raise ValueError(f"agent {self.id}: heading {self.psi} outside [-pi, pi]")
        if self.v.norm() > self.v_pref + 1e-9:
            raise ValueError(f"agent {self.id}: speed {self.v.norm()} exceeds v_pref {self.v_pref}")

    def hidden(self) -> "HiddenState":
        return HiddenState(g=self.g, v_pref=self.v_pref, psi=self.psi)


@dataclass(frozen=True)
class HiddenState:
    g: Vec2
    v_pref: float
    psi: float


@dataclass(frozen=True)
class Frame:
    origin: Vec2
    angle: float

    def to_local(self, w: Vec2) -> Vec2:
        return (w - self.origin).rotate(-self.angle)

    def to_world(self, local: Vec2) -> Vec2:
        return local.rotate(self.angle) + self.origin

    def rotate_in(self, w: Vec2) -> Vec2:
        """Express a free vector (e.g. a velocity) in this frame."""
        return w.rotate(-self.angle)


@dataclass(frozen=True)
class EgoInput:
    d_goal: float
    v_pref: float
    psi_rel: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_goal, self.v_pref, self.psi_rel, self.r])


@dataclass(frozen=True)
class NeighborObs:
    """Observable state of one neighbour in the ego frame (7 numbers)."""
    p_rel: Vec2
    v_rel: Vec2
    r_j: float
    d_a: float
    r_sum: float
    id: int | None = field(default=None, compare=False)

    def as_array(self) -> np.ndarray:
        return np.array([self.p_rel.x, self.p_rel.y, self.v_rel.x, self.v_rel.y,
                         self.r_j, self.d_a, self.r_sum])


@dataclass(frozen=True)
class CommState:
    d_goal_j: float
    dv_pref: float
    dpsi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_goal_j, self.dv_pref, self.dpsi])


@dataclass(frozen=True)
class Action:
    speed: float
    psi_cmd: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed}")


def ego_frame(ego: AgentState) -> Frame:
    """Origin at the agent, x-axis toward its goal (heading when at the goal)."""
    d = ego.g - ego.p
    angle = ego.psi if d.norm() < AT_GOAL_EPS else d.angle()
    return Frame(ego.p, angle)


def ego_input(ego: AgentState) -> EgoInput:
    frame = ego_frame(ego)
    d_goal = (ego.g - ego.p).norm()
    psi_rel = 0.0 if d_goal < AT_GOAL_EPS else wrap_angle(ego.psi - frame.angle)
    return EgoInput(d_goal=d_goal, v_pref=ego.v_pref, psi_rel=psi_rel, r=ego.r)


def obs_in_frame(frame: Frame, ego_r: float, p: Vec2, v: Vec2, r: float, id=None) -> NeighborObs:
    p_rel = frame.to_local(p)
    return NeighborObs(p_rel=p_rel, v_rel=frame.rotate_in(v), r_j=r,
                       d_a=(p - frame.origin).norm(), r_sum=ego_r + r, id=id)


def to_ego_frame(ego: AgentState, nb: AgentState) -> NeighborObs:
    if nb.id == ego.id:
        raise ValueError(f"agent {ego.id} cannot observe itself as a neighbour")
    return obs_in_frame(ego_frame(ego), ego.r, nb.p, nb.v, nb.r, id=nb.id)


def ego_self_obs(ego: AgentState) -> NeighborObs:
    frame = ego_frame(ego)
    return NeighborObs(p_rel=Vec2(0.0, 0.0), v_rel=frame.rotate_in(ego.v), r_j=ego.r,
                       d_a=0.0, r_sum=2.0 * ego.r, id=ego.id)


def comm_state(ego: AgentState, nb_hidden: HiddenState) -> CommState:
    return CommState(d_goal_j=(nb_hidden.g - ego.p).norm(),
                     dv_pref=nb_hidden.v_pref - ego.v_pref,
                     dpsi=wrap_angle(nb_hidden.psi - ego.psi))
