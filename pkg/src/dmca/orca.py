"""Reciprocal half-plane collision avoidance (ORCA) baseline planner."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Action, AgentState, Vec2, wrap_angle
from .sim import Status, World

EPS = 1e-9
TIE_BREAK_ROTATION = 1e-3
DEFAULT_TAU = 2.0


@dataclass(frozen=True)
class HalfPlane:
    """Permitted velocities: {v : (v - point) . normal >= 0}.

    ``u`` is the smallest change of the relative velocity that leaves the
    truncated velocity obstacle (kept for inspection and tests).
    """
    point: Vec2
    normal: Vec2
    u: Vec2 = Vec2(0.0, 0.0)

    @property
    def direction(self) -> Vec2:
        # permitted side lies to the left of the direction
        return Vec2(self.normal.y, -self.normal.x)

    def margin(self, v: Vec2) -> float:
        return (v - self.point).dot(self.normal)


def _normalize(v: Vec2) -> Vec2:
    n = v.norm()
    return Vec2(v.x / n, v.y / n)


def orca_halfplane(ego: AgentState, nb: AgentState, tau: float = DEFAULT_TAU, dt: float = 0.1) -> HalfPlane:
    """Half-plane for ``ego`` against a reciprocating neighbour agent."""
    return disk_halfplane(ego, nb.p, nb.v, nb.r, tau, dt, 0.5)


def disk_halfplane(ego: AgentState, nb_p: Vec2, nb_v: Vec2, nb_r: float, tau: float, dt: float = 0.1,
                   responsibility: float = 0.5) -> HalfPlane:
    """Half-plane for ``ego`` against one neighbour disk.

    ``responsibility`` is 0.5 for a reciprocating agent and 1.0 for bodies that
    do not avoid back (static obstacles, frozen agents).
    """
    rel_p = nb_p - ego.p
    rel_v = ego.v - nb_v
    dist_sq = rel_p.dot(rel_p)
    R = ego.r + nb_r
    R_sq = R * R
    inv_tau = 1.0 / tau
    if dist_sq > R_sq:
        w = rel_v - rel_p * inv_tau
        w_len_sq = w.dot(w)
        dot1 = w.dot(rel_p)
        if dot1 < 0.0 and dot1 * dot1 > R_sq * w_len_sq:
            # closest boundary point is on the cut-off circle
            w_len = math.sqrt(w_len_sq)
            unit_w = w * (1.0 / w_len)
            u = unit_w * (R * inv_tau - w_len)
            normal = unit_w
        else:
            leg = math.sqrt(dist_sq - R_sq)
            if rel_p.cross(w) > 0.0:
                d = Vec2(rel_p.x * leg - rel_p.y * R, rel_p.x * R + rel_p.y * leg) * (1.0 / dist_sq)
            else:
                d = -Vec2(rel_p.x * leg + rel_p.y * R, -rel_p.x * R + rel_p.y * leg) * (1.0 / dist_sq)
            u = d * rel_v.dot(d) - rel_v
            normal = Vec2(-d.y, d.x)
    else:
        # already overlapping: push apart along the centre line within one step
        inv_dt = 1.0 / dt
        w = rel_v - rel_p * inv_dt
        w_len = w.norm()
        unit_w = w * (1.0 / w_len) if w_len > EPS else _normalize(-rel_p) if dist_sq > 0 else Vec2(1.0, 0.0)
        u = unit_w * (R * inv_dt - w_len)
        normal = unit_w
    return HalfPlane(point=ego.v + u * responsibility, normal=normal, u=u)


# incremental 2-D linear programming over {|v| <= radius} intersected with half-planes

def _lp1(lines, k, radius, opt, direction_opt):
    line = lines[k]
    d, p = line.direction, line.point
    dot = p.dot(d)
    disc = dot * dot + radius * radius - p.dot(p)
    if disc < 0.0:
        return None
    s = math.sqrt(disc)
    t_left, t_right = -dot - s, -dot + s
    for other in lines[:k]:
        denom = d.cross(other.direction)
        numer = other.direction.cross(p - other.point)
        if abs(denom) <= EPS:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if opt.dot(d) > 0.0 else t_left
    else:
        t = min(max(d.dot(opt - p), t_left), t_right)
    return p + d * t


def _lp2(lines, radius, opt, direction_opt):
    if direction_opt:
        result = opt * radius
    elif opt.dot(opt) > radius * radius:
        result = _normalize(opt) * radius
    else:
        result = opt
    for k, line in enumerate(lines):
        if line.direction.cross(line.point - result) > 0.0:
            new = _lp1(lines, k, radius, opt, direction_opt)
            if new is None:
                return k, result
            result = new
    return len(lines), result


def _lp3(lines, n_hard, begin, radius, result):
    """Minimise the largest violation when the constraints are infeasible."""
    distance = 0.0
    for i in range(begin, len(lines)):
        li = lines[i]
        if li.direction.cross(li.point - result) > distance:
            proj = list(lines[:n_hard])
            for j in range(n_hard, i):
                lj = lines[j]
                det = li.direction.cross(lj.direction)
                if abs(det) <= EPS:
                    if li.direction.dot(lj.direction) > 0.0:
                        continue
                    point = (li.point + lj.point) * 0.5
                else:
                    point = li.point + li.direction * (lj.direction.cross(li.point - lj.point) / det)
                diff = lj.direction - li.direction
                if diff.norm() <= EPS:
                    continue
                dvec = _normalize(diff)
                proj.append(HalfPlane(point=point, normal=Vec2(-dvec.y, dvec.x)))
            prev = result
            fail, result = _lp2(proj, radius, Vec2(-li.direction.y, li.direction.x), True)
            if fail < len(proj):
                result = prev
            distance = li.direction.cross(li.point - result)
    return result


def solve_velocity(planes: list[HalfPlane], v_pref: Vec2, v_max: float, n_hard: int = 0) -> Vec2:
    """Velocity closest to ``v_pref`` inside every half-plane and the v_max disk.

    The first ``n_hard`` planes are kept exactly if the problem is infeasible.
    """
    fail, result = _lp2(planes, v_max, v_pref, False)
    if fail < len(planes):
        result = _lp3(planes, n_hard, fail, v_max, result)
    return result


def preferred_velocity(ego: AgentState, v_max: float, tie_break: float = TIE_BREAK_ROTATION) -> Vec2:
    to_goal = ego.g - ego.p
    dist = to_goal.norm()
    if dist < EPS:
        return Vec2(0.0, 0.0)
    speed = min(ego.v_pref, v_max)
    return Vec2.polar(speed, to_goal.angle() + tie_break)


def orca_velocity(ego: AgentState, nbs: list, tau: float = DEFAULT_TAU, v_max: float | None = None,
                  dt: float = 0.1, tie_break: float = TIE_BREAK_ROTATION) -> Vec2:
    """New velocity for ``ego``.

    ``nbs`` holds AgentStates (reciprocating) and/or (p, v, r, responsibility)
    tuples for bodies that do not reciprocate.
    """
    v_max = ego.v_pref if v_max is None else v_max
    hard, soft = [], []
    for nb in nbs:
        if isinstance(nb, AgentState):
            soft.append(orca_halfplane(ego, nb, tau, dt))
        else:
            p, v, r, resp = nb
            (hard if resp >= 1.0 else soft).append(disk_halfplane(ego, p, v, r, tau, dt, resp))
    planes = hard + soft
    return solve_velocity(planes, preferred_velocity(ego, v_max, tie_break), v_max, n_hard=len(hard))


def velocity_to_action(ego: AgentState, v: Vec2, max_dpsi: float) -> Action:
    """Unicycle command tracking holonomic velocity ``v``.

    Heading goes toward ``v``; speed is the projection of ``v`` on the heading
    reachable this step (zero if that heading is more than 90 deg off).
    """
    speed = v.norm()
    if speed < EPS:
        return Action(0.0, ego.psi)
    target = v.angle()
    err = wrap_angle(target - ego.psi)
    residual = max(abs(err) - max_dpsi, 0.0)
    along = speed * math.cos(residual) if residual < math.pi / 2 else 0.0
    return Action(min(max(along, 0.0), ego.v_pref), target)


@dataclass
class ORCAPlanner:
    """Runs ORCA for every active agent from the same world snapshot.

    ``neighbor_dist`` defaults to the world's sensing radius. The horizon
    default of 2 s avoids the symmetric jams that longer horizons produce on
    circle scenarios.
    """
    tau: float = DEFAULT_TAU
    v_max: float | None = None
    tie_break: float = TIE_BREAK_ROTATION
    neighbor_dist: float | None = None
    name: str = "orca"

    def _sensed(self, world: World, i: int) -> list[int]:
        ego = world.agent(i)
        rad = world.config.r_neighbor if self.neighbor_dist is None else self.neighbor_dist
        out = [a.id for a in world.agents
               if a.id != i and world.status[a.id] is not Status.AT_GOAL
               and (a.p - ego.p).norm() < rad]
        out += [o.id for o in world.obstacles if (o.center - ego.p).norm() < rad]
        return sorted(out)

    def velocities(self, world: World) -> dict[int, Vec2]:
        out = {}
        for i in world.active_ids():
            ego = world.agent(i)
            nbs = []
            for j in self._sensed(world, i):
                if j < 0:
                    o = next(o for o in world.obstacles if o.id == j)
                    nbs.append((o.center, Vec2(0.0, 0.0), o.radius, 1.0))
                elif world.status[j] is Status.ACTIVE:
                    nbs.append(world.agent(j))
                else:
                    nb = world.agent(j)
                    nbs.append((nb.p, Vec2(0.0, 0.0), nb.r, 1.0))
            out[i] = orca_velocity(ego, nbs, self.tau, self.v_max, world.config.dt, self.tie_break)
        return out

    def plan(self, world: World, rng=None):
        """Actions for all active agents; ORCA never requests links."""
        vels = self.velocities(world)
        actions = {i: velocity_to_action(world.agent(i), v, world.config.max_dpsi) for i, v in vels.items()}
        return actions, {i: [] for i in actions}
