import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmca.core import Action, AgentState, Vec2
from dmca.sim import (AgentEvent, LinkError, Obstacle, SimError, Status, World, WorldConfig,
                      detect_collisions, exchange, neighbors, reward, step)


def agent(id, p, g=(50.0, 0.0), r=0.2, psi=0.0, v_pref=1.0, v=(0.0, 0.0)):
    return AgentState(id=id, p=Vec2(*p), v=Vec2(*v), psi=psi, r=r, v_pref=v_pref, g=Vec2(*g))


def brute_force_collisions(world):
    """Plain double loop over everything physically present."""
    bodies = [(a.id, a.p.x, a.p.y, a.r) for a in world.agents if world.status[a.id] is not Status.AT_GOAL]
    bodies += [(o.id, o.center.x, o.center.y, o.radius) for o in world.obstacles]
    out = set()
    for (i, xi, yi, ri), (j, xj, yj, rj) in itertools.combinations(bodies, 2):
        if i < 0 and j < 0:
            continue
        if math.sqrt((xi - xj) ** 2 + (yi - yj) ** 2) < ri + rj:
            out.add((min(i, j), max(i, j)))
    return out


def random_world(rng, n=10, n_obs=0, size=4.0):
    agents = [agent(k, tuple(rng.uniform(-size, size, 2)), r=float(rng.uniform(0.1, 0.6))) for k in range(n)]
    obs = [Obstacle(-(k + 1), Vec2(*rng.uniform(-size, size, 2)), float(rng.uniform(0.1, 0.8)))
           for k in range(n_obs)]
    return World(agents, obstacles=obs)


# neighbors

def test_neighbors_pair():
    w = World([agent(0, (0, 0)), agent(1, (1, 0))], WorldConfig(r_neighbor=3.0))
    assert neighbors(w, 0) == {1} and neighbors(w, 1) == {0}


def test_neighbors_strict_boundary():
    w = World([agent(0, (0, 0)), agent(1, (3.0, 0))], WorldConfig(r_neighbor=3.0))
    assert neighbors(w, 0) == set()


def test_neighbors_line_matches_brute_force():
    w = World([agent(k, (float(k), 0.0)) for k in range(5)], WorldConfig(r_neighbor=1.5))
    oracle = {j for j in range(5) if j != 2 and abs(j - 2) < 1.5}
    assert neighbors(w, 2) == oracle == {1, 3}


def test_neighbors_include_obstacles_exclude_at_goal():
    w = World([agent(0, (0, 0)), agent(1, (1, 0)), agent(2, (0, 1))],
              obstacles=[Obstacle(-1, Vec2(0, -1), 0.3)])
    w.status[2] = Status.AT_GOAL
    assert neighbors(w, 0) == {1, -1}


def test_neighbors_unknown_id():
    with pytest.raises(SimError):
        neighbors(World([agent(0, (0, 0))]), 7)


# exchange

def test_exchange_empty():
    w = World([agent(0, (0, 0)), agent(1, (1, 0))])
    assert exchange(w, {0: [], 1: []}) == {0: [], 1: []}


def test_exchange_delivers_hidden_state():
    w = World([agent(0, (0, 0)), agent(1, (1, 0), g=(-4, 2), psi=0.5, v_pref=0.8)])
    (obs, hid), = exchange(w, {0: [1]})[0]
    assert (hid.g, hid.v_pref, hid.psi) == (Vec2(-4, 2), 0.8, 0.5)
    assert obs.id == 1 and obs.d_a == pytest.approx(1.0)


def test_exchange_multiple_links_same_cycle():
    w = World([agent(0, (0, 0)), agent(1, (1, 0)), agent(2, (0, 1))])
    replies = exchange(w, {0: [1, 2]})
    assert len(replies[0]) == 2


def test_exchange_rejects_non_neighbor_and_obstacle():
    w = World([agent(0, (0, 0)), agent(1, (10, 0))], obstacles=[Obstacle(-1, Vec2(1, 0), 0.2)])
    with pytest.raises(LinkError):
        exchange(w, {0: [1]})
    with pytest.raises(LinkError):
        exchange(w, {0: [-1]})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_exchange_only_granted_links_deliver(seed):
    rng = np.random.default_rng(seed)
    w = random_world(rng, n=6, size=2.0)
    links = {}
    for a in w.agents:
        nbs = sorted(j for j in neighbors(w, a.id) if j >= 0)
        links[a.id] = [j for j in nbs if rng.random() < 0.5]
    replies = exchange(w, links)
    for i, req in links.items():
        assert [o.id for o, _ in replies[i]] == req


# step

def test_step_straight_motion():
    w = World([agent(0, (0, 0))], WorldConfig(dt=0.1))
    step(w, {0: Action(1.0, 0.0)})
    assert w.agents[0].p.x == pytest.approx(0.1) and w.agents[0].p.y == pytest.approx(0.0)
    assert w.t == 1


def test_step_turn_is_clamped():
    w = World([agent(0, (0, 0))], WorldConfig(max_dpsi=math.pi / 6))
    step(w, {0: Action(0.0, math.pi / 2)})
    assert w.agents[0].psi == pytest.approx(math.pi / 6)


def test_step_collision_marks_both():
    w = World([agent(0, (0, 0)), agent(1, (0.45, 0), psi=math.pi)], WorldConfig(dt=0.1))
    out = step(w, {0: Action(1.0, 0.0), 1: Action(1.0, math.pi)})
    assert out.events[0].collided and out.events[1].collided
    assert w.status[0] is Status.COLLIDED and w.status[1] is Status.COLLIDED
    assert out.rewards[0] == -0.25


def test_step_goal_reached():
    w = World([agent(0, (0, 0), g=(0.25, 0), r=0.2)], WorldConfig(dt=0.1))
    out = step(w, {0: Action(1.0, 0.0)})
    assert out.events[0].reached_goal and out.rewards[0] == 1.0 and out.done
    assert w.status[0] is Status.AT_GOAL


def test_step_obstacle_collision():
    w = World([agent(0, (0, 0))], obstacles=[Obstacle(-1, Vec2(0.6, 0), 0.35)])
    out = step(w, {0: Action(1.0, 0.0)})
    assert out.events[0].collided


def test_step_errors():
    w = World([agent(0, (0, 0)), agent(1, (5, 0))])
    with pytest.raises(SimError):
        step(w, {0: Action(1.0, 0.0)})
    with pytest.raises(SimError):
        step(w, {0: Action(1.0, 0.0), 1: Action(1.0, 0.0), 9: Action(0.0, 0.0)})
    w.status[1] = Status.COLLIDED
    with pytest.raises(SimError):
        step(w, {0: Action(1.0, 0.0), 1: Action(1.0, 0.0)})


def test_step_speed_clamped_to_vpref():
    w = World([agent(0, (0, 0), v_pref=0.5)], WorldConfig(dt=0.1))
    step(w, {0: Action(3.0, 0.0)})
    assert w.agents[0].p.x == pytest.approx(0.05)


def test_done_at_t_max():
    w = World([agent(0, (0, 0))], WorldConfig(t_max=2))
    assert not step(w, {0: Action(0.0, 0.0)}).done
    assert step(w, {0: Action(0.0, 0.0)}).done


def test_link_cost_in_step_reward():
    w = World([agent(0, (0, 0)), agent(1, (2, 0), g=(-50, 0), psi=math.pi)], WorldConfig(lambda_comm=0.01))
    out = step(w, {0: Action(0.0, 0.0), 1: Action(0.0, math.pi)}, links={0: [1]})
    assert out.rewards[0] == pytest.approx(-0.01) and out.rewards[1] == 0.0


# reward

def test_reward_goal():
    assert reward(AgentEvent(reached_goal=True), 0) == 1.0


def test_reward_collision():
    assert reward(AgentEvent(collided=True), 0) == -0.25


def test_reward_proximity():
    assert reward(AgentEvent(d_min=0.1), 0) == pytest.approx(-0.05)


def test_reward_link_cost():
    assert reward(AgentEvent(d_min=5.0), 3, 0.0001) == pytest.approx(-0.0003)


def test_reward_continuous_at_margin():
    assert reward(AgentEvent(d_min=0.2 - 1e-12), 0) == pytest.approx(0.0, abs=1e-11)
    assert reward(AgentEvent(d_min=0.2), 0) == 0.0


@given(st.booleans(), st.booleans(), st.floats(0, 5), st.integers(0, 10), st.floats(0, 0.01))
def test_reward_bounds(goal, coll, d_min, n_l, lam):
    r = reward(AgentEvent(goal, coll, d_min), n_l, lam)
    assert -0.25 - lam * n_l - 1e-15 <= r <= 1.0


# collisions

def test_collision_threshold():
    w = World([agent(0, (0, 0), r=0.5), agent(1, (1.01, 0), r=0.5)])
    assert detect_collisions(w) == set()
    w = World([agent(0, (0, 0), r=0.5), agent(1, (0.99, 0), r=0.5)])
    assert detect_collisions(w) == {(0, 1)}


@pytest.mark.parametrize("seed", range(50))
def test_collisions_match_brute_force(seed):
    w = random_world(np.random.default_rng(seed), n=10, n_obs=3)
    assert detect_collisions(w) == brute_force_collisions(w)


# invariants over random rollouts

def random_actions(world, rng):
    return {i: Action(float(rng.uniform(0, 1.5)), float(rng.uniform(-math.pi, math.pi)))
            for i in world.active_ids()}


def roll(seed, steps=40):
    rng = np.random.default_rng(seed)
    w = random_world(rng, n=6, size=3.0)
    trace = []
    for _ in range(steps):
        if w.is_done():
            break
        before = {a.id: (a.p, w.status[a.id]) for a in w.agents}
        out = step(w, random_actions(w, rng))
        trace.append((before, {a.id: (a.p, w.status[a.id]) for a in w.agents}, out))
    return w, trace


@pytest.mark.parametrize("seed", range(10))
def test_absorbing_states_and_speed_bound(seed):
    w, trace = roll(seed)
    for before, after, _ in trace:
        for i, (p0, s0) in before.items():
            p1, s1 = after[i]
            if s0 is not Status.ACTIVE:
                assert p1 == p0 and s1 is s0
            assert (p1 - p0).norm() <= w.agent(i).v_pref * w.config.dt + 1e-9


def test_step_deterministic():
    _, a = roll(3)
    _, b = roll(3)
    assert [(x[1], x[2].rewards) for x in a] == [(x[1], x[2].rewards) for x in b]
