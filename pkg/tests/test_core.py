import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmca.core import (AgentState, HiddenState, Vec2, comm_state, ego_frame, ego_input, ego_self_obs,
                       to_ego_frame, wrap_angle)


def agent(id=0, p=(0.0, 0.0), v=(0.0, 0.0), psi=0.0, r=0.2, v_pref=1.0, g=(5.0, 0.0)):
    return AgentState(id=id, p=Vec2(*p), v=Vec2(*v), psi=psi, r=r, v_pref=v_pref, g=Vec2(*g))


def rot(theta, x, y):
    """2x2 rotation-matrix oracle."""
    c, s = math.cos(theta), math.sin(theta)
    return c * x - s * y, s * x + c * y


# ego_frame

def test_frame_goal_on_x_axis():
    f = ego_frame(agent(p=(0, 0), g=(5, 0)))
    assert f.origin == Vec2(0, 0) and f.angle == 0.0


def test_frame_goal_straight_up():
    assert ego_frame(agent(p=(1, 1), g=(1, 4))).angle == pytest.approx(math.pi / 2)


def test_frame_goal_up_left():
    assert ego_frame(agent(p=(2, 0), g=(0, 2))).angle == pytest.approx(math.atan2(2 - 0, 0 - 2))
    assert ego_frame(agent(p=(2, 0), g=(0, 2))).angle == pytest.approx(3 * math.pi / 4)


def test_frame_at_goal_uses_heading():
    assert ego_frame(agent(p=(1, 1), g=(1, 1), psi=0.7)).angle == 0.7


# ego_input

def test_ego_input_aligned():
    e = ego_input(agent(p=(0, 0), g=(3, 4), v_pref=1.0, psi=math.atan2(4, 3), r=0.2))
    np.testing.assert_allclose(e.as_array(), [5.0, 1.0, 0.0, 0.2], atol=1e-12)


def test_ego_input_at_goal():
    e = ego_input(agent(p=(2, 2), g=(2, 2), psi=1.0))
    assert e.d_goal == 0.0 and e.psi_rel == 0.0


def test_ego_input_heading_offset():
    # frame angle 0, heading pi/2 -> relative heading pi/2
    assert ego_input(agent(p=(0, 0), g=(1, 0), psi=math.pi / 2)).psi_rel == pytest.approx(math.pi / 2)


# to_ego_frame

def test_neighbor_obs_world_aligned():
    ego = agent(p=(0, 0), g=(10, 0), r=0.2)
    nb = agent(id=1, p=(1, 0), r=0.2)
    np.testing.assert_allclose(to_ego_frame(ego, nb).as_array(), [1, 0, 0, 0, 0.2, 1, 0.4], atol=1e-12)


def test_neighbor_obs_rotated_frame():
    ego = agent(p=(0, 0), g=(0, 10))
    nb = agent(id=1, p=(0, 1))
    o = to_ego_frame(ego, nb)
    x, y = rot(-math.pi / 2, 0.0, 1.0)
    assert (o.p_rel.x, o.p_rel.y) == pytest.approx((x, y), abs=1e-12)
    assert (o.p_rel.x, o.p_rel.y) == pytest.approx((1.0, 0.0), abs=1e-12)


def test_neighbor_velocity_frame_pi():
    ego = agent(p=(0, 0), g=(-5, 0))
    nb = agent(id=1, p=(1, 1), v=(1, 0))
    o = to_ego_frame(ego, nb)
    assert (o.v_rel.x, o.v_rel.y) == pytest.approx(rot(-math.pi, 1.0, 0.0), abs=1e-12)
    assert (o.v_rel.x, o.v_rel.y) == pytest.approx((-1.0, 0.0), abs=1e-12)


def test_neighbor_obs_rejects_self():
    with pytest.raises(ValueError):
        to_ego_frame(agent(), agent())


# ego_self_obs

def test_self_obs_stationary():
    np.testing.assert_allclose(ego_self_obs(agent(r=0.2)).as_array(), [0, 0, 0, 0, 0.2, 0, 0.4])


def test_self_obs_moving():
    o = ego_self_obs(agent(r=0.5, v=(1, 0), g=(5, 0)))
    np.testing.assert_allclose(o.as_array(), [0, 0, 1, 0, 0.5, 0, 1.0], atol=1e-12)


def test_self_obs_rotated():
    o = ego_self_obs(agent(v=(0, 1), g=(0, 5)))
    assert (o.v_rel.x, o.v_rel.y) == pytest.approx(rot(-math.pi / 2, 0.0, 1.0), abs=1e-12)
    assert (o.v_rel.x, o.v_rel.y) == pytest.approx((1.0, 0.0), abs=1e-12)


# comm_state

def test_comm_state_basic():
    c = comm_state(agent(p=(0, 0), v_pref=1, psi=0), HiddenState(g=Vec2(3, 4), v_pref=1, psi=0))
    np.testing.assert_allclose(c.as_array(), [5, 0, 0])


def test_comm_state_degenerate():
    a = agent(p=(1, 2))
    c = comm_state(a, HiddenState(g=a.p, v_pref=a.v_pref, psi=a.psi))
    np.testing.assert_array_equal(c.as_array(), [0, 0, 0])


def test_comm_state_wraps_heading():
    c = comm_state(agent(psi=3.0), HiddenState(g=Vec2(0, 0), v_pref=1.0, psi=-3.0))
    assert c.dpsi == pytest.approx(2 * math.pi - 6)
    assert c.dpsi == pytest.approx(0.2832, abs=1e-4)


# angle wrapping

def test_wrap_tie_maps_to_plus_pi():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


@given(st.floats(-100, 100))
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


# type invariants

def test_agent_state_validation():
    with pytest.raises(ValueError):
        agent(r=0.0)
    with pytest.raises(ValueError):
        agent(v_pref=0.0)
    with pytest.raises(ValueError):
        agent(v=(2.0, 0.0), v_pref=1.0)
    with pytest.raises(ValueError):
        agent(psi=4.0)
    with pytest.raises(ValueError):
        Vec2(float("nan"), 0.0)


# properties

coord = st.floats(-20, 20, allow_nan=False)
angle = st.floats(-math.pi + 1e-6, math.pi)


@st.composite
def agents(draw, id=0):
    vp = draw(st.floats(0.2, 2.0))
    speed = draw(st.floats(0.0, 1.0)) * vp
    th = draw(angle)
    return AgentState(id=id, p=Vec2(draw(coord), draw(coord)), v=Vec2.polar(speed, th),
                      psi=draw(angle), r=draw(st.floats(0.05, 1.0)), v_pref=vp,
                      g=Vec2(draw(coord), draw(coord)))


@settings(max_examples=300)
@given(agents(), coord, coord)
def test_frame_round_trip(ego, x, y):
    f = ego_frame(ego)
    back = f.to_world(f.to_local(Vec2(x, y)))
    assert abs(back.x - x) < 1e-9 and abs(back.y - y) < 1e-9


@settings(max_examples=300)
@given(agents(0), agents(1))
def test_da_equals_prel_norm(ego, nb):
    o = to_ego_frame(ego, nb)
    assert abs(o.d_a - o.p_rel.norm()) < 1e-9
    assert o.r_sum == ego.r + nb.r


@settings(max_examples=300)
@given(agents(0), agents(1))
def test_angle_outputs_wrapped(ego, nb):
    assert -math.pi < ego_input(ego).psi_rel <= math.pi
    assert -math.pi < comm_state(ego, nb.hidden()).dpsi <= math.pi


def rotate_agent(a: AgentState, th: float) -> AgentState:
    return AgentState(id=a.id, p=a.p.rotate(th), v=a.v.rotate(th), psi=wrap_angle(a.psi + th),
                      r=a.r, v_pref=a.v_pref, g=a.g.rotate(th))


def close_angles(a, b, tol=1e-9):
    return abs(wrap_angle(a - b)) < tol


@settings(max_examples=300)
@given(agents(0), agents(1), st.floats(-math.pi, math.pi))
def test_world_rotation_invariance(ego, nb, th):
    if (ego.g - ego.p).norm() < 1e-6:
        return
    ego2, nb2 = rotate_agent(ego, th), rotate_agent(nb, th)
    e1, e2 = ego_input(ego), ego_input(ego2)
    assert abs(e1.d_goal - e2.d_goal) < 1e-9 and close_angles(e1.psi_rel, e2.psi_rel)
    np.testing.assert_allclose(to_ego_frame(ego, nb).as_array(), to_ego_frame(ego2, nb2).as_array(),
                               atol=1e-9)
    c1, c2 = comm_state(ego, nb.hidden()), comm_state(ego2, nb2.hidden())
    assert abs(c1.d_goal_j - c2.d_goal_j) < 1e-9 and abs(c1.dv_pref - c2.dv_pref) < 1e-12
    assert close_angles(c1.dpsi, c2.dpsi)
