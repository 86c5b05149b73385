import math
from dataclasses import replace

import numpy as np
import pytest

from dmca import tensorgrad as tg
from dmca.bench import Scenario, gen_scenario
from dmca.policy import Policy, PolicyConfig
from dmca.sim import WorldConfig
from dmca.core import Vec2
from dmca.policy import ActionSet
from dmca.trainer import (PRESETS, Buffer, Phase, TrainConfig, Transition, TrainingError, Worker,
                          demonstrations, discounted_returns, imitate, imitation_loss, loss, nearest_action,
                          read_metrics, returns_and_advantages, rollout, train)

SWAP2 = Phase(scenarios=(("swap", 2, 2),), updates=5)


def small_cfg(**kw):
    base = dict(policy=PolicyConfig.small(), n_workers=2, rollout_len=4, phases=(SWAP2,), eval_every=0,
                checkpoint_every=0, t_max=50, imitation_steps=0)
    base.update(kw)
    return TrainConfig(**base)


def workers_for(cfg):
    return [Worker(cfg, s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_workers)]


def run_rollout(cfg, policy=None, seed=0):
    policy = policy or Policy.create(cfg.policy, seed=seed)
    ws = workers_for(cfg)
    return rollout(ws, policy, cfg.rollout_len, cfg.phases[0], cfg), ws, policy


# config

def test_presets():
    assert TrainConfig.from_preset("dmca").lambda_comm == 0.0
    assert TrainConfig.from_preset("dmca-lc").lambda_comm == 0.0001
    assert PRESETS == {"dmca": 0.0, "dmca-lc": 0.0001}
    with pytest.raises(ValueError):
        TrainConfig.from_preset("broadcast")


def test_defaults():
    c = TrainConfig()
    assert (c.gamma, c.rollout_len, c.n_workers, c.lr, c.entropy_coef, c.value_coef) == \
        (0.97, 32, 8, 1e-4, 1e-3, 0.5)
    assert c.phases[0].scenarios == (("swap", 2, 2), ("circle", 2, 4))
    assert all(hi <= 4 for _, _, hi in c.phases[0].scenarios)
    assert max(hi for _, _, hi in c.phases[1].scenarios) >= 10


def test_yaml_roundtrip(tmp_path):
    c = small_cfg(preset="dmca-lc", lambda_comm=0.0001, seed=7, stop_at_success=0.9)
    p = tmp_path / "c.yaml"
    p.write_text(c.to_yaml())
    assert TrainConfig.read(p) == c


def test_yaml_preset_sets_lambda():
    assert TrainConfig.from_yaml("preset: dmca-lc\n").lambda_comm == 0.0001


@pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(gamma=1.5), dict(rollout_len=0), dict(lr=0.0),
                                 dict(phases=()), dict(entropy_coef=-1.0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        small_cfg(**bad)


def test_unknown_yaml_key():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_yaml("gama: 0.9\n")


def test_phase_schedule():
    c = small_cfg(phases=(Phase((("swap", 2, 2),), 3), Phase((("circle", 3, 4),), 2)))
    assert [c.phase_index(u) for u in range(7)] == [0, 0, 0, 1, 1, 1, 1]
    with pytest.raises(ValueError):
        Phase((("circle", 4, 2),), 1)


# rollout

def test_rollout_len_one_two_agents():
    (buf, boot, _), _, _ = run_rollout(small_cfg(n_workers=1, rollout_len=1))
    assert len(buf) == 2
    assert {t.key[2] for t in buf.transitions} == {0, 1}


def test_episode_end_mid_rollout_resets():
    cfg = small_cfg(n_workers=1, rollout_len=5, t_max=3)
    (buf, boot, finished), ws, _ = run_rollout(cfg)
    eps = [t.key[1] for t in buf.transitions]
    assert eps == [0] * 6 + [1] * 4
    for t in buf.transitions:
        if t.key[1] == 0:
            assert t.done == (buf.transitions.index(t) >= 4)
    assert len(finished) == 1
    assert ws[0].episode == 1 and ws[0].world.t == 2
    assert set(boot) == {(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)}
    assert boot[(0, 0, 0)] == 0.0 and boot[(0, 1, 0)] != 0.0


def test_rollout_deterministic():
    cfg = small_cfg()
    (a, ba, _), _, _ = run_rollout(cfg)
    (b, bb, _), _, _ = run_rollout(cfg)
    assert a.transitions == b.transitions
    assert ba == bb
    for x, y in zip(a.batches, b.batches):
        assert np.array_equal(x.links, y.links) and np.array_equal(x.noise, y.noise)


def test_rollout_rewards_include_link_cost():
    cfg = small_cfg(lambda_comm=0.01, nav_reward=False, rollout_len=15)
    (buf, _, _), _, _ = run_rollout(cfg)
    for t in buf.transitions:
        assert t.reward == pytest.approx(-0.01 * t.n_links)
    assert any(t.n_links > 0 for t in buf.transitions)


def test_reward_accounting_matches_worker_returns():
    cfg = small_cfg(n_workers=1, rollout_len=6, lambda_comm=0.001)
    (buf, _, _), ws, _ = run_rollout(cfg)
    for i, ret in ws[0].returns.items():
        assert ret == pytest.approx(sum(t.reward for t in buf.transitions if t.key == (0, 0, i)))


def test_one_snapshot_per_rollout():
    cfg = small_cfg()
    (buf, _, _), _, pol = run_rollout(cfg)
    batch, rows = buf.stacked()
    values = pol.forward_tensors(batch).value.data[rows]
    assert np.allclose(values, [t.value for t in buf.transitions], atol=1e-12)


# returns

def test_returns_gamma_one_terminal():
    assert discounted_returns([0, 0, 1], [False, False, True], 1.0).tolist() == [1, 1, 1]


def test_returns_gamma_point_nine():
    assert np.allclose(discounted_returns([0, 0, 1], [False, False, True], 0.9), [0.81, 0.9, 1.0])


def test_returns_bootstrap_and_done_boundary():
    R = discounted_returns([1, 1, 1, 1], [False, True, False, False], 0.5, bootstrap=4.0)
    assert np.allclose(R, [1.5, 1.0, 1 + 0.5 * (1 + 0.5 * 4), 1 + 0.5 * 4])


def _buf(rewards, values, dones, key=(0, 0, 0)):
    return Buffer([Transition(key, 0, k, 0, r, v, d, 0) for k, (r, v, d) in enumerate(zip(rewards, values, dones))])


def test_zero_rewards_zero_values_zero_advantages():
    R, A = returns_and_advantages(_buf([0, 0, 0], [0, 0, 0], [False, False, False]), 0.97, {(0, 0, 0): 0.0})
    assert np.all(A == 0) and np.all(R == 0)


def test_advantages_grouped_per_trajectory():
    b = Buffer(_buf([0, 1], [0.5, 0.5], [False, True]).transitions
               + _buf([2], [1.0], [False], key=(0, 0, 1)).transitions)
    R, A = returns_and_advantages(b, 0.5, {(0, 0, 1): 2.0})
    assert np.allclose(R, [0.5, 1.0, 3.0])
    assert np.allclose(A, [0.0, 0.5, 2.0])


# loss

def test_loss_uniform_policy_zero_advantage():
    cfg = small_cfg(entropy_coef=0.01)
    pol = Policy.create(cfg.policy, seed=0)
    pol.params["pi.W"].data[:] = 0.0
    pol.params["pi.b"].data[:] = 0.0
    (buf, _, _), _, _ = run_rollout(cfg, pol)
    V = np.array([t.value for t in buf.transitions])
    total, parts = loss(buf, pol, V, np.zeros(len(buf)), cfg)
    A = pol.config.n_actions
    assert total.item() == pytest.approx(-0.01 * math.log(A), abs=1e-12)
    assert parts.value == pytest.approx(0.0, abs=1e-20)


def test_value_coef_linear():
    cfg = small_cfg()
    (buf, boot, _), _, pol = run_rollout(cfg)
    R, A = returns_and_advantages(buf, cfg.gamma, boot)
    R = R + 0.3
    _, p1 = loss(buf, pol, R, A, cfg)
    _, p2 = loss(buf, pol, R, A, replace(cfg, value_coef=2 * cfg.value_coef))
    assert p2.value == pytest.approx(2 * p1.value, rel=1e-12)
    assert p1.value > 0
    assert p2.policy == p1.policy and p2.entropy == p1.entropy


def _loss_fn(buf, pol, R, A, cfg, st):
    return lambda: loss(buf, pol, R, A, cfg, straight_through=st)[0]


def test_link_selector_gradient_matches_finite_differences():
    cfg = small_cfg(lambda_comm=0.05, n_workers=2, rollout_len=3)
    pol = Policy.create(cfg.policy, seed=3)
    rng = np.random.default_rng(0)
    for _, p in pol.params.items():
        p.data += rng.normal(0, 0.3, p.shape) * (p.data == 0)
    ws = workers_for(cfg)
    for w in ws:
        w.reset(cfg.phases[0])
        # close together so the agents sense each other
        w.world = gen_scenario(Scenario("swap", 2, gap=1.2), WorldConfig(lambda_comm=0.05))
    buf, boot, _ = rollout(ws, pol, cfg.rollout_len, cfg.phases[0], cfg)
    assert len({t.n_links for t in buf.transitions}) > 1
    R, A = returns_and_advantages(buf, cfg.gamma, boot)
    comm = tg.ParamStore({n: p for n, p in pol.params.items() if n.startswith("comm.")})
    err = tg.grad_check(_loss_fn(buf, pol, R, A, cfg, False), comm)
    assert err < 1e-4
    grads = tg.analytic_grads(_loss_fn(buf, pol, R, A, cfg, True), pol.params)
    assert any(np.abs(grads[n]).max() > 0 for n in comm.names())


# train

def test_train_writes_monotone_metrics_and_checkpoints(tmp_path):
    cfg = small_cfg(out_dir=str(tmp_path), checkpoint_every=2, eval_every=2, eval_t_max=20, preset="dmca-lc",
                    lambda_comm=0.0001)
    res = train(cfg)
    rows = read_metrics(tmp_path / "metrics.jsonl")
    assert [r["update"] for r in rows] == [1, 2, 3, 4, 5]
    assert all(b["env_steps"] > a["env_steps"] for a, b in zip(rows, rows[1:]))
    assert {"mean_return", "success_rate", "collision_rate", "links_per_agent_step"} <= set(rows[0])
    assert "eval_success" in rows[1]
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["dmca-lc_2.ckpt", "dmca-lc_4.ckpt", "dmca-lc_5.ckpt"]
    loaded = Policy.load(tmp_path / "dmca-lc_5.ckpt", expect_config=cfg.policy)
    for n, p in res.policy.params.items():
        assert np.array_equal(loaded.params[n].data, p.data)
    assert TrainConfig.read(tmp_path / "config.yaml") == cfg


def test_train_deterministic(tmp_path):
    a = train(small_cfg(out_dir=str(tmp_path / "a")))
    b = train(small_cfg(out_dir=str(tmp_path / "b")))
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "dmca_5.ckpt").read_bytes() == (tmp_path / "b" / "dmca_5.ckpt").read_bytes()
    assert a.metrics == b.metrics


def test_train_changes_parameters():
    cfg = small_cfg()
    before = Policy.create(cfg.policy, seed=cfg.seed)
    res = train(cfg, updates=2)
    assert any(not np.array_equal(before.params[n].data, p.data) for n, p in res.policy.params.items())


def test_nonfinite_loss_aborts_with_dump(tmp_path):
    cfg = small_cfg(out_dir=str(tmp_path))
    pol = Policy.create(cfg.policy, seed=0)
    pol.params["value.b"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg, policy=pol)
    dumps = list(tmp_path.glob("diagnostic_*.json"))
    assert dumps and "value.b" in dumps[0].read_text()


def test_env_step_budget_never_exceeded():
    res = train(small_cfg(max_env_steps=20))
    assert [r["env_steps"] for r in res.metrics] == [8, 16]
    assert res.env_steps == 16


# imitation warm start

def test_nearest_action_picks_matching_command():
    cfg = small_cfg()
    w = workers_for(cfg)[0]
    w.reset(cfg.phases[0])
    a = w.world.agents[0]
    aset = ActionSet.default()
    for k, (frac, off) in enumerate(aset.actions):
        h = a.psi + off
        v = Vec2(frac * a.v_pref * math.cos(h), frac * a.v_pref * math.sin(h))
        assert nearest_action(aset, a, v) == k
    assert aset.actions[nearest_action(aset, a, Vec2(0.0, 0.0))][0] == 0.0


def test_demonstrations_label_every_active_agent():
    cfg = small_cfg()
    pol = Policy.create(cfg.policy, seed=0)
    buf = demonstrations(pol, cfg, 8, cfg.phases[0])
    assert len(buf.batches) == 8
    assert len(buf) == sum(b.size for b in buf.batches)
    assert all(0 <= t.action < pol.config.n_actions for t in buf.transitions)
    # swap agents start facing their goals with a clear path: ORCA goes straight at full speed
    full = max(range(pol.config.n_actions), key=lambda k: (pol.config.action_set.actions[k][0],
                                                            -abs(pol.config.action_set.actions[k][1])))
    assert buf.transitions[0].action == full


def test_imitation_lowers_cross_entropy():
    cfg = small_cfg(imitation_steps=16, imitation_epochs=4, imitation_batch=16)
    pol = Policy.create(cfg.policy, seed=0)
    buf = demonstrations(pol, cfg, cfg.imitation_steps, cfg.phases[0])
    R, _ = returns_and_advantages(buf, cfg.gamma)
    before = imitation_loss(buf, pol, R, cfg)[1]
    stats = imitate(pol, cfg)
    after = imitation_loss(buf, pol, R, cfg)[1]
    assert after < before
    assert stats["env_steps"] == 16 and stats["samples"] == len(buf)


def test_train_counts_imitation_steps(tmp_path):
    cfg = small_cfg(imitation_steps=8, imitation_epochs=1, out_dir=str(tmp_path))
    res = train(cfg, updates=1)
    assert res.metrics[0]["env_steps"] == 8 + cfg.rollout_len * cfg.n_workers
    assert (tmp_path / "imitation.json").exists()


SWAP_BUDGET = 64_000      # env steps, frozen from a 5-seed calibration run


@pytest.mark.slow
def test_swap_two_learned_within_budget(tmp_path):
    """Phase-1 training solves the greedy 2-agent swap within the budget for 3 of 5 seeds."""
    from dmca.trainer import PHASE_1

    hits = misses = 0
    for seed in range(5):
        cfg = TrainConfig(seed=seed, phases=(PHASE_1,), eval_scenario=("swap", 2), eval_every=10,
                          stop_at_success=0.9, max_env_steps=SWAP_BUDGET, checkpoint_every=0,
                          out_dir=str(tmp_path / f"s{seed}"))
        reached = train(cfg).first_success_step
        if reached is not None and reached <= SWAP_BUDGET:
            hits += 1
        else:
            misses += 1
        if hits >= 3 or misses >= 3:
            break
    assert hits >= 3
