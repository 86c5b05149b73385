"""Synchronous advantage actor-critic training with a scenario curriculum.

One update = one rollout round: ``n_workers`` environments each advance
``rollout_len`` steps against a frozen copy of the parameters, then the
learner takes a single Adam step on the whole buffer. Environments live in
the learner's process and are batched into one forward pass per step; each
keeps its own random stream so the result depends only on (seed, n_workers,
config).

Loss per transition, averaged over the buffer::

    -log pi(a|s) * A                          policy
    + value_coef * (R - V(s))^2               critic
    - entropy_coef * H(pi(.|s))               exploration
    - link_coef * sum_j log q(l_j|o_j) * A    link selector (score function)

The straight-through gate also carries gradient from the first two terms
into the link selector; the score-function term is what lets the per-link
cost in the reward reach it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import tensorgrad as tg
from .bench.runner import PolicyPlanner, evaluate
from .bench.scenarios import Scenario, gen_scenario
from .policy import ObsBatch, Policy, PolicyConfig, agent_batch, choose_actions, comm_replies, fill_comm, pad_batches
from .sim import Status, World, WorldConfig, step

log = logging.getLogger(__name__)

PRESETS = {"dmca": 0.0, "dmca-lc": 0.0001}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Phase:
    """Curriculum stage: episodes draw uniformly from ``scenarios`` for ``updates`` updates.

    Each scenario entry is (family, n_min, n_max).
    """
    scenarios: tuple
    updates: int

    def __post_init__(self):
        if not self.scenarios:
            raise ValueError("phase needs at least one scenario")
        if self.updates < 1:
            raise ValueError("phase update budget must be >= 1")
        for fam, lo, hi in self.scenarios:
            if not 1 <= lo <= hi:
                raise ValueError(f"bad agent-count range {lo}..{hi} for {fam}")


PHASE_1 = Phase(scenarios=(("swap", 2, 2), ("circle", 2, 4)), updates=2000)
PHASE_2 = Phase(scenarios=(("circle", 6, 10), ("swap", 6, 10), ("random", 4, 10)), updates=2000)


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "dmca"
    gamma: float = 0.97
    rollout_len: int = 32
    n_workers: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    link_coef: float = 1.0
    max_grad_norm: float = 0.0           # 0 disables clipping
    adv_norm: bool = False               # standardise advantages per update
    straight_bias: float = 0.0           # initial logit bonus of the full-speed, keep-heading action
    imitation_steps: int = 4096          # env steps of ORCA demonstrations before RL; 0 disables
    imitation_epochs: int = 6
    imitation_batch: int = 256           # rows per imitation minibatch
    imitation_lr: float = 1e-3
    lambda_comm: float = 0.0
    nav_reward: bool = True              # False keeps only the link cost (degenerate check)
    phases: tuple = (PHASE_1, PHASE_2)
    seed: int = 0
    t_max: int = 200                     # training episode cap, steps
    agent_radius: float = 0.2
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval_every: int = 50                 # 0 disables greedy evaluation
    eval_scenario: tuple = ("circle", 4)
    eval_trials: int = 1
    eval_t_max: int = 500
    stop_at_success: float | None = None
    max_env_steps: int | None = None
    checkpoint_every: int = 500          # 0: only the final checkpoint
    out_dir: str | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        for name in ("rollout_len", "n_workers", "t_max", "eval_trials"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.imitation_steps < 0 or self.imitation_epochs < 0 or self.imitation_batch < 1:
            raise ValueError("imitation_steps/epochs must be >= 0 and imitation_batch >= 1")
        for name in ("entropy_coef", "value_coef", "link_coef", "lambda_comm", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.phases:
            raise ValueError("phases must be non-empty")

    @classmethod
    def from_preset(cls, preset: str, **kw) -> "TrainConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        return cls(**{"preset": preset, "lambda_comm": PRESETS[preset], **kw})

    @property
    def total_updates(self) -> int:
        return sum(p.updates for p in self.phases)

    def phase_index(self, update: int) -> int:
        """Phase for 0-based ``update``; the last phase continues past the budget."""
        for k, p in enumerate(self.phases):
            if update < p.updates:
                return k
            update -= p.updates
        return len(self.phases) - 1

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["phases"] = [{"scenarios": [list(s) for s in p.scenarios], "updates": p.updates} for p in self.phases]
        pol = asdict(self.policy)
        pol.pop("action_set")
        pol["comm_hidden"] = list(pol["comm_hidden"])
        pol["nav_hidden"] = list(pol["nav_hidden"])
        d["policy"] = pol
        d["eval_scenario"] = list(self.eval_scenario)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        preset = d.get("preset", "dmca")
        if "lambda_comm" not in d and preset in PRESETS:
            d["lambda_comm"] = PRESETS[preset]
        if "phases" in d:
            d["phases"] = tuple(Phase(tuple(tuple(s) for s in p["scenarios"]), int(p["updates"]))
                                for p in d["phases"])
        if "policy" in d:
            pol = dict(d["policy"])
            for k in ("comm_hidden", "nav_hidden"):
                if k in pol:
                    pol[k] = tuple(pol[k])
            d["policy"] = PolicyConfig(**pol)
        if "eval_scenario" in d:
            d["eval_scenario"] = tuple(d["eval_scenario"])
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def read(cls, path) -> "TrainConfig":
        return cls.from_yaml(Path(path).read_text())


# environments

class Worker:
    """One training environment with its own random stream."""

    def __init__(self, cfg: TrainConfig, seed_seq: np.random.SeedSequence):
        self.cfg = cfg
        self.rng = np.random.Generator(np.random.Philox(seed_seq))
        self.world: World | None = None
        self.episode = -1

    def reset(self, phase: Phase):
        fam, lo, hi = phase.scenarios[int(self.rng.integers(len(phase.scenarios)))]
        n = int(self.rng.integers(lo, hi + 1))
        spec = Scenario(fam, n, radius=self.cfg.agent_radius, seed=int(self.rng.integers(2 ** 31)))
        wc = WorldConfig(t_max=self.cfg.t_max, lambda_comm=self.cfg.lambda_comm)
        self.world = gen_scenario(spec, wc)
        self.episode += 1
        self.returns = {a.id: 0.0 for a in self.world.agents}
        self.links = 0


@dataclass
class Transition:
    key: tuple           # (worker, episode, agent id): one agent trajectory
    batch: int           # index of the ObsBatch holding this agent's inputs
    row: int             # row inside that batch
    action: int
    reward: float        # includes -lambda_comm * n_links
    value: float
    done: bool
    n_links: int


@dataclass
class Buffer:
    transitions: list[Transition] = field(default_factory=list)
    batches: list[ObsBatch] = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)

    def stacked(self) -> tuple[ObsBatch, np.ndarray]:
        """All inputs as one padded batch, and each transition's row in it."""
        offsets = np.cumsum([0] + [b.size for b in self.batches])
        rows = np.array([offsets[t.batch] + t.row for t in self.transitions], dtype=np.int64)
        return pad_batches(self.batches), rows


@dataclass
class EpisodeStats:
    n_agents: int
    success: int
    collided: int
    mean_return: float
    links_per_agent_step: float


def _episode_stats(world: World, returns: dict, links: int) -> EpisodeStats:
    st = list(world.status.values())
    n = len(st)
    steps = max(world.t, 1)
    return EpisodeStats(n, sum(s is Status.AT_GOAL for s in st), sum(s is Status.COLLIDED for s in st),
                        sum(returns.values()) / n, links / (n * steps))


def rollout(workers: list[Worker], policy: Policy, rollout_len: int, phase: Phase,
            cfg: TrainConfig) -> tuple[Buffer, dict, list[EpisodeStats]]:
    """Advance every worker ``rollout_len`` steps with a fixed parameter snapshot.

    Returns the buffer, the bootstrap value of every trajectory still running
    at the end, and stats of the episodes that finished during the rollout.
    """
    buf = Buffer()
    finished = []
    for w in workers:
        if w.world is None:
            w.reset(phase)
    for _ in range(rollout_len):
        parts = []
        for w in workers:
            ids = w.world.active_ids()
            batch, agents = agent_batch(w.world, ids)
            policy.select_links(batch, "sample", w.rng)
            fill_comm(batch, agents, comm_replies(w.world, batch, ids, agents))
            parts.append((w, ids, agents, batch))
        big = pad_batches([p[3] for p in parts])
        out = policy.forward(big)
        start = 0
        for wi, (w, ids, agents, batch) in enumerate(parts):
            probs = out.action_probs[start:start + len(ids)]
            values = out.value[start:start + len(ids)]
            idx = choose_actions(probs, "sample", w.rng)
            actions = {i: policy.config.action_set.to_action(k, a) for i, k, a in zip(ids, idx, agents)}
            links = {i: [int(j) for j, l in zip(batch.nb_ids[b], batch.links[b]) if l > 0.5]
                     for b, i in enumerate(ids)}
            res = step(w.world, actions, links)
            b_index = len(buf.batches)
            buf.batches.append(batch)
            for b, i in enumerate(ids):
                n_l = len(links[i])
                r = res.rewards[i] if cfg.nav_reward else -cfg.lambda_comm * n_l
                done = res.done or w.world.status[i] is not Status.ACTIVE
                buf.transitions.append(Transition((wi, w.episode, i), b_index, b, idx[b], r,
                                                  float(values[b]), done, n_l))
                w.returns[i] += r
                w.links += n_l
            start += len(ids)
            if res.done:
                finished.append(_episode_stats(w.world, w.returns, w.links))
                w.reset(phase)
    return buf, bootstrap_values(workers, policy, buf), finished


def bootstrap_values(workers: list[Worker], policy: Policy, buf: Buffer) -> dict:
    """V(s_T) for trajectories cut by the rollout boundary (0 for finished ones)."""
    open_keys = {}
    for t in buf.transitions:
        open_keys[t.key] = not t.done
    parts, keys = [], []
    for wi, w in enumerate(workers):
        ids = [i for i in w.world.active_ids() if open_keys.get((wi, w.episode, i))]
        if not ids:
            continue
        batch, agents = agent_batch(w.world, ids)
        policy.select_links(batch, "sample", w.rng)
        fill_comm(batch, agents, comm_replies(w.world, batch, ids, agents))
        parts.append(batch)
        keys += [(wi, w.episode, i) for i in ids]
    out = {k: 0.0 for k in open_keys}
    if parts:
        values = policy.forward(pad_batches(parts)).value
        out.update({k: float(v) for k, v in zip(keys, values)})
    return out


# targets and loss

def discounted_returns(rewards, dones, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1}, restarting after every done flag."""
    out = np.zeros(len(rewards))
    run = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            run = 0.0
        run = rewards[t] + gamma * run
        out[t] = run
    return out


def returns_and_advantages(buffer: Buffer, gamma: float, bootstrap: dict | None = None):
    """Per-transition returns and advantages R - V, aligned with ``buffer.transitions``."""
    bootstrap = bootstrap or {}
    groups: dict[tuple, list[int]] = {}
    for k, t in enumerate(buffer.transitions):
        groups.setdefault(t.key, []).append(k)
    R = np.zeros(len(buffer))
    for key, idx in groups.items():
        ts = [buffer.transitions[k] for k in idx]
        R[idx] = discounted_returns([t.reward for t in ts], [t.done for t in ts], gamma,
                                    bootstrap.get(key, 0.0))
    V = np.array([t.value for t in buffer.transitions])
    return R, R - V


@dataclass
class LossParts:
    total: float
    policy: float
    value: float
    entropy: float
    link: float
    p_link: float | None    # mean over linkable slots; None if there were none


def loss(buffer: Buffer, policy: Policy, returns, advantages, cfg: TrainConfig,
         straight_through: bool = True):
    """Scalar A2C loss on ``buffer`` (call inside a Tape); returns (Tensor, LossParts).

    ``straight_through=False`` swaps the hard link gate for its soft sample,
    which makes the loss smooth in the link selector (for gradient checks).
    """
    batch, rows = buffer.stacked()
    ft = policy.forward_tensors(batch, straight_through=straight_through)
    n = len(buffer)
    A = policy.config.n_actions
    onehot = np.zeros((batch.size, A))
    weight = np.zeros(batch.size)
    adv = np.zeros(batch.size)
    ret = np.zeros(batch.size)
    for t, r, a_t, R_t in zip(buffer.transitions, rows, advantages, returns):
        onehot[r, t.action] = 1.0
        weight[r] = 1.0 / n
        adv[r] = a_t
        ret[r] = R_t

    logp_a = tg.sum_(tg.mul(ft.log_probs, onehot), axis=-1)
    pi_loss = -tg.sum_(tg.mul(logp_a, adv * weight))
    err = tg.sub(ft.value, ret)
    v_loss = tg.mul(tg.sum_(tg.mul(tg.square(err), weight)), cfg.value_coef)
    ent = -tg.sum_(tg.mul(tg.exp(ft.log_probs), ft.log_probs), axis=-1)
    ent_term = tg.mul(tg.sum_(tg.mul(ent, weight)), -cfg.entropy_coef)
    total = tg.add(tg.add(pi_loss, v_loss), ent_term)

    link_val = 0.0
    p_link = None
    if batch.width:
        links = batch.links * batch.linkable
        chosen = np.stack([links, (1.0 - links) * batch.linkable], axis=-1)
        logq = tg.sum_(tg.sum_(tg.mul(ft.link_log_probs, chosen), axis=-1), axis=-1)   # (B,)
        link_term = tg.mul(tg.sum_(tg.mul(logq, adv * weight)), -cfg.link_coef)
        total = tg.add(total, link_term)
        link_val = link_term.item()
        mask = batch.linkable
        if mask.any():
            p_link = float(np.exp(ft.link_log_probs.data[..., 0])[mask].mean())
    parts = LossParts(total=total.item(), policy=pi_loss.item(), value=v_loss.item(),
                      entropy=ent_term.item(), link=link_val, p_link=p_link)
    return total, parts


# imitation warm start

def nearest_action(action_set, agent, v) -> int:
    """Index of the discrete action whose commanded velocity is closest to ``v``."""
    best, best_k = math.inf, 0
    for k, (frac, off) in enumerate(action_set.actions):
        h = agent.psi + off
        d = math.hypot(frac * agent.v_pref * math.cos(h) - v.x, frac * agent.v_pref * math.sin(h) - v.y)
        if d < best:
            best, best_k = d, k
    return best_k


def demonstrations(policy: Policy, cfg: TrainConfig, n_steps: int, phase: Phase) -> Buffer:
    """ORCA-driven rollouts labelled with the nearest discrete action.

    Worlds advance under ORCA's own unicycle commands; links are sampled from
    the current selector so the comm inputs look like they will during RL.
    """
    from .orca import ORCAPlanner

    orca = ORCAPlanner()
    ss = np.random.SeedSequence([cfg.seed, 1])
    workers = [Worker(cfg, s) for s in ss.spawn(cfg.n_workers)]
    for w in workers:
        w.reset(phase)
    aset = policy.config.action_set
    buf = Buffer()
    for _ in range(max(n_steps // cfg.n_workers, 1)):
        for wi, w in enumerate(workers):
            ids = w.world.active_ids()
            batch, agents = agent_batch(w.world, ids)
            policy.select_links(batch, "sample", w.rng)
            fill_comm(batch, agents, comm_replies(w.world, batch, ids, agents))
            vels = orca.velocities(w.world)
            actions, _ = orca.plan(w.world)
            res = step(w.world, actions, {i: [] for i in ids})
            b_index = len(buf.batches)
            buf.batches.append(batch)
            for b, (i, a) in enumerate(zip(ids, agents)):
                done = res.done or w.world.status[i] is not Status.ACTIVE
                buf.transitions.append(Transition((wi, w.episode, i), b_index, b, nearest_action(aset, a, vels[i]),
                                                  res.rewards[i], 0.0, done, 0))
            if res.done:
                w.reset(phase)
    return buf


def _sub_buffer(buf: Buffer, batch_ids, rows_of: dict) -> tuple[Buffer, np.ndarray]:
    sub = Buffer()
    picked = []
    for new_b, b in enumerate(batch_ids):
        sub.batches.append(buf.batches[b])
        for k in rows_of[b]:
            sub.transitions.append(replace(buf.transitions[k], batch=new_b))
            picked.append(k)
    return sub, np.array(picked, dtype=np.int64)


def imitation_loss(buffer: Buffer, policy: Policy, returns, cfg: TrainConfig):
    """Cross-entropy to the demonstrated actions plus the critic's regression loss."""
    batch, rows = buffer.stacked()
    ft = policy.forward_tensors(batch)
    onehot = np.zeros((batch.size, policy.config.n_actions))
    weight = np.zeros(batch.size)
    ret = np.zeros(batch.size)
    for t, r, R_t in zip(buffer.transitions, rows, returns):
        onehot[r, t.action] = 1.0
        weight[r] = 1.0 / len(buffer)
        ret[r] = R_t
    ce = tg.mul(tg.sum_(tg.mul(tg.sum_(tg.mul(ft.log_probs, onehot), axis=-1), weight)), -1.0)
    err = tg.sub(ft.value, ret)
    v_loss = tg.mul(tg.sum_(tg.mul(tg.square(err), weight)), cfg.value_coef)
    acc = float((ft.log_probs.data.argmax(-1) == onehot.argmax(-1))[weight > 0].mean())
    return tg.add(ce, v_loss), ce.item(), acc


def imitate(policy: Policy, cfg: TrainConfig, phase: Phase | None = None) -> dict:
    """Behaviour-cloning warm start on ORCA demonstrations; returns fit stats.

    Plain A2C from a random policy rarely reaches a goal under the sparse
    reward, so the actor and critic are first fitted to a short ORCA run.
    """
    phase = phase or cfg.phases[0]
    buf = demonstrations(policy, cfg, cfg.imitation_steps, phase)
    R, _ = returns_and_advantages(buf, cfg.gamma)
    rows_of: dict[int, list[int]] = {}
    for k, t in enumerate(buf.transitions):
        rows_of.setdefault(t.batch, []).append(k)
    rng = np.random.default_rng(cfg.seed)
    opt = tg.AdamState()
    ce = acc = None
    for _ in range(cfg.imitation_epochs):
        order = [int(b) for b in rng.permutation(len(buf.batches))]
        groups, cur, size = [], [], 0
        for b in order:
            cur.append(b)
            size += len(rows_of.get(b, ()))
            if size >= cfg.imitation_batch:
                groups.append(cur)
                cur, size = [], 0
        if cur:
            groups.append(cur)
        for g in groups:
            sub, picked = _sub_buffer(buf, [b for b in g if b in rows_of], rows_of)
            if not len(sub):
                continue
            policy.params.zero_grad()
            with tg.Tape() as tape:
                total, ce, acc = imitation_loss(sub, policy, R[picked], cfg)
            tape.backward(total)
            grads = {n: (gr if gr is not None else np.zeros_like(policy.params[n].data))
                     for n, gr in policy.params.grads().items()}
            tg.adam_step(policy.params, grads, opt, cfg.imitation_lr, cfg.beta1, cfg.beta2, cfg.eps)
    n_steps = max(cfg.imitation_steps // cfg.n_workers, 1) * cfg.n_workers
    return {"env_steps": n_steps, "samples": len(buf), "cross_entropy": ce, "accuracy": acc}


# training loop

def apply_straight_bias(policy: Policy, bias: float):
    """Raise the initial logit of the (full speed, no turn) action.

    Agents start facing their goals, so this turns the first episodes from a
    heading random walk into mostly goal-directed motion with occasional
    collisions, which gives the critic a signal from the first update.
    """
    acts = policy.config.action_set.actions
    k = max(range(len(acts)), key=lambda j: (acts[j][0], -abs(acts[j][1])))
    policy.params["pi.b"].data[k] += bias


@dataclass
class TrainResult:
    policy: Policy
    metrics: list[dict]
    checkpoints: list[str]
    env_steps: int
    first_success_step: int | None   # env steps when greedy eval first met stop_at_success


def _dump_diagnostic(out_dir, update: int, parts: LossParts, policy: Policy, grads: dict | None):
    info = {
        "update": update, "loss": asdict(parts),
        "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in policy.params.items()},
        "nonfinite_params": [n for n, p in policy.params.items() if not np.isfinite(p.data).all()],
    }
    if grads is not None:
        info["grad_norms"] = {n: float(np.linalg.norm(g)) for n, g in grads.items()}
    text = json.dumps(info, indent=1, default=str)
    if out_dir is not None:
        path = Path(out_dir) / f"diagnostic_{update}.json"
        path.write_text(text)
        return str(path)
    return text


def greedy_eval(policy: Policy, cfg: TrainConfig):
    fam, n = cfg.eval_scenario
    spec = Scenario(fam, int(n), radius=cfg.agent_radius, seed=10 ** 6 + cfg.seed)
    report, _ = evaluate(PolicyPlanner(policy, "greedy"), spec, cfg.eval_trials, cfg.eval_t_max,
                         WorldConfig(lambda_comm=cfg.lambda_comm))
    return report


def train(cfg: TrainConfig, policy: Policy | None = None, updates: int | None = None,
          on_update=None) -> TrainResult:
    """Run the curriculum; writes metrics.jsonl, checkpoints and config.yaml into ``cfg.out_dir``.

    A fresh policy gets the imitation warm start first (its demonstration
    steps count toward ``env_steps``); a passed-in policy is trained as is.
    """
    fresh = policy is None
    if fresh:
        policy = Policy.create(cfg.policy, seed=cfg.seed)
        apply_straight_bias(policy, cfg.straight_bias)
    ss = np.random.SeedSequence(cfg.seed)
    workers = [Worker(cfg, s) for s in ss.spawn(cfg.n_workers)]
    opt = tg.AdamState()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.yaml").write_text(cfg.to_yaml())
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    total = cfg.total_updates if updates is None else updates
    metrics, ckpts = [], []
    env_steps = 0
    if fresh and cfg.imitation_steps and cfg.imitation_epochs:
        warm = imitate(policy, cfg)
        env_steps += warm["env_steps"]
        log.info("imitation warm start: %s", warm)
        if out_dir:
            (out_dir / "imitation.json").write_text(json.dumps(warm, sort_keys=True) + "\n")
    first_success = None
    current_phase = None

    def checkpoint(u):
        if out_dir:
            path = out_dir / f"{cfg.preset}_{u}.ckpt"
            policy.save(path)
            ckpts.append(str(path))

    for u in range(total):
        if cfg.max_env_steps is not None and env_steps + cfg.rollout_len * cfg.n_workers > cfg.max_env_steps:
            break       # the next update would overrun the budget
        k_phase = cfg.phase_index(u)
        phase = cfg.phases[k_phase]
        if k_phase != current_phase:
            # new curriculum stage: restart every environment from it
            for w in workers:
                w.reset(phase)
            current_phase = k_phase
        snap = policy.snapshot()
        buf, boot, finished = rollout(workers, snap, cfg.rollout_len, phase, cfg)
        env_steps += cfg.rollout_len * cfg.n_workers
        R, adv = returns_and_advantages(buf, cfg.gamma, boot)
        if cfg.adv_norm and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        policy.params.zero_grad()
        with tg.Tape() as tape:
            total_loss, parts = loss(buf, policy, R, adv, cfg)
        if not math.isfinite(parts.total):
            where = _dump_diagnostic(out_dir, u + 1, parts, policy, None)
            raise TrainingError(f"non-finite loss at update {u + 1}; diagnostic: {where}")
        tape.backward(total_loss)
        grads = {n: (g if g is not None else np.zeros_like(policy.params[n].data))
                 for n, g in policy.params.grads().items()}
        if not all(np.isfinite(g).all() for g in grads.values()):
            where = _dump_diagnostic(out_dir, u + 1, parts, policy, grads)
            raise TrainingError(f"non-finite gradient at update {u + 1}; diagnostic: {where}")
        gnorm = tg.clip_grad_norm(grads, cfg.max_grad_norm)
        tg.adam_step(policy.params, grads, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

        row = {
            "update": u + 1, "env_steps": env_steps, "phase": k_phase + 1,
            "loss": parts.total, "policy_loss": parts.policy, "value_loss": parts.value,
            "entropy_loss": parts.entropy, "link_loss": parts.link, "p_link": parts.p_link,
            "grad_norm": gnorm, "episodes": len(finished),
            "mean_return": _mean([e.mean_return for e in finished]),
            "success_rate": _mean([e.success / e.n_agents for e in finished]),
            "collision_rate": _mean([e.collided / e.n_agents for e in finished]),
            "links_per_agent_step": float(np.mean([t.n_links for t in buf.transitions])) if len(buf) else 0.0,
        }
        if cfg.eval_every and (u + 1) % cfg.eval_every == 0:
            rep = greedy_eval(policy, cfg)
            row.update(eval_success=rep.success_rate, eval_collision=rep.collision_rate,
                       eval_links_per_agent=rep.mean_links_per_agent)
            if (cfg.stop_at_success is not None and first_success is None
                    and rep.success_rate >= cfg.stop_at_success):
                first_success = env_steps
        metrics.append(row)
        if out_dir:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if on_update:
            on_update(row)
        log.info("update %d env_steps %d loss %.4f success %s", u + 1, env_steps, parts.total,
                 row["success_rate"])
        if cfg.checkpoint_every and (u + 1) % cfg.checkpoint_every == 0:
            checkpoint(u + 1)
        if first_success is not None:
            break
    if metrics and (not ckpts or not ckpts[-1].endswith(f"_{metrics[-1]['update']}.ckpt")):
        checkpoint(metrics[-1]["update"])
    return TrainResult(policy, metrics, ckpts, env_steps, first_success)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
