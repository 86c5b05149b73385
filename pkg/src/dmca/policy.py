"""The navigation/communication network.

Four blocks share one ParamStore:

* encoder: multi-head self-attention over [ego token, neighbour tokens]; the
  ego row of the output is the fixed-length observation encoding e_o.
* link selector: per-neighbour MLP 7 -> 64 -> 64 -> 2 (softmax) giving
  [p_link, 1 - p_link], sampled with hard Gumbel-softmax.
* aggregator: LSTM over [obs_j, comm_j] of the granted links, farthest first,
  whose final hidden state is e_c.
* navigation head: MLP over [ego input, e_o, e_c] -> action logits and value.

Everything runs on padded batches (:class:`ObsBatch`); the single-instance
helpers at the bottom wrap a batch of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorgrad as tg
from .core import (Action, AgentState, CommState, EgoInput, NeighborObs, Vec2, comm_state, ego_input,
                   ego_self_obs)
from .sim import exchange, observe
from .tensorgrad import Tensor

OBS_DIM = 7
EGO_DIM = 4
COMM_DIM = 3
MANIFEST_RECORD = "__manifest__"


@dataclass(frozen=True)
class ActionSet:
    """Discrete actions as (fraction of v_pref, heading offset from current heading)."""
    actions: tuple = ()

    def __post_init__(self):
        if not any(frac == 0.0 for frac, _ in self.actions):
            raise ValueError("action set must contain a stop action")
        if any(not 0.0 <= frac <= 1.0 for frac, _ in self.actions):
            raise ValueError("speed fractions must be in [0, 1]")

    @classmethod
    def default(cls) -> "ActionSet":
        offsets = (0.0, math.pi / 12, -math.pi / 12, math.pi / 6, -math.pi / 6)
        acts = [(speed, off) for speed in (1.0, 0.5) for off in offsets]
        return cls(tuple(acts) + ((0.0, 0.0),))

    def __len__(self):
        return len(self.actions)

    def to_action(self, k: int, agent: AgentState) -> Action:
        frac, off = self.actions[k]
        return Action(speed=frac * agent.v_pref, psi_cmd=agent.psi + off)


@dataclass(frozen=True)
class PolicyConfig:
    n_heads: int = 20
    d_qk: int = 128
    d_v: int = 256
    d_embed: int = 256
    comm_hidden: tuple = (64, 64)
    lstm_hidden: int = 64
    nav_hidden: tuple = (1024, 512, 512, 256)
    action_set: ActionSet = field(default_factory=ActionSet.default)
    tau: float = 1.0

    @property
    def n_actions(self) -> int:
        return len(self.action_set)

    @property
    def nav_in(self) -> int:
        return EGO_DIM + self.d_embed + self.lstm_hidden

    def to_json(self) -> str:
        d = asdict(self)
        d["action_set"] = [list(a) for a in self.action_set.actions]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PolicyConfig":
        d = json.loads(text)
        d["action_set"] = ActionSet(tuple(tuple(a) for a in d["action_set"]))
        d["comm_hidden"] = tuple(d["comm_hidden"])
        d["nav_hidden"] = tuple(d["nav_hidden"])
        return cls(**d)

    @classmethod
    def small(cls, **kw) -> "PolicyConfig":
        """Tiny widths for gradient checks and fast tests."""
        base = dict(n_heads=2, d_qk=3, d_v=4, d_embed=5, comm_hidden=(4, 4), lstm_hidden=3,
                    nav_hidden=(6, 5))
        base.update(kw)
        return cls(**base)


def param_shapes(cfg: PolicyConfig) -> dict[str, tuple]:
    h = cfg.n_heads
    shapes = {
        "enc.Wq": (h, OBS_DIM, cfg.d_qk),
        "enc.Wk": (h, OBS_DIM, cfg.d_qk),
        "enc.Wv": (h, OBS_DIM, cfg.d_v),
        "enc.Wo": (h * cfg.d_v, cfg.d_embed),
    }
    widths = (OBS_DIM,) + tuple(cfg.comm_hidden) + (2,)
    for k in range(len(widths) - 1):
        shapes[f"comm.W{k}"] = (widths[k], widths[k + 1])
        shapes[f"comm.b{k}"] = (widths[k + 1],)
    H = cfg.lstm_hidden
    shapes["lstm.W"] = (OBS_DIM + COMM_DIM + H, 4 * H)
    shapes["lstm.b"] = (4 * H,)
    widths = (cfg.nav_in,) + tuple(cfg.nav_hidden)
    for k in range(len(widths) - 1):
        shapes[f"nav.W{k}"] = (widths[k], widths[k + 1])
        shapes[f"nav.b{k}"] = (widths[k + 1],)
    shapes["value.W"] = (widths[-1], 1)
    shapes["value.b"] = (1,)
    shapes["pi.W"] = (widths[-1], cfg.n_actions)
    shapes["pi.b"] = (cfg.n_actions,)
    return shapes


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> tg.ParamStore:
    store = tg.ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name.split(".")[-1].startswith("b"):
            value = np.zeros(shape)
            if name == "lstm.b":
                H = cfg.lstm_hidden
                value[H:2 * H] = 1.0
        elif len(shape) == 3:
            value = tg.glorot_uniform(rng, shape, shape[1], shape[2])
        elif name == "lstm.W":
            value = tg.glorot_uniform(rng, shape, shape[0], shape[1] // 4)
        else:
            value = tg.glorot_uniform(rng, shape, shape[0], shape[1])
        store.add(name, value)
    return store


@dataclass
class ObsBatch:
    """Padded network inputs for B agents with up to M neighbour slots.

    Neighbour slots are sorted by decreasing distance (closest last) so the
    LSTM can read them in slot order; padding sits after the real slots.
    ``comm`` is zero wherever no link was granted, so a non-linked
    neighbour's hidden state never reaches the network.
    """
    ego: np.ndarray          # (B, 4)
    ego_tok: np.ndarray      # (B, 7)
    nb: np.ndarray           # (B, M, 7)
    nb_mask: np.ndarray      # (B, M) bool, real slot
    linkable: np.ndarray     # (B, M) bool, slot is an agent (obstacles cannot link)
    nb_ids: np.ndarray       # (B, M) int, -10**9 for padding
    links: np.ndarray | None = None   # (B, M) {0, 1}
    comm: np.ndarray | None = None    # (B, M, 3)
    noise: np.ndarray | None = None   # (B, M, 2) Gumbel draws behind ``links``

    @property
    def size(self) -> int:
        return self.ego.shape[0]

    @property
    def width(self) -> int:
        return self.nb.shape[1]


PAD_ID = -10 ** 9


def sort_neighbors(nb_toks: list[NeighborObs]) -> list[NeighborObs]:
    """Farthest first, closest last; ties by id for determinism."""
    return sorted(nb_toks, key=lambda o: (-o.d_a, o.id if o.id is not None else 0))


def make_batch(egos: list[EgoInput], ego_toks: list[NeighborObs], nbs: list[list[NeighborObs]],
               width: int | None = None) -> ObsBatch:
    B = len(egos)
    M = max([len(n) for n in nbs] + [0]) if width is None else width
    nb = np.zeros((B, M, OBS_DIM))
    mask = np.zeros((B, M), bool)
    linkable = np.zeros((B, M), bool)
    ids = np.full((B, M), PAD_ID, dtype=np.int64)
    for b, toks in enumerate(nbs):
        for k, o in enumerate(sort_neighbors(toks)):
            nb[b, k] = o.as_array()
            mask[b, k] = True
            oid = o.id if o.id is not None else k
            ids[b, k] = oid
            linkable[b, k] = oid >= 0
    ego = np.array([e.as_array() for e in egos]).reshape(B, EGO_DIM)
    tok = np.array([t.as_array() for t in ego_toks]).reshape(B, OBS_DIM)
    return ObsBatch(ego=ego, ego_tok=tok, nb=nb, nb_mask=mask, linkable=linkable, nb_ids=ids)


def pad_batches(batches: list[ObsBatch]) -> ObsBatch:
    """Concatenate batches along B, padding neighbour slots to the widest."""
    M = max(b.width for b in batches)

    def pad(a, fill=0):
        if a.shape[1] == M:
            return a
        widths = [(0, 0), (0, M - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
        return np.pad(a, widths, constant_values=fill)

    cat = np.concatenate
    out = ObsBatch(
        ego=cat([b.ego for b in batches]), ego_tok=cat([b.ego_tok for b in batches]),
        nb=cat([pad(b.nb) for b in batches]), nb_mask=cat([pad(b.nb_mask, False) for b in batches]),
        linkable=cat([pad(b.linkable, False) for b in batches]),
        nb_ids=cat([pad(b.nb_ids, PAD_ID) for b in batches]))
    if all(b.links is not None for b in batches):
        out.links = cat([pad(b.links) for b in batches])
        out.comm = cat([pad(b.comm) for b in batches])
        out.noise = cat([pad(b.noise) for b in batches])
    return out


@dataclass
class PolicyOutput:
    action_probs: np.ndarray   # (B, A)
    value: np.ndarray          # (B,)
    link_probs: np.ndarray     # (B, M)
    link_samples: np.ndarray | None = None


@dataclass
class ForwardTensors:
    """Tape-visible outputs of one batched forward pass."""
    logits: Tensor
    log_probs: Tensor
    value: Tensor
    link_log_probs: Tensor   # (B, M, 2) log [p_link, 1 - p_link]
    e_o: Tensor
    e_c: Tensor


class Policy:
    def __init__(self, config: PolicyConfig, params: tg.ParamStore):
        self.config = config
        self.params = params
        missing = set(param_shapes(config)) - set(params.names())
        if missing:
            raise ValueError(f"params missing {sorted(missing)}")
        for name, shape in param_shapes(config).items():
            if params[name].shape != shape:
                raise ValueError(f"param {name!r} has shape {params[name].shape}, expected {shape}")

    @classmethod
    def create(cls, config: PolicyConfig | None = None, seed: int = 0) -> "Policy":
        config = config or PolicyConfig()
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def snapshot(self) -> "Policy":
        return Policy(self.config, self.params.snapshot())

    # blocks

    def link_log_probs(self, nb) -> Tensor:
        p = self.params
        layers = [(p[f"comm.W{k}"], p[f"comm.b{k}"]) for k in range(len(self.config.comm_hidden) + 1)]
        return tg.log_softmax(tg.mlp(nb, layers), axis=-1)

    def encode(self, ego_tok, nb, nb_mask) -> Tensor:
        B = ego_tok.shape[0]
        seq = tg.concat([tg.reshape(ego_tok, (B, 1, OBS_DIM)), nb], axis=1)
        mask = np.concatenate([np.ones((B, 1), bool), np.asarray(nb_mask, bool)], axis=1)
        p = self.params
        out = tg.multi_head_attention(seq, p["enc.Wq"], p["enc.Wk"], p["enc.Wv"], p["enc.Wo"],
                                      mask=mask, query_rows=slice(0, 1))
        return tg.reshape(out, (B, self.config.d_embed))

    def aggregate(self, nb, comm, gate) -> Tensor:
        """Gated LSTM over slots: a slot with gate 0 leaves (h, c) untouched."""
        gate = tg.as_tensor(gate)
        B, M = gate.shape[:2]
        H = self.config.lstm_hidden
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        if M == 0:
            return h
        x = Tensor(np.concatenate([np.asarray(nb), np.asarray(comm)], axis=-1))
        W, b = self.params["lstm.W"], self.params["lstm.b"]
        for k in range(M):
            g = tg.reshape(gate[:, k], (B, 1))
            h_new, c_new = tg.lstm_step(x[:, k, :], h, c, W, b)
            h = tg.add(h, tg.mul(g, tg.sub(h_new, h)))
            c = tg.add(c, tg.mul(g, tg.sub(c_new, c)))
        return h

    def nav(self, ego, e_o, e_c):
        p = self.params
        x = tg.concat([ego, e_o, e_c], axis=-1)
        for k in range(len(self.config.nav_hidden)):
            x = tg.relu(tg.dense(x, p[f"nav.W{k}"], p[f"nav.b{k}"]))
        logits = tg.dense(x, p["pi.W"], p["pi.b"])
        value = tg.reshape(tg.dense(x, p["value.W"], p["value.b"]), (x.shape[0],))
        return logits, value

    # full passes

    def forward_tensors(self, batch: ObsBatch, straight_through: bool = True) -> ForwardTensors:
        """Batched forward. ``batch.links``/``comm``/``noise`` must be filled.

        With ``straight_through`` the LSTM gate of a granted link is 1 in the
        forward pass and carries the soft Gumbel sample's gradient; otherwise
        the gate is the soft sample itself (smooth, used for gradient checks).
        """
        if batch.links is None:
            raise ValueError("forward needs link decisions; call select_links/fill_comm first")
        link_lp = self.link_log_probs(batch.nb)
        e_o = self.encode(batch.ego_tok, batch.nb, batch.nb_mask)
        granted = np.asarray(batch.links, dtype=np.float64)
        if batch.width:
            soft = tg.gumbel_softmax(link_lp, self.config.tau, noise=batch.noise, hard=False)
            soft_link = tg.mul(soft[..., 0], granted)
            gate = tg.straight_through(granted, soft_link) if straight_through else soft_link
        else:
            gate = Tensor(np.zeros((batch.size, 0)))
        e_c = self.aggregate(batch.nb, batch.comm, gate)
        logits, value = self.nav(batch.ego, e_o, e_c)
        return ForwardTensors(logits=logits, log_probs=tg.log_softmax(logits, axis=-1), value=value,
                              link_log_probs=link_lp, e_o=e_o, e_c=e_c)

    def forward(self, batch: ObsBatch) -> PolicyOutput:
        out = self.forward_tensors(batch)
        return PolicyOutput(action_probs=np.exp(out.log_probs.data), value=out.value.data,
                            link_probs=np.exp(out.link_log_probs.data[..., 0]) * batch.nb_mask,
                            link_samples=batch.links)

    def select_links(self, batch: ObsBatch, mode: str = "sample", rng=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-neighbour link probabilities and {0,1} decisions; stores them on ``batch``."""
        lp = self.link_log_probs(batch.nb)
        p_link = np.exp(lp.data[..., 0])
        B, M = batch.nb_mask.shape
        if mode == "sample":
            noise = tg.sample_gumbel(rng, (B, M, 2))
            y = tg.gumbel_softmax(lp, self.config.tau, noise=noise, hard=True).data
            links = y[..., 0]
        elif mode == "greedy":
            noise = np.zeros((B, M, 2))
            links = (p_link >= 0.5).astype(np.float64)
        else:
            raise ValueError(f"unknown link mode {mode!r}")
        links = links * batch.linkable
        p_link = p_link * batch.nb_mask
        batch.links = links
        batch.noise = noise
        return p_link, links

    def act(self, out: PolicyOutput, mode: str, rng, agents: list[AgentState]) -> tuple[list[int], list[Action]]:
        idx = choose_actions(out.action_probs, mode, rng)
        return idx, [self.config.action_set.to_action(k, a) for k, a in zip(idx, agents)]

    # persistence

    def save(self, path):
        manifest = np.frombuffer(self.config.to_json().encode(), dtype=np.uint8)
        tg.save(self.params, path, extra={MANIFEST_RECORD: manifest})

    @classmethod
    def load(cls, path, expect_config: PolicyConfig | None = None) -> "Policy":
        records = tg.load_records(path)
        if MANIFEST_RECORD not in records:
            raise tg.CheckpointError(f"record {MANIFEST_RECORD!r}: missing from {path}")
        cfg = PolicyConfig.from_json(records[MANIFEST_RECORD].tobytes().decode())
        if expect_config is not None and cfg != expect_config:
            raise tg.CheckpointError(f"checkpoint {path} manifest does not match the expected config")
        params = tg.load(path, expected=list(param_shapes(cfg)), extra_names=(MANIFEST_RECORD,))
        for name, shape in param_shapes(cfg).items():
            if params[name].shape != shape:
                raise tg.CheckpointError(f"record {name!r}: shape {params[name].shape} != manifest {shape}")
        return cls(cfg, params)


def link_requests(batch: ObsBatch) -> list[list[int]]:
    """Granted neighbour ids per batch row."""
    return [[int(j) for j, l in zip(ids, row) if l > 0.5]
            for ids, row in zip(batch.nb_ids, batch.links)]


def fill_comm(batch: ObsBatch, egos: list[AgentState], replies: list[dict[int, CommState]]):
    """Write comm states for granted links. ``replies[b]`` maps neighbour id -> CommState."""
    comm = np.zeros(batch.nb.shape[:2] + (COMM_DIM,))
    for b, rep in enumerate(replies):
        for k, j in enumerate(batch.nb_ids[b]):
            if batch.links[b, k] > 0.5:
                comm[b, k] = rep[int(j)].as_array()
    batch.comm = comm


def choose_actions(probs: np.ndarray, mode: str, rng=None) -> list[int]:
    if mode == "greedy":
        return [int(k) for k in np.argmax(probs, axis=-1)]
    if mode != "sample":
        raise ValueError(f"unknown action mode {mode!r}")
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return [int(k) for k in np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)]


# single-instance helpers

def _one(nb_toks, ego_tok=None):
    ego = EgoInput(0.0, 1.0, 0.0, 0.1)
    zero = Vec2(0.0, 0.0)
    ego_tok = ego_tok or NeighborObs(p_rel=zero, v_rel=zero, r_j=ego.r, d_a=0.0, r_sum=2 * ego.r)
    return make_batch([ego], [ego_tok], [list(nb_toks)])


def encode_observation(policy: Policy, ego_tok: NeighborObs, nb_toks: list[NeighborObs]) -> np.ndarray:
    b = _one(nb_toks, ego_tok=ego_tok)
    return policy.encode(b.ego_tok, b.nb, b.nb_mask).data[0]


def select_links(policy: Policy, nb_toks: list[NeighborObs], mode: str = "sample", rng=None):
    """Link probabilities and decisions in the order of ``nb_toks``."""
    if not nb_toks:
        return np.zeros(0), np.zeros(0)
    b = _one(nb_toks)
    p, links = policy.select_links(b, mode, rng)
    order = {id(o): k for k, o in enumerate(sort_neighbors(list(nb_toks)))}
    idx = [order[id(o)] for o in nb_toks]
    return p[0, idx], links[0, idx]


def aggregate_comm(policy: Policy, pairs: list[tuple[NeighborObs, CommState]]) -> np.ndarray:
    """e_c for exactly these granted (obs, comm) pairs, farthest first."""
    H = policy.config.lstm_hidden
    if not pairs:
        return np.zeros(H)
    pairs = sorted(pairs, key=lambda pc: (-pc[0].d_a, pc[0].id if pc[0].id is not None else 0))
    nb = np.array([[o.as_array() for o, _ in pairs]])
    comm = np.array([[c.as_array() for _, c in pairs]])
    return policy.aggregate(nb, comm, np.ones((1, len(pairs)))).data[0]


def forward_single(policy: Policy, ego: AgentState, nb_toks: list[NeighborObs],
                   comm_pairs: list[tuple[NeighborObs, CommState]]) -> PolicyOutput:
    """Forward for one agent with fixed link decisions (the ids in ``comm_pairs``)."""
    b = make_batch([ego_input(ego)], [ego_self_obs(ego)], [list(nb_toks)])
    granted = {o.id: c for o, c in comm_pairs}
    b.links = np.array([[1.0 if int(j) in granted else 0.0 for j in b.nb_ids[0]]]) * b.linkable
    b.noise = np.zeros(b.nb.shape[:2] + (2,))
    fill_comm(b, [ego], [granted])
    return policy.forward(b)


def agent_batch(world, ids) -> tuple[ObsBatch, list[AgentState]]:
    """Batch of observations for agents ``ids`` of ``world``."""
    agents = [world.agent(i) for i in ids]
    return (make_batch([ego_input(a) for a in agents], [ego_self_obs(a) for a in agents],
                       [observe(world, i) for i in ids]), agents)


def comm_replies(world, batch: ObsBatch, ids, agents) -> list[dict[int, CommState]]:
    """Run the request-reply exchange for the links on ``batch`` and build comm states."""
    requests = dict(zip(ids, link_requests(batch)))
    replies = exchange(world, requests)
    return [{obs.id: comm_state(a, hid) for obs, hid in replies[i]} for i, a in zip(ids, agents)]
