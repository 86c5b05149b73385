"""Episode runner and trial evaluation for learned and ORCA planners."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ..episode import EpisodeLog, StepRecord, agent_header
from ..orca import ORCAPlanner
from ..policy import Policy, agent_batch, comm_replies, fill_comm
from ..sim import World, WorldConfig, observe, step
from .metrics import MetricsReport, report_from_logs
from .scenarios import Scenario, gen_scenario


@dataclass
class PolicyPlanner:
    """Decentralised execution of a shared policy: every agent decides from its own view.

    ``mode`` is "greedy" (argmax actions, p_link >= 0.5) or "sample".
    """
    policy: Policy
    mode: str = "greedy"
    name: str = "dmca"

    def plan(self, world: World, rng=None):
        ids = world.active_ids()
        if not ids:
            return {}, {}
        batch, agents = agent_batch(world, ids)
        self.policy.select_links(batch, self.mode, rng)
        fill_comm(batch, agents, comm_replies(world, batch, ids, agents))
        out = self.policy.forward(batch)
        _, actions = self.policy.act(out, self.mode, rng, agents)
        links = {i: [int(j) for j, l in zip(batch.nb_ids[b], batch.links[b]) if l > 0.5]
                 for b, i in enumerate(ids)}
        return dict(zip(ids, actions)), links


def make_planner(kind: str, ckpt=None, mode: str = "greedy", **kw):
    """``kind`` is "orca" or "ckpt" (a saved policy at ``ckpt``)."""
    if kind == "orca":
        return ORCAPlanner(**kw)
    if kind == "ckpt":
        if ckpt is None:
            raise ValueError("planner 'ckpt' needs a checkpoint path")
        return PolicyPlanner(Policy.load(ckpt), mode=mode, **kw)
    raise ValueError(f"unknown planner {kind!r}; expected 'ckpt' or 'orca'")


def _nbr_entries(world: World, i: int, links: list[int]) -> list[list]:
    granted = set(links)
    return [[o.id, o.p_rel.x, o.p_rel.y, int(o.id in granted)]
            for o in sorted(observe(world, i), key=lambda o: o.id) if o.id >= 0]


def run_episode(world: World, planner, rng=None, meta: dict | None = None) -> EpisodeLog:
    """Step ``world`` (in place) until done, logging every active agent at every step."""
    header = {**(meta or {}), "planner": getattr(planner, "name", type(planner).__name__),
              "dt": world.config.dt, "t_max": world.config.t_max,
              "lambda_comm": world.config.lambda_comm,
              "agents": [agent_header(a) for a in world.agents],
              "obstacles": [{"id": o.id, "center": list(o.center.astuple()), "radius": o.radius}
                            for o in world.obstacles]}
    log = EpisodeLog(header)
    while not world.is_done():
        actions, links = planner.plan(world, rng)
        nbrs = {i: _nbr_entries(world, i, links.get(i, [])) for i in actions}
        out = step(world, actions, links)
        for i, act in actions.items():
            a = world.agent(i)
            log.records.append(StepRecord(
                t=world.t, agent_id=i, p=a.p.astuple(), v=a.v.astuple(), psi=a.psi,
                action=(act.speed, act.psi_cmd), reward=out.rewards[i], links=list(links.get(i, [])),
                status=world.status[i].value, d_min=out.events[i].d_min, nbrs=nbrs[i]))
    return log


def run_trial(planner, spec: Scenario, seed: int, config: WorldConfig) -> EpisodeLog:
    trial = spec.with_seed(seed)
    world = gen_scenario(trial, config)
    meta = {"seed": seed, "scenario": trial.to_dict()}
    return run_episode(world, planner, np.random.default_rng(seed), meta)


def _run_trial_args(args):
    return run_trial(*args)


def evaluate(planner, spec: Scenario, trials: int = 20, t_max: int = 500,
             config: WorldConfig | None = None, workers: int = 1) -> tuple[MetricsReport, list[EpisodeLog]]:
    """Run ``trials`` episodes with seeds spec.seed, spec.seed + 1, ... and aggregate them."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    config = replace(config or WorldConfig(), t_max=t_max)
    jobs = [(planner, spec, spec.seed + k, config) for k in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_run_trial_args, jobs))
    else:
        logs = [run_trial(*j) for j in jobs]
    return report_from_logs(logs, config.dt), logs
