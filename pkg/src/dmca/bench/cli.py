"""Command-line experiment runner.

    dmca train --config cfg.yaml --preset dmca
    dmca eval --planner orca --scenario circle --n 10 --trials 20
    dmca eval --planner ckpt --ckpt runs/dmca_800.ckpt --scenario circle --n 4
    dmca replay --log runs/eval/trial_000.jsonl
    dmca baseline --scenario circle
    dmca histogram --logs runs/eval
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..episode import EpisodeLog
from .metrics import comm_histogram, comm_link_census, report_from_logs
from .runner import evaluate, make_planner
from .scenarios import FAMILIES, Scenario


def _write_logs(out: Path, logs):
    out.mkdir(parents=True, exist_ok=True)
    for k, log in enumerate(logs):
        log.write(out / f"trial_{k:03d}.jsonl")


def trajectory_csv(log: EpisodeLog) -> str:
    rows = ["t,agent_id,x,y,psi,status,n_links"]
    for a in log.header["agents"]:
        rows.append(f"0,{a['id']},{a['p'][0]},{a['p'][1]},{a['psi']},active,0")
    rows += [f"{r.t},{r.agent_id},{r.p[0]},{r.p[1]},{r.psi},{r.status},{len(r.links)}" for r in log.records]
    return "\n".join(rows) + "\n"


def cmd_train(args) -> int:
    from ..trainer import PRESETS, TrainConfig, train

    cfg = TrainConfig.read(args.config) if args.config else TrainConfig()
    cfg = replace(cfg, preset=args.preset, lambda_comm=PRESETS[args.preset])
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    elif cfg.out_dir is None:
        cfg = replace(cfg, out_dir=f"runs/{args.preset}")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    res = train(cfg, updates=args.updates)
    summary = {"preset": cfg.preset, "updates": len(res.metrics), "env_steps": res.env_steps,
               "checkpoints": res.checkpoints, "first_success_step": res.first_success_step}
    print(json.dumps(summary, indent=1))
    return 0


def _scenario(args, n=None) -> Scenario:
    return Scenario(args.scenario, n if n is not None else args.n, radius=args.radius, seed=args.seed)


def cmd_eval(args) -> int:
    planner = make_planner(args.planner, args.ckpt, mode=args.mode)
    spec = _scenario(args)
    report, logs = evaluate(planner, spec, args.trials, args.t_max, workers=args.workers)
    title = f"{args.planner} on {spec.family} (n={spec.n_agents}, {args.trials} trials)"
    print(report.table(title))
    if args.json:
        print(report.to_json())
    if args.out:
        out = Path(args.out)
        _write_logs(out, logs)
        (out / "report.json").write_text(report.to_json() + "\n")
        for k, log in enumerate(logs):
            (out / f"trajectory_{k:03d}.csv").write_text(trajectory_csv(log))
    return 0


def cmd_baseline(args) -> int:
    planner = make_planner("orca")
    rows = {}
    for n in args.counts:
        report, _ = evaluate(planner, _scenario(args, n), args.trials, args.t_max, workers=args.workers)
        rows[n] = report
        print(report.table(f"orca on {args.scenario} (n={n}, {args.trials} trials)"))
        print()
    print(json.dumps({str(n): {k: v for k, v in r.to_dict().items() if k != "trials"}
                      for n, r in rows.items()}, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    log = EpisodeLog.read(args.log)
    final = log.final_status()
    goals = log.goal_steps()
    rets = log.returns()
    census = comm_link_census([log])[0]
    print(f"{log.header.get('planner', '?')}: {len(final)} agents, {log.n_steps} steps")
    print("agent  status     goal_step  return    links  broadcast")
    for i in log.agent_ids:
        g = goals.get(i, "-")
        print(f"{i:<6} {final[i]:<10} {g!s:<10} {rets[i]:<9.4f} {census.per_agent[i]:<6} {census.broadcast[i]}")
    report = report_from_logs([log])
    print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(trajectory_csv(log))
    return 0


def cmd_histogram(args) -> int:
    paths = sorted(Path(args.logs).glob("*.jsonl")) if Path(args.logs).is_dir() else [Path(args.logs)]
    logs = [EpisodeLog.read(p) for p in paths if p.name != "metrics.jsonl"]
    if not logs:
        print(f"no episode logs under {args.logs}", file=sys.stderr)
        return 1
    hist = comm_histogram(logs, args.half_width, args.cell)
    occupied = int((hist.count > 0).sum())
    samples = int(hist.count.sum())
    print(f"{len(logs)} logs, {samples} neighbour samples in {occupied} occupied cells")
    csv = hist.to_csv()
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmca", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--preset", choices=["dmca", "dmca-lc"], default="dmca")
    t.add_argument("--out", help="output directory (default runs/<preset>)")
    t.add_argument("--updates", type=int, help="stop after this many updates")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    def scenario_args(p, with_n=True):
        p.add_argument("--scenario", choices=FAMILIES, default="circle")
        if with_n:
            p.add_argument("--n", type=int, default=4)
        p.add_argument("--radius", type=float, default=0.2)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--t-max", type=int, default=500)
        p.add_argument("--workers", type=int, default=1)

    e = sub.add_parser("eval", help="evaluate a planner over seeded trials")
    e.add_argument("--planner", choices=["ckpt", "orca"], required=True)
    e.add_argument("--ckpt", help="policy checkpoint (for --planner ckpt)")
    e.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--out", help="directory for episode logs, trajectories and report.json")
    e.add_argument("--json", action="store_true", help="also print the report as JSON")
    scenario_args(e)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("replay", help="summarise an episode log")
    r.add_argument("--log", required=True)
    r.add_argument("--csv", help="write the trajectory trace here")
    r.set_defaults(fn=cmd_replay)

    b = sub.add_parser("baseline", help="ORCA over several agent counts")
    b.add_argument("--counts", type=int, nargs="+", default=[4, 6, 10])
    b.add_argument("--trials", type=int, default=20)
    scenario_args(b, with_n=False)
    b.set_defaults(fn=cmd_baseline)

    h = sub.add_parser("histogram", help="ego-frame link histogram from episode logs")
    h.add_argument("--logs", required=True, help="directory of episode logs (or one log)")
    h.add_argument("--half-width", type=float, default=4.0)
    h.add_argument("--cell", type=float, default=0.25)
    h.add_argument("--out", help="CSV output path (default stdout)")
    h.set_defaults(fn=cmd_histogram)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
