"""Command-line entry point: gen, train, eval, plan, render, stats.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
Every subcommand accepts ``--config FILE``; keys in that JSON file override
the corresponding flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .evaluation import AGENT_KINDS, actions_from_dict, evaluate, make_agent, plan, plan_to_dict, render
from .instances import GeneratorConfig, dataset_stats, generate_dataset, load_instance, load_split
from .network import ArchConfig, load_checkpoint
from .replay import ReplayConfig
from .search import SearchConfig
from .trainer import CRITIC_TARGETS, MODES, RunConfig, TrainConfig, checkpoint_select, train

log = logging.getLogger("rearrange")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        a = int(lo)
        b = int(hi) if sep else a
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}") from None
    if a > b:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rearrange", description="Scene rearrangement planning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", type=Path, help="JSON file whose keys override flags")

    g = sub.add_parser("gen", help="generate a dataset of rooms and scrambled layouts")
    common(g)
    g.add_argument("--rooms", type=int, default=100)
    g.add_argument("--grid", type=int, default=64)
    g.add_argument("--objects", type=_range, default=(1, 20))
    g.add_argument("--count-mean", type=float, default=None)
    g.add_argument("--sides", type=_range, default=(1, 6))
    g.add_argument("--pillars", type=int, default=0)
    g.add_argument("--walk-rounds", type=int, default=1000)
    g.add_argument("--out", type=Path, default=Path("dataset"))

    t = sub.add_parser("train", help="train an agent")
    common(t)
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out", type=Path, default=Path("runs/latest"))
    t.add_argument("--mode", choices=MODES, default="pearl")
    t.add_argument("--episodes", type=int, default=1000)
    t.add_argument("--workers", type=int, default=8)
    t.add_argument("--parallel", action="store_true", help="play episodes in worker processes")
    t.add_argument("--rounds", type=int, default=50, help="search simulations per decision")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--k-max", type=int, default=25)
    t.add_argument("--fc", type=int, default=128)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--critic-target", choices=CRITIC_TARGETS, default="return",
                   help="critic regression target in the expert modes")

    e = sub.add_parser("eval", help="evaluate an agent on a dataset split")
    common(e)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--agent", choices=AGENT_KINDS, default="expert")
    e.add_argument("--rounds", type=int, default=50)
    e.add_argument("--step-limit", type=int, default=200)
    e.add_argument("--out", type=Path, help="CSV report path")

    pl = sub.add_parser("plan", help="plan a single instance")
    common(pl)
    pl.add_argument("--instance", type=Path, required=True)
    pl.add_argument("--checkpoint", type=Path)
    pl.add_argument("--agent", choices=AGENT_KINDS, default="expert")
    pl.add_argument("--rounds", type=int, default=50)
    pl.add_argument("--step-limit", type=int, default=200)
    pl.add_argument("--out", type=Path, help="plan JSON path")

    r = sub.add_parser("render", help="render a plan as image frames")
    common(r)
    r.add_argument("--instance", type=Path, required=True)
    r.add_argument("--plan", type=Path, help="plan JSON; omitted renders the initial layout")
    r.add_argument("--out", type=Path, default=Path("frames"))
    r.add_argument("--scale", type=int, default=8)
    r.add_argument("--ascii", action="store_true")

    s = sub.add_parser("stats", help="object-count statistics of instance files")
    common(s)
    s.add_argument("paths", nargs="*", type=Path)
    s.add_argument("--dataset", type=Path)
    return p


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None) is None:
        return args
    try:
        doc = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in doc.items():
        setattr(args, key.replace("-", "_"), value)
    return args


def _load_params(path: Path | None):
    if path is None:
        return None, None
    params, arch, _ = load_checkpoint(path)
    return params, arch


def cmd_gen(args) -> int:
    lo, hi = args.objects
    slo, shi = args.sides
    cfg = GeneratorConfig(grid_size=args.grid, min_objects=lo, max_objects=hi, count_mean=args.count_mean,
                          min_side=slo, max_side=shi, pillars=args.pillars,
                          walk_rounds=args.walk_rounds, seed=args.seed)
    train_paths, test_paths = generate_dataset(cfg, args.rooms, args.out)
    print(f"wrote {len(train_paths)} train / {len(test_paths)} test instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = load_split(args.dataset, "train")
    out = Path(args.out)
    if args.episodes == 0:
        rc = RunConfig(mode=args.mode, episodes=0, seed=args.seed)
        train(rc, data, out)
        print(f"no episodes requested; wrote empty metrics to {out / 'metrics.csv'}")
        return 0
    if not data:
        raise RuntimeError(f"no training instances under {args.dataset / 'train'}")
    grid = data[0][1].grid_size
    k_needed = max(inst.num_objects for _, inst, _ in data)
    if k_needed > args.k_max:
        raise UsageError(f"dataset has {k_needed} objects per room but --k-max is {args.k_max}")
    rc = RunConfig(
        mode=args.mode, episodes=args.episodes, workers=args.workers, serial=not args.parallel,
        eval_every=args.eval_every, seed=args.seed,
        arch=ArchConfig(grid_size=grid, k_max=args.k_max, fc_width=args.fc),
        search=SearchConfig(rounds=args.rounds),
        train=TrainConfig(lr=args.lr, batch=args.batch, critic_target=args.critic_target),
        replay=ReplayConfig(),
    )
    if getattr(args, "run_config", None):
        rc = RunConfig.from_dict({**rc.to_dict(), **args.run_config})
    test = load_split(args.dataset, "test")
    evaluate_fn = None
    if rc.eval_every and test:
        def apprentice_sr(params):
            rep = evaluate(make_agent("apprentice", params, rc.arch), test, rc.test_step_limit)
            return rep.sr, rep.length
        evaluate_fn = apprentice_sr
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(rc.to_dict(), indent=1) + "\n")
    res = train(rc, data, out, evaluate_fn=evaluate_fn)
    last = res.metrics[-1]
    print(f"trained {len(res.metrics)} episodes: rolling SR {last['SR_rolling']:.3f}, "
          f"rolling Length {last['Length_rolling']:.1f}")
    if res.checkpoints and all("SR" in c for c in res.checkpoints):
        best = res.checkpoints[checkpoint_select(res.checkpoints)]
        print(f"best checkpoint: {best.get('path')} (SR {best['SR']:.3f}, Length {best['Length']:.1f})")
    return 0


def cmd_eval(args) -> int:
    params, arch = _load_params(args.checkpoint)
    if args.agent == "apprentice" and params is None:
        raise UsageError("--agent apprentice requires --checkpoint")
    instances = load_split(args.dataset, args.split)
    agent = make_agent(args.agent, params, arch, SearchConfig(rounds=args.rounds), seed=args.seed)
    report = evaluate(agent, instances, args.step_limit)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(f"{args.agent}: {report.instances} instances, SR {report.sr:.3f}, Length {report.length:.1f}")
    return 0


def cmd_plan(args) -> int:
    params, arch = _load_params(args.checkpoint)
    if args.agent == "apprentice" and params is None:
        raise UsageError("--agent apprentice requires --checkpoint")
    inst, initial = load_instance(args.instance)
    agent = make_agent(args.agent, params, arch, SearchConfig(rounds=args.rounds), seed=args.seed)
    result = plan(agent, inst, initial, args.step_limit)
    doc = json.dumps(plan_to_dict(result), indent=1)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    print(f"success={result.success} length={result.length} reward={result.reward:g}")
    return 0


def cmd_render(args) -> int:
    inst, initial = load_instance(args.instance)
    actions = actions_from_dict(json.loads(Path(args.plan).read_text())) if args.plan else []
    frames = render(inst, initial, actions, args.out, scale=args.scale, ascii=args.ascii)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_stats(args) -> int:
    paths = list(args.paths)
    if args.dataset:
        paths += sorted(Path(args.dataset).glob("**/*.json"))
    st = dataset_stats(paths)
    print(json.dumps({"instances": st.count, "mean_objects": st.mean,
                      "histogram": {str(k): v for k, v in st.histogram.items()}}))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "plan": cmd_plan,
            "render": cmd_render, "stats": cmd_stats}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser.parse_args(argv))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit status 2
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
