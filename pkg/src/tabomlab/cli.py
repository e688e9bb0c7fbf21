"""Command-line entry point: ``tabomlab <subcommand> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .objectives import OBJECTIVES
from .pipeline import MissingArtifact, Run
from .trajectories import CorpusError

STAGES = ("pretrain", "distill", "finetune", "eval", "tds", "ce-curve", "report")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (defaults are built in)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")
    p.add_argument("--seed", type=int, action="append", help="restrict to this seed; repeatable")
    p.add_argument("--out-dir", help="run directory (overrides TABOM_OUT and experiment.out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tabomlab", description="Masked-diffusion trajectory-ranking laboratory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "eval", "tds", "ce-curve", "ablate", "report", "all"):
        _common(sub.add_parser(name))
    p = sub.add_parser("distill")
    _common(p)
    p.add_argument("--max-new", type=int, help="response length to decode (default: model.max_response_len)")
    p.add_argument("--per-step", type=int, help="positions committed per step (default: decode.per_step)")
    p.add_argument("--model", help="standalone mode: checkpoint to decode with (needs --task and --out)")
    p.add_argument("--task", help="standalone mode: task id")
    p.add_argument("--out", help="standalone mode: corpus path to write")
    p = sub.add_parser("finetune")
    _common(p)
    p.add_argument("--objective", choices=OBJECTIVES, action="append",
                   help="objective to train; repeatable (default: finetune.objectives)")
    p.add_argument("--lambda", dest="weight", type=float, help="ranking weight override")
    p.add_argument("--name", help="checkpoint name (default: objective, suffixed with the weight override)")
    p = sub.add_parser("oracle")
    _common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--entropies", default="random:0", help="comma-separated values or random:SEED")
    p.add_argument("--count", type=int, default=100, help="landscapes to draw in random mode")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        r = Run(cfg, args.out_dir)
        seeds = args.seed or cfg.seeds
        cmd = args.command
        if cmd == "oracle":
            rows = r.oracle(args.n, args.beta, args.entropies, args.count)
            bad = [row for row in rows if not row[-1]]
            print(f"oracle: {len(rows)} landscape(s), {len(bad)} lemma failure(s)")
        elif cmd == "distill" and args.model:
            if not (args.task and args.out):
                raise ConfigError("distill", "--model needs --task and --out")
            s = r.distill_standalone(args.model, args.task, args.out, args.max_new, args.per_step,
                                     (args.seed or cfg.seeds)[0])
            print(f"{args.task}: {s.valid}/{s.generated} valid (yield {s.yield_ratio:.3f})")
            return 0
        elif cmd == "report":
            print(r.report(), end="")
        else:
            for seed in seeds:
                _stage(r, cmd, seed, args)
            if cmd == "all":
                print(r.report(), end="")
        r.manifest()
    except (ConfigError, MissingArtifact, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _stage(r: Run, cmd: str, seed: int, args) -> None:
    if cmd == "all":
        for stage in STAGES[:-1]:
            _stage(r, stage, seed, args)
        return
    if cmd == "pretrain":
        r.pretrain(seed)
    elif cmd == "distill":
        for row in r.distill(seed, getattr(args, "max_new", None), getattr(args, "per_step", None)):
            print(f"seed {seed} {row['task']}: {row['valid']}/{row['generated']} valid")
    elif cmd == "finetune":
        weight = getattr(args, "weight", None)
        for obj in getattr(args, "objective", None) or r.cfg.objectives:
            kw = {} if weight is None else {"weight": weight}
            name = getattr(args, "name", None) or (obj if weight is None else f"{obj}-lambda{weight:g}")
            r.finetune(seed, obj, name=name, **kw)
    elif cmd == "eval":
        r.evaluate(seed)
    elif cmd == "tds":
        for name, v in r.tds(seed).items():
            print(f"seed {seed} {name}: tds {v:.4f}")
    elif cmd == "ce-curve":
        r.ce_curve(seed)
    elif cmd == "ablate":
        r.ablate(seed)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
