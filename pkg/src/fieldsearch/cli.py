"""Command-line entry point: ``fieldsearch {gen-field,train,eval,coverage,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, load_config, save_config
from .dqn import Checkpoint, read_reward_log, train, write_reward_log
from .field_sim import generate_field, generate_prior_map, mask_to_json, save_field, write_pgm
from .metrics import CORNERS, coverage_plan

OUT_ENV = "FIELDSEARCH_OUT"
log = logging.getLogger("fieldsearch")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _deterministic(args) -> None:
    import torch

    if getattr(args, "deterministic", False):
        args.jobs = 1
        torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def cmd_gen_field(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    f_ss, p_ss = np.random.SeedSequence(args.seed).spawn(2)
    field = generate_field(cfg.field, f_ss)
    prior = generate_prior_map(field, cfg.noise, p_ss)
    save_field(field, out / "field.json")
    (out / "prior.json").write_text(json.dumps(mask_to_json(prior)))
    write_pgm(out / "field.pgm", field.occupancy())
    write_pgm(out / "prior.pgm", prior)
    print(f"wrote field with {field.n_objects} objects to {out}")
    return 0


def cmd_train(args) -> int:
    _deterministic(args)
    cfg = load_config(args.config)
    out = _out_dir(args)
    save_config(cfg, out / "config.json")
    resume = Checkpoint.load(args.resume) if args.resume else None
    rewards_csv = out / "rewards.csv"

    def progress(step, mean_r, net):
        write_reward_log(rewards_csv, [(step, mean_r)], append=True)

    if resume is None:
        write_reward_log(rewards_csv, [])
    elif not rewards_csv.exists():
        write_reward_log(rewards_csv, [])
    result = train(cfg.scenario(), cfg.network, cfg.train, args.seed, resume=resume, callback=progress)
    result.best.save(out / "checkpoint.fsqn")
    result.final.save(out / "final.fsqn")
    n = len(read_reward_log(rewards_csv))
    print(f"trained to step {result.final.train_step}; best eval reward "
          f"{result.best.eval_mean_reward}; {n} log rows in {rewards_csv}")
    return 0


def cmd_eval(args) -> int:
    _deterministic(args)
    cfg = load_config(args.config)
    if args.n_fields is not None:
        cfg.eval.n_fields = args.n_fields
    if args.seed is not None:
        cfg.eval.seed = args.seed
    checkpoint = None
    if not args.coverage_only:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --coverage-only is given")
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        checkpoint = Checkpoint.load(args.checkpoint)
        if (checkpoint.M, checkpoint.N) != (cfg.field.M, cfg.env.N):
            raise ConfigError(f"checkpoint was trained for M={checkpoint.M}, N={checkpoint.N}; "
                              f"config has M={cfg.field.M}, N={cfg.env.N}")
    out = _out_dir(args)
    rotations = tuple(args.rotations) if args.rotations else None
    if args.level == 1:
        runs = harness.run_level1(checkpoint, cfg, jobs=args.jobs)
    else:
        if not args.datasets:
            raise ConfigError(f"level {args.level} needs --datasets")
        for d in args.datasets:
            if not Path(d).is_dir():
                raise FileNotFoundError(f"dataset bundle not found: {d}")
        runs = harness.run_level(args.level, checkpoint, args.datasets, cfg, rotations, jobs=args.jobs)
        if args.level >= 3 and checkpoint is not None:
            q = harness.prior_quality(args.datasets, cfg, rotations)
            p = harness._mean_std([m.precision for m in q])
            r = harness._mean_std([m.recall for m in q])
            print(f"prior quality: precision {p[0]:.2f} +- {p[1]:.2f}, recall {r[0]:.2f} +- {r[1]:.2f}")
    harness.report(runs, out, cfg.eval.recall_steps)
    print(f"wrote {len(runs)} runs to {out / 'runs.csv'}")
    return 0


def cmd_coverage(args) -> int:
    cfg = load_config(args.config)
    M = args.M if args.M is not None else cfg.field.M
    N = args.N if args.N is not None else cfg.env.N
    plan = coverage_plan(M, N, args.corner)
    out = _out_dir(args)
    doc = {"M": M, "N": N, "start_corner": args.corner, "moves": plan.n_moves,
           "waypoints": [list(w) for w in plan.waypoints]}
    (out / "coverage_plan.json").write_text(json.dumps(doc) + "\n")
    print(f"coverage plan M={M} N={N}: {len(plan.waypoints)} waypoints, {plan.n_moves} moves")
    return 0


def cmd_plot(args) -> int:
    rows = harness.read_runs_csv(args.runs)
    svg = harness.curves_svg(harness.mean_curves(rows))
    target = Path(args.out) if args.out else Path(args.runs).with_name("curves.svg")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(svg)
    print(f"wrote {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldsearch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run-config JSON (defaults used when omitted)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="random seed")

    sp = sub.add_parser("gen-field", help="generate a field and its prior map")
    common(sp)
    sp.set_defaults(func=cmd_gen_field)

    sp = sub.add_parser("train", help="train the DQN agent")
    common(sp)
    sp.add_argument("--resume", help="continue from this checkpoint (appends to rewards.csv)")
    sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    sp.add_argument("--jobs", type=int, default=1, help="unused for training; rollouts are serial")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate at a realism level")
    common(sp, seed=False)
    sp.add_argument("--seed", type=int, default=None, help="base seed (overrides eval.seed)")
    sp.add_argument("--level", type=int, choices=(1, 2, 3, 4), required=True)
    sp.add_argument("--checkpoint", help="trained checkpoint file")
    sp.add_argument("--datasets", nargs="+", help="dataset bundle directories (levels 2-4)")
    sp.add_argument("--rotations", type=float, nargs="+", help="grid rotations in degrees")
    sp.add_argument("--n-fields", type=int, help="number of simulated fields (level 1)")
    sp.add_argument("--coverage-only", action="store_true", help="only run the coverage baseline")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.add_argument("--deterministic", action="store_true", help="force --jobs 1")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("coverage", help="write the full-coverage plan")
    common(sp, seed=False)
    sp.add_argument("--M", type=int, help="field size (default from config)")
    sp.add_argument("--N", type=int, help="FOV size (default from config)")
    sp.add_argument("--corner", choices=CORNERS, default="NW")
    sp.set_defaults(func=cmd_coverage)

    sp = sub.add_parser("plot", help="plot recall-vs-steps curves from a runs CSV")
    sp.add_argument("runs", help="runs.csv written by eval")
    sp.add_argument("--out", help="SVG path (default: curves.svg next to the CSV)")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"fieldsearch: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
