"""Train on the desk-scale field and compare against random and greedy-prior policies.

    python3 scripts/train_tiny.py --config configs/tiny.json --out runs/tiny
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np
import torch

from fieldsearch.config import load_config, save_config
from fieldsearch.dqn import dqn_policy, train, write_reward_log
from fieldsearch.metrics import coverage_plan
from fieldsearch.rollout import greedy_prior_policy, policy_stats, random_policy

HELDOUT_SEED = 700_000


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/tiny.json")
    ap.add_argument("--out", default="runs/tiny")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-steps", type=int, default=None)
    ap.add_argument("--n-fields", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    if args.n_steps is not None:
        cfg.train.n_steps = args.n_steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    scen = cfg.scenario()
    t0 = time.time()
    res = train(scen, cfg.network, cfg.train, seed=args.seed)
    res.best.save(out / "checkpoint.fsqn")
    write_reward_log(out / "rewards.csv", res.log)
    print(f"trained {cfg.train.n_steps} steps in {time.time() - t0:.0f} s, "
          f"best eval {res.best.eval_mean_reward:.3f} at step {res.best.train_step}")

    seeds = [HELDOUT_SEED + i for i in range(args.n_fields)]
    net = res.best.network()
    dqn = policy_stats(scen, lambda s: dqn_policy(net), seeds)
    rnd = policy_stats(scen, lambda s: random_policy(np.random.default_rng(s)), seeds)
    greedy = policy_stats(scen, lambda s: greedy_prior_policy, seeds)
    limit = 0.6 * coverage_plan(cfg.field.M, cfg.env.N).n_moves
    for name, st in (("dqn", dqn), ("random", rnd), ("greedy-prior", greedy)):
        print(f"{name:13s} reward {st.mean_reward:7.3f}  recall {st.mean_recall:.3f}  moves {st.mean_moves:6.1f}")
    target = rnd.mean_reward + 0.5 * (greedy.mean_reward - rnd.mean_reward)
    print(f"reward target {target:.3f}, path limit {limit:.1f} moves")


if __name__ == "__main__":
    main()
