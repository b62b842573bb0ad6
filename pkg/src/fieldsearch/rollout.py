"""Episode rollouts, traces and the non-learned reference policies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .env import Action, EnvConfig, SearchEnv, StateTensor, StepResult
from .field_sim import Field, FieldConfig, NoiseConfig, generate_field, generate_prior_map
from .metrics import CoveragePlan, score

Policy = Callable[[SearchEnv, StateTensor], Action]


@dataclass
class SimScenario:
    """Everything needed to draw a fresh simulated episode from one seed."""

    field: FieldConfig
    noise: NoiseConfig
    env: EnvConfig

    def make(self, seed) -> tuple[Field, np.ndarray, np.random.SeedSequence]:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        f_ss, p_ss, e_ss = ss.spawn(3)
        fld = generate_field(self.field, f_ss)
        prior = generate_prior_map(fld, self.noise, p_ss)
        return fld, prior, e_ss

    def episode(self, seed) -> tuple[SearchEnv, StateTensor]:
        fld, prior, e_ss = self.make(seed)
        env = SearchEnv(self.env, self.noise)
        state = env.reset(fld, prior, e_ss)
        return env, state


@dataclass
class Episode:
    total_reward: float
    found_map: np.ndarray
    moves: int
    crashed: bool
    trace: list = dc_field(default_factory=list)


def trace_record(step: int, action, pos, reward: float, moves: int, res: StepResult | None,
                 new_found) -> dict:
    rec = {"step": step, "action": None if action is None else Action(action).name,
           "pos": [int(pos[0]), int(pos[1])], "reward": float(reward), "moves": moves,
           "new_found": [list(c) for c in new_found]}
    if res is not None:
        i = res.info
        rec.update(tp=i.newly_found_true_positives, new_cov=i.new_cells_covered,
                   wall=bool(i.attempted_out_of_field), crashed=bool(i.crashed))
    return rec


def run_episode(env: SearchEnv, state: StateTensor, policy: Policy, record: bool = True) -> Episode:
    """Run ``policy`` until the episode ends. ``moves`` counts non-land actions."""
    s = env.state
    trace = []
    if record:
        trace.append(trace_record(0, None, s.drone_pos, 0.0, 0, None, env.initial_found))
    total, moves, res = 0.0, 0, None
    while not s.done:
        a = Action(policy(env, state))
        res = env.step(a)
        total += res.reward
        if a != Action.LAND:
            moves += 1
        state = res.state
        if record:
            trace.append(trace_record(s.step_count, a, s.drone_pos, res.reward, moves, res,
                                      res.info.new_found_cells))
    crashed = bool(res.info.crashed) if res is not None else False
    return Episode(total, s.found_map.copy(), moves, crashed, trace)


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def random_policy(rng: np.random.Generator) -> Policy:
    return lambda env, state: Action(int(rng.integers(5)))


def plan_policy(plan: CoveragePlan) -> Policy:
    """Follow a coverage plan from its first waypoint, then land."""
    actions = plan.actions()
    it = iter(actions)
    return lambda env, state: next(it, Action.LAND)


def greedy_prior_policy(env: SearchEnv, state: StateTensor) -> Action:
    """Fly towards the nearest prior cell not yet covered; land when none is left.

    The FOV center is steered to the reachable position closest to the target
    cell, so targets near the border are seen without hitting the wall.
    """
    s = env.state
    N, M = env.config.N, s.field.M
    todo = np.argwhere(s.prior_map & ~s.coverage_map)
    if not len(todo):
        return Action.LAND
    lo, hi = N // 2, M - N + N // 2
    goals = np.clip(todo, lo, hi)
    pos = np.asarray(s.drone_pos)
    d = np.abs(goals - pos).sum(axis=1)
    gx, gy = goals[int(np.argmin(d))]
    dx, dy = gx - pos[0], gy - pos[1]
    if abs(dx) >= abs(dy) and dx != 0:
        return Action.SOUTH if dx > 0 else Action.NORTH
    if dy != 0:
        return Action.EAST if dy > 0 else Action.WEST
    return Action.LAND


def run_plan(env: SearchEnv, field: Field, prior, plan: CoveragePlan, seed, observer=None) -> Episode:
    """Fly a coverage plan with enough battery to finish it (baseline ignores battery)."""
    budget = (plan.n_moves + 2) * env.config.b_step
    state = env.reset(field, prior, seed, start=plan.waypoints[0], observer=observer,
                      b_init=max(env.config.b_init, budget))
    return run_episode(env, state, plan_policy(plan))


@dataclass(frozen=True)
class PolicyStats:
    mean_reward: float
    mean_recall: float
    mean_moves: float


def policy_stats(scenario: SimScenario, make_policy: Callable[[int], Policy], seeds) -> PolicyStats:
    """Mean reward, recall and move count of a policy over simulated fields.

    ``make_policy(seed)`` builds a fresh policy per field, so stateful or
    random policies stay reproducible.
    """
    rewards, recalls, moves = [], [], []
    for s in seeds:
        env, state = scenario.episode(s)
        ep = run_episode(env, state, make_policy(s), record=False)
        rewards.append(ep.total_reward)
        recalls.append(score(ep.found_map, env.state.field).recall)
        moves.append(ep.moves)
    return PolicyStats(float(np.mean(rewards)), float(np.mean(recalls)), float(np.mean(moves)))
