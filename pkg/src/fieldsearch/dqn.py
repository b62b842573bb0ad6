"""Deep Q-network: architecture, replay buffer, TD updates, training loop, checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, asdict, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import N_ACTIONS, Action, StateTensor, batch_arrays
from .rollout import SimScenario, run_episode

log = logging.getLogger(__name__)


@dataclass
class NetworkSpec:
    # Kernel counts and sizes are placeholders; only the layer structure is fixed.
    pool_kernel: int = 6
    global_convs: tuple = ((16, 3, 1), (32, 3, 1))
    local_convs: tuple = ((16, 3, 1), (32, 3, 1))
    fc_sizes: tuple = (256, 128, N_ACTIONS)
    conv_pool: bool = True

    def validate(self) -> None:
        if self.fc_sizes[-1] != N_ACTIONS:
            raise ValueError(f"last fc width must be {N_ACTIONS}, got {self.fc_sizes[-1]}")
        if len(self.fc_sizes) != 3:
            raise ValueError("fc_sizes must list exactly three layer widths")
        if self.pool_kernel < 1:
            raise ValueError("pool_kernel must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["global_convs"] = [list(c) for c in self.global_convs]
        d["local_convs"] = [list(c) for c in self.local_convs]
        d["fc_sizes"] = list(self.fc_sizes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["pool_kernel"]), tuple(tuple(c) for c in d["global_convs"]),
                   tuple(tuple(c) for c in d["local_convs"]), tuple(d["fc_sizes"]),
                   bool(d.get("conv_pool", True)))


def _conv_stack(convs, pool: bool) -> nn.Sequential:
    layers, c_in = [], 4
    for i, (c_out, k, stride) in enumerate(convs):
        if i > 0 and pool:
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
        layers += [nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2), nn.ReLU()]
        c_in = c_out
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


class QNetwork(nn.Module):
    """Two conv branches (pooled global map, local map) + battery -> 3 FC layers -> 5 values."""

    def __init__(self, spec: NetworkSpec, M: int, N: int):
        super().__init__()
        spec.validate()
        self.spec, self.M, self.N = spec, M, N
        self.pool = nn.AvgPool2d(spec.pool_kernel, ceil_mode=True)
        self.global_branch = _conv_stack(spec.global_convs, spec.conv_pool)
        self.local_branch = _conv_stack(spec.local_convs, spec.conv_pool)
        with torch.no_grad():
            g = self.global_branch(self.pool(torch.zeros(1, 4, 2 * M - 1, 2 * M - 1)))
            loc = self.local_branch(torch.zeros(1, 4, N, N))
        width = g.shape[1] + loc.shape[1] + 1
        fcs = []
        for i, h in enumerate(spec.fc_sizes):
            fcs.append(nn.Linear(width, h))
            if i < len(spec.fc_sizes) - 1:
                fcs.append(nn.ReLU())
            width = h
        self.head = nn.Sequential(*fcs)

    def forward(self, global_map, local_map, battery):
        M, N = self.M, self.N
        if global_map.shape[1:] != (4, 2 * M - 1, 2 * M - 1) or local_map.shape[1:] != (4, N, N):
            raise ValueError(f"state shapes {tuple(global_map.shape)}, {tuple(local_map.shape)} "
                             f"do not match network for M={M}, N={N}")
        g = self.global_branch(self.pool(global_map))
        loc = self.local_branch(local_map)
        return self.head(torch.cat([g, loc, battery.reshape(-1, 1)], dim=1))


def _tensors(states, dtype=torch.float32):
    if isinstance(states, StateTensor):
        states = [states]
    g, loc, b = batch_arrays(states)
    return torch.as_tensor(g, dtype=dtype), torch.as_tensor(loc, dtype=dtype), torch.as_tensor(b, dtype=dtype)


def q_forward(net: QNetwork, states) -> np.ndarray:
    """Action values, shape ``(batch, 5)``, for one state or a list of states."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return net(*_tensors(states, dtype)).numpy()


def greedy_action(q) -> Action:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return Action(int(np.argmax(np.asarray(q).reshape(-1))))


def act_epsilon_greedy(net: QNetwork, state: StateTensor, eps: float, rng: np.random.Generator) -> Action:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon {eps} outside [0, 1]")
    if eps > 0 and rng.random() < eps:
        return Action(int(rng.integers(N_ACTIONS)))
    return greedy_action(q_forward(net, state)[0])


def dqn_policy(net: QNetwork):
    return lambda env, state: greedy_action(q_forward(net, state)[0])


class ReplayBuffer:
    """FIFO transition store; states are bit-packed to keep large grids affordable."""

    def __init__(self, capacity: int, M: int, N: int):
        self.capacity, self.M, self.N = capacity, M, N
        self._lbits, self._obits = 4 * M * M, N * N
        lb, ob = (self._lbits + 7) // 8, (self._obits + 7) // 8
        self.layers = np.zeros((2, capacity, lb), dtype=np.uint8)
        self.obs = np.zeros((2, capacity, ob), dtype=np.uint8)
        self.pos = np.zeros((2, capacity, 2), dtype=np.int16)
        self.battery = np.zeros((2, capacity), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self.next_idx = 0

    def __len__(self):
        return self.size

    def _put(self, slot: int, i: int, s: StateTensor):
        self.layers[slot, i] = np.packbits(s.layers.reshape(-1))
        self.obs[slot, i] = np.packbits(s.observation.reshape(-1))
        self.pos[slot, i] = s.pos
        self.battery[slot, i] = s.battery_frac

    def add(self, state: StateTensor, action, reward: float, next_state: StateTensor, done: bool):
        i = self.next_idx
        self._put(0, i, state)
        self._put(1, i, next_state)
        self.actions[i] = int(action)
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.next_idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(self.size, size=batch_size)

    def _arrays(self, slot: int, idx: np.ndarray):
        M, N = self.M, self.N
        B = len(idx)
        layers = np.unpackbits(self.layers[slot, idx], axis=1, count=self._lbits).reshape(B, 4, M, M)
        obs = np.unpackbits(self.obs[slot, idx], axis=1, count=self._obits).reshape(B, N, N)
        g = np.zeros((B, 4, 2 * M - 1, 2 * M - 1), dtype=np.float32)
        g[:, 0] = 1.0
        loc = np.empty((B, 4, N, N), dtype=np.float32)
        for b, (px, py) in enumerate(self.pos[slot, idx]):
            ox, oy = M - 1 - px, M - 1 - py
            g[b, :, ox:ox + M, oy:oy + M] = layers[b]
            x0, y0 = px - N // 2, py - N // 2
            loc[b, :3] = layers[b, :3, x0:x0 + N, y0:y0 + N]
        loc[:, 3] = obs
        return g, loc, self.battery[slot, idx].reshape(-1, 1)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = self.sample_indices(batch_size, rng)
        return self.batch(idx)

    def batch(self, idx) -> dict:
        idx = np.asarray(idx)
        return {
            "state": self._arrays(0, idx),
            "action": self.actions[idx],
            "reward": self.rewards[idx],
            "next_state": self._arrays(1, idx),
            "done": self.dones[idx],
        }


def transitions_to_batch(transitions) -> dict:
    """Batch dict from a list of ``(state, action, reward, next_state, done)`` tuples."""
    s, a, r, s2, d = zip(*transitions)
    return {"state": batch_arrays(list(s)), "action": np.asarray([int(x) for x in a]),
            "reward": np.asarray(r, dtype=np.float32), "next_state": batch_arrays(list(s2)),
            "done": np.asarray(d, dtype=np.float32)}


def _as_torch(arrays, dtype):
    return tuple(torch.as_tensor(x, dtype=dtype) for x in arrays)


def td_targets(target_net: QNetwork, batch: dict, gamma: float) -> torch.Tensor:
    """``r + gamma * max_a Q_target(s', a)``, or just ``r`` for terminal transitions."""
    dtype = next(target_net.parameters()).dtype
    r = torch.as_tensor(batch["reward"], dtype=dtype)
    done = torch.as_tensor(batch["done"], dtype=dtype)
    if gamma == 0:
        return r
    with torch.no_grad():
        q_next = target_net(*_as_torch(batch["next_state"], dtype)).max(dim=1).values
    return r + gamma * (1.0 - done) * q_next


def td_loss(net: QNetwork, target_net: QNetwork, batch: dict, gamma: float) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    q = net(*_as_torch(batch["state"], dtype))
    a = torch.as_tensor(batch["action"], dtype=torch.int64)
    q_sa = q.gather(1, a.reshape(-1, 1)).squeeze(1)
    return F.smooth_l1_loss(q_sa, td_targets(target_net, batch, gamma))


def train_step(net: QNetwork, target_net: QNetwork, optimizer: torch.optim.Optimizer, batch: dict,
               gamma: float, grad_clip: float | None = 10.0) -> float:
    """One Huber-loss gradient step on ``batch``; returns the pre-update loss."""
    optimizer.zero_grad()
    loss = td_loss(net, target_net, batch, gamma)
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"FSQN"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    M: int
    N: int
    params: np.ndarray  # flat float32
    manifest: list  # [(name, shape), ...]
    train_step: int = 0
    eval_mean_reward: float | None = None

    @classmethod
    def from_network(cls, net: QNetwork, train_step: int = 0, eval_mean_reward=None) -> "Checkpoint":
        sd = net.state_dict()
        manifest = [(k, list(v.shape)) for k, v in sd.items()]
        flat = np.concatenate([v.detach().cpu().numpy().astype(np.float32).reshape(-1) for v in sd.values()])
        return cls(net.spec, net.M, net.N, flat, manifest, train_step, eval_mean_reward)

    def network(self) -> QNetwork:
        net = QNetwork(self.spec, self.M, self.N)
        sd, off = {}, 0
        for name, shape in self.manifest:
            n = int(np.prod(shape))
            sd[name] = torch.from_numpy(self.params[off:off + n].reshape(shape).copy())
            off += n
        net.load_state_dict(sd)
        return net

    def save(self, path) -> None:
        header = {"version": CHECKPOINT_VERSION, "network": self.spec.to_json(), "M": self.M, "N": self.N,
                  "manifest": [[n, list(s)] for n, s in self.manifest], "train_step": self.train_step,
                  "eval_mean_reward": self.eval_mean_reward}
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
            fh.write(hb)
            fh.write(self.params.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", data[4:12])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[12:12 + hlen])
        params = np.frombuffer(data[12 + hlen:], dtype="<f4").astype(np.float32)
        manifest = [(n, list(s)) for n, s in header["manifest"]]
        expected = sum(int(np.prod(s)) for _, s in manifest)
        if params.size != expected:
            raise ValueError(f"{path}: {params.size} parameters, manifest expects {expected}")
        return cls(NetworkSpec.from_json(header["network"]), header["M"], header["N"], params, manifest,
                   header["train_step"], header["eval_mean_reward"])


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    # Placeholder defaults; the original DQN table is not available.
    n_buffer: int = 100_000
    n_batch: int = 64
    gamma: float = 0.99
    alpha: float = 1e-4
    n_steps: int = 10_000_000
    n_eval: int = 25
    eval_period: int = 10_000
    target_sync_period: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    grad_clip: float = 10.0
    train_freq: int = 1
    warmup_frac: float = 0.5

    def validate(self) -> None:
        if self.n_batch > self.n_buffer:
            raise ValueError("n_batch must not exceed n_buffer")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.train_freq < 1 or self.eval_period < 1 or self.target_sync_period < 1:
            raise ValueError("periods must be >= 1")


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    decay = max(1, int(cfg.eps_decay_frac * cfg.n_steps))
    frac = min(1.0, step / decay)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def make_optimizer(net: QNetwork, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.alpha)
    return torch.optim.SGD(net.parameters(), lr=cfg.alpha, momentum=cfg.momentum)


EVAL_SEED_OFFSET = 10_000_019


def evaluate(net: QNetwork, scenario: SimScenario, seeds) -> float:
    """Mean episode reward of the greedy policy over the given field seeds."""
    rewards = []
    policy = lambda env, state: greedy_action(q_forward(net, state)[0])
    for s in seeds:
        env, state = scenario.episode(s)
        rewards.append(run_episode(env, state, policy, record=False).total_reward)
    return float(np.mean(rewards))


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list = dc_field(default_factory=list)  # (step, mean_eval_reward)
    losses: list = dc_field(default_factory=list)


def train(scenario: SimScenario, spec: NetworkSpec, cfg: TrainConfig, seed: int,
          resume: Checkpoint | None = None, callback=None) -> TrainResult:
    """Train a DQN on freshly sampled fields and keep the best-evaluating weights.

    Gradient updates start once the buffer is ``warmup_frac`` full. Every
    ``eval_period`` environment steps (and at the last step) the greedy policy
    is scored on ``n_eval`` held-out fields.
    """
    cfg.validate()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    M, N = scenario.field.M, scenario.env.N
    net = resume.network() if resume is not None else QNetwork(spec, M, N)
    start = resume.train_step if resume is not None else 0
    initial = Checkpoint.from_network(net, start, resume.eval_mean_reward if resume else None)
    result = TrainResult(initial, initial)
    if cfg.n_steps <= start:
        return result

    target = copy.deepcopy(net)
    opt = make_optimizer(net, cfg)
    buf = ReplayBuffer(cfg.n_buffer, M, N)
    warmup = max(cfg.n_batch, int(math.ceil(cfg.warmup_frac * cfg.n_buffer)))
    eval_seeds = [EVAL_SEED_OFFSET + seed * 1000 + i for i in range(cfg.n_eval)]
    episode_seeds = np.random.SeedSequence(seed)
    best_reward = -math.inf if resume is None or resume.eval_mean_reward is None else resume.eval_mean_reward
    grad_steps = 0

    env, state = scenario.episode(episode_seeds.spawn(1)[0])
    for t in range(start, cfg.n_steps):
        a = act_epsilon_greedy(net, state, epsilon_at(t, cfg), rng)
        res = env.step(a)
        buf.add(state, a, res.reward, res.state, res.done)
        state = res.state
        if res.done:
            env, state = scenario.episode(episode_seeds.spawn(1)[0])

        if len(buf) >= warmup and t % cfg.train_freq == 0:
            batch = buf.sample(cfg.n_batch, rng)
            result.losses.append(train_step(net, target, opt, batch, cfg.gamma, cfg.grad_clip))
            grad_steps += 1
            if grad_steps % cfg.target_sync_period == 0:
                target.load_state_dict(net.state_dict())

        if (t + 1) % cfg.eval_period == 0 or t + 1 == cfg.n_steps:
            mean_r = evaluate(net, scenario, eval_seeds)
            result.log.append((t + 1, mean_r))
            log.info("step %d  eps %.3f  eval reward %.3f", t + 1, epsilon_at(t, cfg), mean_r)
            if mean_r > best_reward:
                best_reward = mean_r
                result.best = Checkpoint.from_network(net, t + 1, mean_r)
            if callback is not None:
                callback(t + 1, mean_r, net)
    result.final = Checkpoint.from_network(net, cfg.n_steps, result.log[-1][1] if result.log else None)
    return result


def write_reward_log(path, rows, append: bool = False) -> None:
    mode = "a" if append and Path(path).exists() else "w"
    with open(path, mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write("step,mean_eval_reward\n")
        for step, r in rows:
            fh.write(f"{step},{r:.6f}\n")


def read_reward_log(path) -> list[tuple[int, float]]:
    lines = Path(path).read_text().splitlines()[1:]
    return [(int(a), float(b)) for a, b in (ln.split(",") for ln in lines if ln)]
