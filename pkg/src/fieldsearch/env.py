"""Grid-world search MDP: drone position, battery, detections and rewards."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from typing import Callable

import numpy as np

from .field_sim import Field, NoiseConfig, observe


class Action(IntEnum):
    NORTH = 0
    SOUTH = 1
    WEST = 2
    EAST = 3
    LAND = 4


ACTION_DELTAS = {
    Action.NORTH: (-1, 0),
    Action.SOUTH: (1, 0),
    Action.WEST: (0, -1),
    Action.EAST: (0, 1),
    Action.LAND: (0, 0),
}

N_ACTIONS = len(Action)


@dataclass
class EnvConfig:
    # Placeholder reward/battery values; the original table is not available.
    N: int = 12
    b_init: float = 1000.0
    b_step: float = 1.0
    r_dt: float = 1.0
    r_step: float = -0.01
    r_nfz: float = -0.5
    r_crash: float = -10.0
    r_nocov: float = -0.05

    def validate(self) -> None:
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.b_init <= 0 or self.b_step <= 0:
            raise ValueError("b_init and b_step must be positive")
        if self.r_dt <= 0:
            raise ValueError("r_dt must be positive")
        for name in ("r_step", "r_nfz", "r_crash", "r_nocov"):
            if getattr(self, name) > 0:
                raise ValueError(f"{name} must be <= 0")


def fov_origin(pos, N: int) -> tuple[int, int]:
    """Top-left FOV cell for a drone at ``pos`` (the FOV center, index N//2)."""
    return int(pos[0]) - N // 2, int(pos[1]) - N // 2


def valid_position(pos, N: int, M: int) -> bool:
    x0, y0 = fov_origin(pos, N)
    return 0 <= x0 <= M - N and 0 <= y0 <= M - N


def border_start_positions(M: int, N: int) -> np.ndarray:
    """All FOV-center cells whose FOV touches the field border."""
    span = M - N
    origins = [(a, b) for a in range(span + 1) for b in range(span + 1)
               if a in (0, span) or b in (0, span)]
    return np.asarray(origins, dtype=np.int64) + N // 2


@dataclass(frozen=True)
class StateTensor:
    """Agent input, stored compactly and expanded on demand.

    ``layers`` holds the ``(4, M, M)`` maps (outside-field, found, coverage,
    prior); ``observation`` is the current ``(N, N)`` detection map.
    """

    layers: np.ndarray
    observation: np.ndarray
    pos: tuple
    battery_frac: float

    @property
    def M(self) -> int:
        return self.layers.shape[1]

    @property
    def N(self) -> int:
        return self.observation.shape[0]

    @property
    def global_map(self) -> np.ndarray:
        """Drone-centered ``(4, 2M-1, 2M-1)`` map; the drone sits at ``(M-1, M-1)``."""
        M = self.M
        canvas = np.zeros((4, 2 * M - 1, 2 * M - 1), dtype=np.float32)
        canvas[0] = 1.0
        ox, oy = M - 1 - self.pos[0], M - 1 - self.pos[1]
        canvas[:, ox:ox + M, oy:oy + M] = self.layers
        return canvas

    @property
    def local_map(self) -> np.ndarray:
        N = self.N
        x0, y0 = fov_origin(self.pos, N)
        local = np.empty((4, N, N), dtype=np.float32)
        local[:3] = self.layers[:3, x0:x0 + N, y0:y0 + N]
        local[3] = self.observation
        return local

    def __eq__(self, other):
        if not isinstance(other, StateTensor):
            return NotImplemented
        return (tuple(self.pos) == tuple(other.pos) and self.battery_frac == other.battery_frac
                and np.array_equal(self.layers, other.layers)
                and np.array_equal(self.observation, other.observation))


def batch_arrays(states: list[StateTensor]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack states into (global, local, battery) float32 arrays."""
    g = np.stack([s.global_map for s in states])
    loc = np.stack([s.local_map for s in states])
    b = np.asarray([[s.battery_frac] for s in states], dtype=np.float32)
    return g, loc, b


@dataclass
class EnvState:
    drone_pos: tuple
    battery: float
    step_count: int
    found_map: np.ndarray
    coverage_map: np.ndarray
    prior_map: np.ndarray
    field: Field
    done: bool = False
    outside: np.ndarray = dc_field(default=None)


@dataclass
class StepInfo:
    newly_found_true_positives: int
    new_cells_covered: int
    attempted_out_of_field: bool
    crashed: bool = False
    new_found_cells: list = dc_field(default_factory=list)


@dataclass
class StepResult:
    state: StateTensor
    reward: float
    done: bool
    info: StepInfo


def build_state(env: EnvState, observation: np.ndarray, b_init: float) -> StateTensor:
    layers = np.stack([env.outside, env.found_map, env.coverage_map, env.prior_map]).astype(np.uint8)
    layers.setflags(write=False)
    obs = np.asarray(observation, dtype=np.uint8)
    obs.setflags(write=False)
    frac = float(np.clip(env.battery / b_init, 0.0, 1.0))
    return StateTensor(layers, obs, tuple(int(v) for v in env.drone_pos), frac)


Observer = Callable[[tuple], np.ndarray]


class SearchEnv:
    """Single-drone search episode over one field.

    ``observer`` maps a FOV origin to an ``(N, N)`` detection mask. By default
    it is the simulated noisy detector; replayed real detections plug in here.
    """

    def __init__(self, config: EnvConfig, noise: NoiseConfig | None = None):
        config.validate()
        self.config = config
        self.noise = noise if noise is not None else NoiseConfig()
        self.state: EnvState | None = None
        self.observer: Observer | None = None
        self._b_init = config.b_init

    def reset(self, field: Field, prior: np.ndarray, seed, start=None,
              observer: Observer | None = None, b_init: float | None = None) -> StateTensor:
        cfg = self.config
        M, N = field.M, cfg.N
        if M < N:
            raise ValueError(f"field size M={M} smaller than FOV N={N}")
        prior = np.asarray(prior, dtype=bool)
        if prior.shape != (M, M):
            raise ValueError(f"prior shape {prior.shape} does not match field size {M}")
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        start_rng, obs_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        if start is None:
            candidates = border_start_positions(M, N)
            start = tuple(int(v) for v in candidates[start_rng.integers(len(candidates))])
        elif not valid_position(start, N, M):
            raise ValueError(f"start {start} puts the FOV outside the field")
        if observer is None:
            noise = self.noise
            observer = lambda origin: observe(field, origin, N, noise, obs_rng)
        self.observer = observer
        self._b_init = cfg.b_init if b_init is None else float(b_init)
        self._gt = field.counts()
        outside = np.zeros((M, M), dtype=bool) if field.region is None else ~field.region
        self.state = EnvState(
            drone_pos=tuple(start), battery=self._b_init, step_count=0,
            found_map=np.zeros((M, M), dtype=bool), coverage_map=np.zeros((M, M), dtype=bool),
            prior_map=prior.copy(), field=field, outside=outside,
        )
        obs = self._observe_and_fold()[0]
        self.initial_found = [tuple(map(int, c)) for c in np.argwhere(self.state.found_map)]
        return build_state(self.state, obs, self._b_init)

    def _observe_and_fold(self):
        s = self.state
        N = self.config.N
        x0, y0 = fov_origin(s.drone_pos, N)
        obs = np.asarray(self.observer((x0, y0)), dtype=bool)
        if obs.shape != (N, N):
            raise ValueError(f"observer returned shape {obs.shape}, expected {(N, N)}")
        found_view = s.found_map[x0:x0 + N, y0:y0 + N]
        newly = obs & ~found_view
        new_cells = np.argwhere(newly) + np.array([x0, y0])
        true_new = int(self._gt[x0:x0 + N, y0:y0 + N][newly].sum())
        found_view |= obs
        cov_view = s.coverage_map[x0:x0 + N, y0:y0 + N]
        new_cov = int((~cov_view).sum())
        cov_view[:] = True
        return obs, true_new, new_cov, [tuple(map(int, c)) for c in new_cells]

    def step(self, action) -> StepResult:
        s = self.state
        if s is None or s.done:
            raise RuntimeError("step() called on a finished or un-reset episode")
        cfg = self.config
        action = Action(int(action))
        M, N = s.field.M, cfg.N
        reward = cfg.r_step
        s.step_count += 1
        s.battery = self._b_init - s.step_count * cfg.b_step

        if action == Action.LAND:
            s.done = True
            obs = np.zeros((N, N), dtype=bool)
            info = StepInfo(0, 0, False)
            return StepResult(build_state(s, obs, self._b_init), reward, True, info)

        dx, dy = ACTION_DELTAS[action]
        target = (s.drone_pos[0] + dx, s.drone_pos[1] + dy)
        wall = not valid_position(target, N, M)
        if wall:
            reward += cfg.r_nfz
        else:
            s.drone_pos = target
        obs, true_new, new_cov, new_cells = self._observe_and_fold()
        reward += cfg.r_dt * true_new
        if new_cov == 0:
            reward += cfg.r_nocov
        crashed = s.battery <= 0
        if crashed:
            reward += cfg.r_crash
            s.done = True
        info = StepInfo(true_new, new_cov, wall, crashed, new_cells)
        return StepResult(build_state(s, obs, self._b_init), reward, s.done, info)
