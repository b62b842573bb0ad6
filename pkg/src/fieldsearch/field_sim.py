"""Synthetic fields with clustered objects and noisy detector/prior maps.

Grid convention used throughout the package: a cell is ``(x, y)`` with ``x``
the row (grows towards grid-south) and ``y`` the column (grows towards
grid-east). Masks are ``(M, M)`` boolean arrays indexed ``mask[x, y]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Placeholder defaults. The original simulation table is not available, so
# these are chosen to give a visually plausible clustered field on 96x96.
DEFAULT_COVARIANCES = (((4.0, 0.0), (0.0, 4.0)), ((16.0, 4.0), (4.0, 9.0)))


@dataclass
class FieldConfig:
    M: int = 96
    n_obj_mean: float = 120.0
    n_obj_std: float = 30.0
    k_mean: float = 6.0
    k_std: float = 2.0
    cov_choices: tuple = DEFAULT_COVARIANCES

    def validate(self, fov_size: int | None = None) -> None:
        if self.M < 1:
            raise ValueError(f"M must be positive, got {self.M}")
        if fov_size is not None and self.M < 2 * fov_size:
            raise ValueError(f"M={self.M} must be at least 2*N={2 * fov_size}")
        if self.n_obj_std < 0 or self.k_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if not self.cov_choices:
            raise ValueError("cov_choices must not be empty")
        for cov in self.cov_choices:
            c = np.asarray(cov, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T):
                raise ValueError(f"covariance {cov!r} is not a symmetric 2x2 matrix")
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError(f"covariance {cov!r} is not positive definite")


@dataclass
class NoiseConfig:
    p_dt_fp: float = 0.001
    p_dt_fn: float = 0.1
    p_pk_fp: float = 0.005
    p_pk_fn: float = 0.5
    p_shift: float = 0.2
    shift_radius: int = 2

    def validate(self) -> None:
        for name in ("p_dt_fp", "p_dt_fn", "p_pk_fp", "p_pk_fn", "p_shift"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.shift_radius < 1:
            raise ValueError("shift_radius must be >= 1")

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 1)


@dataclass
class Field:
    """Ground truth: object cells (a multiset) on an ``M x M`` grid.

    ``region`` optionally marks which cells belong to the physical field; it is
    only used for non-square real fields embedded in the square grid.
    """

    M: int
    objects: np.ndarray  # (n, 2) int, one row per object
    region: np.ndarray | None = None

    def __post_init__(self):
        self.objects = np.asarray(self.objects, dtype=np.int64).reshape(-1, 2)
        if self.objects.size and (self.objects.min() < 0 or self.objects.max() >= self.M):
            raise ValueError("object coordinates outside [0, M)")
        if self.region is not None:
            self.region = np.asarray(self.region, dtype=bool)
            if self.region.shape != (self.M, self.M):
                raise ValueError("region mask has wrong shape")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def counts(self) -> np.ndarray:
        """Number of objects per cell as an ``(M, M)`` int array."""
        c = np.zeros((self.M, self.M), dtype=np.int64)
        np.add.at(c, (self.objects[:, 0], self.objects[:, 1]), 1)
        return c

    def occupancy(self) -> np.ndarray:
        return self.counts() > 0

    def to_json(self) -> dict:
        d = {"M": int(self.M), "objects": self.objects.tolist()}
        if self.region is not None:
            d["region"] = np.argwhere(self.region).tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Field":
        region = None
        if "region" in d:
            region = cells_to_mask(d["region"], d["M"])
        return cls(int(d["M"]), np.asarray(d["objects"], dtype=np.int64).reshape(-1, 2), region)

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        same_region = (self.region is None and other.region is None) or (
            self.region is not None and other.region is not None
            and np.array_equal(self.region, other.region)
        )
        return self.M == other.M and np.array_equal(self.objects, other.objects) and same_region


def cells_to_mask(cells, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    mask[cells[:, 0], cells[:, 1]] = True
    return mask


def mask_to_json(mask: np.ndarray) -> dict:
    return {"size": int(mask.shape[0]), "cells": np.argwhere(mask).tolist()}


def mask_from_json(d: dict) -> np.ndarray:
    return cells_to_mask(d["cells"], d["size"])


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary mask as an 8-bit P5 PGM (object cells white)."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    raster = np.frombuffer(parts[4], dtype=np.uint8, count=w * h)
    return raster.reshape(h, w) > 127


def save_field(field: Field, path) -> None:
    Path(path).write_text(json.dumps(field.to_json()))


def load_field(path) -> Field:
    return Field.from_json(json.loads(Path(path).read_text()))


def generate_field(config: FieldConfig, seed) -> Field:
    """Sample a field with objects drawn from a mixture of Gaussian clusters.

    Samples falling outside the grid after rounding are redrawn from the same
    cluster, so clusters near the border are truncated rather than squashed.
    """
    rng = np.random.default_rng(seed)
    M = config.M
    n_obj = max(0, int(np.rint(rng.normal(config.n_obj_mean, config.n_obj_std))))
    k = max(1, int(np.rint(rng.normal(config.k_mean, config.k_std))))
    means = rng.uniform(-0.5, M - 0.5, size=(k, 2))
    covs = np.asarray(config.cov_choices, dtype=float)
    cov_idx = rng.integers(len(covs), size=k)
    chols = np.linalg.cholesky(covs[cov_idx])
    assign = rng.integers(k, size=n_obj)

    objects = np.empty((n_obj, 2), dtype=np.int64)
    pending = np.arange(n_obj)
    while pending.size:
        c = assign[pending]
        z = rng.standard_normal((pending.size, 2))
        pts = means[c] + np.einsum("nij,nj->ni", chols[c], z)
        cells = np.floor(pts + 0.5).astype(np.int64)
        ok = np.all((cells >= 0) & (cells < M), axis=1)
        objects[pending[ok]] = cells[ok]
        pending = pending[~ok]
    return Field(M, objects)


def _random_offsets(rng: np.random.Generator, n: int, radius: int) -> np.ndarray:
    # Uniform over the (2r+1)^2 - 1 non-zero offsets.
    side = 2 * radius + 1
    idx = rng.integers(side * side - 1, size=n)
    idx = idx + (idx >= (side * side) // 2)
    return np.stack([idx // side - radius, idx % side - radius], axis=1)


def _shift(rng: np.random.Generator, cells: np.ndarray, noise: NoiseConfig, size: int) -> np.ndarray:
    if not len(cells):
        return cells
    moved = rng.random(len(cells)) < noise.p_shift
    offsets = _random_offsets(rng, len(cells), noise.shift_radius)
    out = cells.copy()
    out[moved] = np.clip(cells[moved] + offsets[moved], 0, size - 1)
    return out


def generate_prior_map(field: Field, noise: NoiseConfig, seed) -> np.ndarray:
    """Noisy ``(M, M)`` prior-knowledge mask, sampled once per episode."""
    rng = np.random.default_rng(seed)
    M = field.M
    cells = np.argwhere(field.occupancy())
    keep = rng.random(len(cells)) >= noise.p_pk_fn
    cells = _shift(rng, cells[keep], noise, M)
    prior = cells_to_mask(cells, M)
    prior |= rng.random((M, M)) < noise.p_pk_fp
    return prior


def fov_bounds(origin, N: int, M: int) -> None:
    x0, y0 = origin
    if not (0 <= x0 <= M - N and 0 <= y0 <= M - N):
        raise ValueError(f"FOV at origin {tuple(origin)} with N={N} leaves the {M}x{M} field")


def observe(field: Field, fov_origin, N: int, noise: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """One noisy ``(N, N)`` detection map for the FOV whose top-left cell is ``fov_origin``.

    Every call draws fresh noise from ``rng``: objects are dropped with
    ``p_dt_fn``, survivors shifted with ``p_shift`` (clamped to the FOV) and
    each cell independently fires a false positive with ``p_dt_fp``.
    """
    fov_bounds(fov_origin, N, field.M)
    x0, y0 = int(fov_origin[0]), int(fov_origin[1])
    obj = field.objects
    inside = (obj[:, 0] >= x0) & (obj[:, 0] < x0 + N) & (obj[:, 1] >= y0) & (obj[:, 1] < y0 + N)
    local = obj[inside] - np.array([x0, y0])
    local = local[rng.random(len(local)) >= noise.p_dt_fn]
    local = _shift(rng, local, noise, N)
    obs = cells_to_mask(local, N)
    obs |= rng.random((N, N)) < noise.p_dt_fp
    return obs
