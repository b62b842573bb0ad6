"""Synthetic stand-ins for real-world dataset bundles.

The bundles mimic the real data layout: a rectangular field smaller than the
square grid, clustered plants measured in UTM, a sparse low-confidence prior
detection set and a dense flight detection set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import DatasetBundle, GridSpec


@dataclass
class BundleSpec:
    M: int = 24
    s_grid: float = 0.5
    psi: float = 0.0
    center: tuple = (500_000.0, 5_760_000.0)
    width_frac: float = 1.0  # east-west extent as a fraction of the grid
    height_frac: float = 0.6
    n_clusters: int = 3
    n_objects: int = 18
    cluster_sigma: float = 1.2  # cells
    prior_recall: float = 0.4
    prior_sigma: float = 0.6  # cells
    prior_fp: int = 6
    flight_recall: float = 0.9
    flight_sigma: float = 0.15
    flight_fp: int = 4


def make_bundle(name: str, spec: BundleSpec, seed) -> DatasetBundle:
    rng = np.random.default_rng(seed)
    s = spec.s_grid
    half_w = spec.width_frac * spec.M * s / 2
    half_h = spec.height_frac * spec.M * s / 2
    cx, cy = spec.center
    inner = 0.85
    centers = np.column_stack([rng.uniform(-inner * half_w, inner * half_w, spec.n_clusters),
                               rng.uniform(-inner * half_h, inner * half_h, spec.n_clusters)])
    pts = []
    while len(pts) < spec.n_objects:
        c = centers[rng.integers(spec.n_clusters)]
        p = c + rng.normal(0.0, spec.cluster_sigma * s, 2)
        if abs(p[0]) < half_w and abs(p[1]) < half_h:
            pts.append(p)
    gt = np.asarray(pts) + [cx, cy]

    def detections(recall, sigma, n_fp, conf_tp, conf_fp):
        hit = rng.random(len(gt)) < recall
        tp = gt[hit] + rng.normal(0.0, sigma * s, (int(hit.sum()), 2))
        fp = np.column_stack([rng.uniform(-half_w, half_w, n_fp), rng.uniform(-half_h, half_h, n_fp)]) + [cx, cy]
        xy = np.vstack([tp, fp])
        conf = np.concatenate([rng.uniform(*conf_tp, len(tp)), rng.uniform(*conf_fp, n_fp)])
        out = np.column_stack([xy, np.round(conf, 3)])
        return out[rng.permutation(len(out))]

    prior = detections(spec.prior_recall, spec.prior_sigma, spec.prior_fp, (0.06, 0.6), (0.01, 0.3))
    flight = detections(spec.flight_recall, spec.flight_sigma, spec.flight_fp, (0.45, 0.99), (0.2, 0.7))
    polygon = [[cx - half_w, cy - half_h], [cx + half_w, cy - half_h],
               [cx + half_w, cy + half_h], [cx - half_w, cy + half_h]]
    grid = GridSpec(cx, cy, spec.psi, s, spec.M)
    return DatasetBundle(name, grid, gt, prior, flight, polygon)


def make_bundles(out_dir, n: int = 4, spec: BundleSpec | None = None, seed: int = 0) -> list:
    """Write ``n`` bundles named ``field_a``, ``field_b`` ... under ``out_dir``."""
    from pathlib import Path

    spec = spec or BundleSpec()
    paths = []
    for i in range(n):
        name = f"field_{chr(ord('a') + i)}"
        bundle = make_bundle(name, spec, np.random.SeedSequence([seed, i]))
        path = Path(out_dir) / name
        bundle.save(path)
        paths.append(path)
    return paths
