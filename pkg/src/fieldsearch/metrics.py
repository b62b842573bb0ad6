"""Cell-level precision/recall scoring and the full-coverage baseline planner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Action
from .field_sim import Field

CORNERS = ("NW", "NE", "SW", "SE")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    path_length: int = 0

    @property
    def precision(self) -> float:
        # Vacuous precision (no detections at all) is reported as 1.
        d = self.tp + self.fp
        return self.tp / d if d else 1.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 1.0


def score(found_map: np.ndarray, ground_truth: Field | np.ndarray, path_length: int = 0) -> Metrics:
    found = np.asarray(found_map, dtype=bool)
    gt = ground_truth.occupancy() if isinstance(ground_truth, Field) else np.asarray(ground_truth, dtype=bool)
    if found.shape != gt.shape:
        raise ValueError(f"found map {found.shape} and ground truth {gt.shape} differ in size")
    tp = int(np.sum(found & gt))
    fp = int(np.sum(found & ~gt))
    fn = int(np.sum(~found & gt))
    return Metrics(tp, fp, fn, path_length)


@dataclass(frozen=True)
class CoveragePlan:
    M: int
    N: int
    waypoints: tuple  # FOV-center cells, consecutive ones are 4-neighbours

    @property
    def n_moves(self) -> int:
        return len(self.waypoints) - 1

    def actions(self) -> list[Action]:
        out = []
        for (x0, y0), (x1, y1) in zip(self.waypoints, self.waypoints[1:]):
            out.append({(-1, 0): Action.NORTH, (1, 0): Action.SOUTH,
                        (0, -1): Action.WEST, (0, 1): Action.EAST}[(x1 - x0, y1 - y0)])
        return out


def _row_centers(M: int, N: int) -> list[int]:
    origins = list(range(0, M - N + 1, N))
    if origins[-1] != M - N:
        origins.append(M - N)
    return [o + N // 2 for o in origins]


def coverage_plan(M: int, N: int, start_corner: str = "NW") -> CoveragePlan:
    """Boustrophedon sweep with rows one FOV wide and no overlap.

    Rows run along ``y``; the last row is shifted inward when ``N`` does not
    divide ``M``. Transit between rows is flown cell by cell.
    """
    if N > M:
        raise ValueError(f"FOV N={N} larger than field M={M}")
    if start_corner not in CORNERS:
        raise ValueError(f"start_corner must be one of {CORNERS}")
    rows = _row_centers(M, N)
    lo, hi = N // 2, M - N + N // 2
    cols = list(range(lo, hi + 1))
    if start_corner[0] == "S":
        rows = rows[::-1]
    if start_corner[1] == "E":
        cols = cols[::-1]
    wps = []
    for i, x in enumerate(rows):
        row_cols = cols if i % 2 == 0 else cols[::-1]
        if wps:
            px = wps[-1][0]
            step = 1 if x > px else -1
            wps.extend((xx, row_cols[0]) for xx in range(px + step, x, step))
        wps.extend((x, y) for y in row_cols)
    return CoveragePlan(M, N, tuple(wps))


def coverage_moves_formula(M: int, N: int) -> int:
    rows = _row_centers(M, N)
    return len(rows) * (M - N) + sum(abs(b - a) for a, b in zip(rows, rows[1:]))


def recall_at_steps(trace, ground_truth: Field | np.ndarray, checkpoints) -> list[float]:
    """Recall of detections accumulated within the first ``k`` move actions.

    ``trace`` is a list of step records (dicts or objects) carrying ``moves``
    (cumulative move count) and ``new_found`` (cells first detected at that
    step). Checkpoints past the end of the trace carry the final value.
    """
    gt = ground_truth.occupancy() if isinstance(ground_truth, Field) else np.asarray(ground_truth, dtype=bool)
    total = int(gt.sum())
    events = []
    for rec in trace:
        moves = rec["moves"] if isinstance(rec, dict) else rec.moves
        cells = rec["new_found"] if isinstance(rec, dict) else rec.new_found
        hits = sum(1 for x, y in cells if gt[x, y])
        events.append((moves, hits))
    out = []
    for k in checkpoints:
        tp = sum(h for m, h in events if m <= k)
        out.append(tp / total if total else 1.0)
    return out
