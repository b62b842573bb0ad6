"""Conversions between UTM coordinates, image pixels and the search grid.

Grid frame: ``x`` points to grid-south and ``y`` to grid-east; with no rotation
one cell step in ``+y`` is ``s_grid`` metres East and one step in ``+x`` is
``s_grid`` metres South. ``psi`` rotates the grid counter-clockwise from North.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

OBS_CONFIDENCE = 0.5
PRIOR_CONFIDENCE = 0.05


@dataclass(frozen=True)
class GridSpec:
    center_x: float
    center_y: float
    psi: float
    s_grid: float
    M: int

    def __post_init__(self):
        if self.s_grid <= 0:
            raise ValueError("s_grid must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    def rotated(self, psi: float) -> "GridSpec":
        return replace(self, psi=psi)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        if "center" in d:
            cx, cy = d["center"]
        else:
            cx, cy = d["center_x"], d["center_y"]
        return cls(float(cx), float(cy), float(d["psi"]), float(d["s_grid"]), int(d["M"]))


@dataclass(frozen=True)
class DetectionRecord:
    x: float
    y: float
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ImageSpec:
    width: int = 2048
    height: int = 2048


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=float) + 0.5).astype(np.int64)


def utm_to_grid_float(points, spec: GridSpec) -> np.ndarray:
    """Unrounded grid coordinates for an ``(n, 2)`` array of (easting, northing)."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    a = -(p[:, 1] - spec.center_y) / spec.s_grid
    b = (p[:, 0] - spec.center_x) / spec.s_grid
    c, s = np.cos(spec.psi), np.sin(spec.psi)
    half = (spec.M - 1) / 2.0
    return np.stack([c * a - s * b + half, s * a + c * b + half], axis=1)


def utm_to_grid(points, spec: GridSpec) -> np.ndarray:
    """Grid cells (rounded to nearest) for UTM points; may fall outside ``[0, M)``."""
    return round_half_up(utm_to_grid_float(points, spec))


def grid_to_utm(cells, spec: GridSpec) -> np.ndarray:
    """UTM (easting, northing) of cell centers; exact inverse of the forward map."""
    g = np.asarray(cells, dtype=float).reshape(-1, 2) - (spec.M - 1) / 2.0
    c, s = np.cos(spec.psi), np.sin(spec.psi)
    a = c * g[:, 0] + s * g[:, 1]
    b = -s * g[:, 0] + c * g[:, 1]
    return np.stack([spec.center_x + b * spec.s_grid, spec.center_y - a * spec.s_grid], axis=1)


def pixel_to_obs(pixels, image: ImageSpec, N: int) -> np.ndarray:
    """Observation-map cells for image pixel coordinates ``(x_img, y_img)``.

    The image row becomes the map row. Results are clamped to ``[0, N-1]``
    because rounding the last pixels can otherwise yield ``N``.
    """
    p = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rows = round_half_up(N / image.height * p[:, 1])
    cols = round_half_up(N / image.width * p[:, 0])
    return np.clip(np.stack([rows, cols], axis=1), 0, N - 1)


def _records_array(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return records.reshape(-1, 3).astype(float)
    return np.asarray([(r.x, r.y, r.confidence) for r in records], dtype=float).reshape(-1, 3)


def detections_to_obsmap(records, drone_cell, spec: GridSpec, N: int,
                         threshold: float = OBS_CONFIDENCE) -> np.ndarray:
    """``(N, N)`` observation mask from georeferenced detections around ``drone_cell``.

    Detections with confidence below ``threshold`` are discarded. The drone
    cell is the FOV center, at local index ``N // 2``.
    """
    rec = _records_array(records)
    obs = np.zeros((N, N), dtype=bool)
    rec = rec[rec[:, 2] >= threshold]
    if not len(rec):
        return obs
    cells = utm_to_grid(rec[:, :2], spec) - (np.asarray(drone_cell, dtype=np.int64) - N // 2)
    inside = np.all((cells >= 0) & (cells < N), axis=1)
    cells = cells[inside]
    obs[cells[:, 0], cells[:, 1]] = True
    return obs


def build_prior_from_detections(records, spec: GridSpec, threshold: float = PRIOR_CONFIDENCE) -> np.ndarray:
    """``(M, M)`` prior mask from detections with confidence strictly above ``threshold``."""
    rec = _records_array(records)
    M = spec.M
    prior = np.zeros((M, M), dtype=bool)
    rec = rec[rec[:, 2] > threshold]
    cells = utm_to_grid(rec[:, :2], spec)
    cells = cells[np.all((cells >= 0) & (cells < M), axis=1)]
    prior[cells[:, 0], cells[:, 1]] = True
    return prior


def _axis_positions(M: int, n: int) -> list[int]:
    origins = list(range(0, M - n + 1, n))
    if origins[-1] != M - n:
        origins.append(M - n)
    return [o + n // 2 for o in origins]


def plan_prior_flight(M: int, N_pk: int) -> list[tuple[int, int]]:
    """Lawnmower waypoints (FOV centers) of the high-altitude prior flight.

    When ``N_pk`` does not divide ``M`` the last row/column is shifted inward.
    """
    if not 1 <= N_pk <= M:
        raise ValueError(f"N_pk={N_pk} must be in [1, M={M}]")
    pos = _axis_positions(M, N_pk)
    out = []
    for i, x in enumerate(pos):
        cols = pos if i % 2 == 0 else pos[::-1]
        out.extend((x, y) for y in cols)
    return out


def prior_flight_length(M: int, N_pk: int) -> int:
    wp = np.asarray(plan_prior_flight(M, N_pk))
    return int(np.abs(np.diff(wp, axis=0)).sum())


# -- dataset bundles ---------------------------------------------------------

@dataclass
class DatasetBundle:
    """A real-world dataset: ground truth, detections and its grid georeference."""

    name: str
    spec: GridSpec
    ground_truth: np.ndarray  # (n, 2) easting, northing
    prior_detections: np.ndarray | None  # (n, 3) easting, northing, confidence
    flight_detections: np.ndarray | None
    field_polygon: list | None = None

    @classmethod
    def load(cls, path, require=()) -> "DatasetBundle":
        path = Path(path)
        gs_path = path / "gridspec.json"
        if not gs_path.exists():
            raise FileNotFoundError(f"dataset bundle {path}: missing gridspec.json")
        meta = json.loads(gs_path.read_text())
        files = {"ground_truth": "ground_truth.csv", "prior_detections": "prior_detections.csv",
                 "flight_detections": "flight_detections.csv"}
        for key in require:
            if not (path / files[key]).exists():
                raise FileNotFoundError(f"dataset bundle {path}: missing {files[key]}")
        if not (path / files["ground_truth"]).exists():
            raise FileNotFoundError(f"dataset bundle {path}: missing ground_truth.csv")
        gt = read_csv_points(path / files["ground_truth"], ("utm_x", "utm_y"))
        prior = flight = None
        if (path / files["prior_detections"]).exists():
            prior = read_csv_points(path / files["prior_detections"], ("utm_x", "utm_y", "confidence"))
        if (path / files["flight_detections"]).exists():
            flight = read_csv_points(path / files["flight_detections"], ("utm_x", "utm_y", "confidence"))
        return cls(path.name, GridSpec.from_json(meta), gt, prior, flight, meta.get("field_polygon"))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = self.spec.to_json()
        if self.field_polygon is not None:
            meta["field_polygon"] = self.field_polygon
        (path / "gridspec.json").write_text(json.dumps(meta, indent=2) + "\n")
        write_csv_points(path / "ground_truth.csv", ("utm_x", "utm_y"), self.ground_truth)
        if self.prior_detections is not None:
            write_csv_points(path / "prior_detections.csv", ("utm_x", "utm_y", "confidence"),
                             self.prior_detections)
        if self.flight_detections is not None:
            write_csv_points(path / "flight_detections.csv", ("utm_x", "utm_y", "confidence"),
                             self.flight_detections)

    def region_mask(self, spec: GridSpec) -> np.ndarray | None:
        """Cells whose centers fall inside the field polygon (None if no polygon)."""
        if self.field_polygon is None:
            return None
        from shapely import contains_xy
        from shapely.geometry import Polygon

        M = spec.M
        cells = np.argwhere(np.ones((M, M), dtype=bool))
        utm = grid_to_utm(cells, spec)
        inside = contains_xy(Polygon(self.field_polygon), utm[:, 0], utm[:, 1])
        return inside.reshape(M, M)


def read_csv_points(path, columns) -> np.ndarray:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = [[float(row[c]) for c in columns] for row in reader]
    return np.asarray(rows, dtype=float).reshape(-1, len(columns))


def write_csv_points(path, columns, data) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in np.asarray(data, dtype=float).reshape(-1, len(columns)):
            w.writerow([repr(float(v)) for v in row])
