"""Evaluation over the four realism levels, plus report tables and curves.

Level 1 is fully simulated. Levels 2-4 take object positions from a dataset
bundle; level 3 also takes the prior map from recorded prior detections, and
level 4 also replays recorded flight detections instead of simulating them.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dqn import Checkpoint, dqn_policy
from .env import SearchEnv
from .field_sim import Field, cells_to_mask, generate_prior_map
from .geo import (DatasetBundle, GridSpec, build_prior_from_detections, detections_to_obsmap,
                  prior_flight_length, utm_to_grid)
from .metrics import Metrics, coverage_plan, recall_at_steps, score
from .rollout import run_episode, run_plan, write_trace

PLANNERS = ("dqn", "coverage")
RUN_COLUMNS = ("run_id", "level", "planner", "precision", "recall", "path_length",
               "dataset", "seed", "psi_deg", "tp", "fp", "fn", "curve")


class RealismLevel(IntEnum):
    L1 = 1  # simulated objects, prior and detections
    L2 = 2  # real objects
    L3 = 3  # real objects and prior
    L4 = 4  # real objects, prior and detections


@dataclass
class EvalRun:
    run_id: str
    level: int
    planner: str
    dataset: str
    seed: int
    psi_deg: float
    metrics: Metrics
    trace: list = dc_field(default_factory=list)
    gt: np.ndarray | None = None

    def curve(self) -> list[tuple[int, float]]:
        """Recall breakpoints ``(moves, recall)`` where the recall changes."""
        moves = self.trace[-1]["moves"] if self.trace else 0
        steps = list(range(moves + 1))
        values = recall_at_steps(self.trace, self.gt, steps)
        out = [(0, values[0])]
        for k, v in zip(steps[1:], values[1:]):
            if v != out[-1][1]:
                out.append((k, v))
        if out[-1][0] != moves:
            out.append((moves, values[-1]))
        return out


class ReplayObserver:
    """Observation maps built from recorded georeferenced flight detections."""

    def __init__(self, records: np.ndarray, spec: GridSpec, N: int, threshold: float):
        self.records, self.spec, self.N, self.threshold = records, spec, N, threshold

    def __call__(self, origin) -> np.ndarray:
        center = (origin[0] + self.N // 2, origin[1] + self.N // 2)
        return detections_to_obsmap(self.records, center, self.spec, self.N, self.threshold)


def found_from_trace(trace, M: int) -> np.ndarray:
    cells = [c for rec in trace for c in rec["new_found"]]
    return cells_to_mask(cells, M) if cells else np.zeros((M, M), dtype=bool)


def _finish(run_id, level, planner, dataset, seed, psi_deg, field, episode, extra_path=0) -> EvalRun:
    m = score(episode.found_map, field, episode.moves + extra_path)
    return EvalRun(run_id, int(level), planner, dataset, int(seed), float(psi_deg), m,
                   episode.trace, field.occupancy())


def _policy_runs(level, planners, checkpoint, cfg: RunConfig, field, prior, env_ss, observer,
                 dataset, seed, psi_deg, tag, extra_path=0) -> list[EvalRun]:
    runs = []
    for planner in planners:
        env = SearchEnv(cfg.env, cfg.noise)
        rid = f"L{int(level)}-{planner}-{tag}"
        if planner == "dqn":
            net = checkpoint.network()
            state = env.reset(field, prior, env_ss, observer=observer)
            ep = run_episode(env, state, dqn_policy(net))
            runs.append(_finish(rid, level, planner, dataset, seed, psi_deg, field, ep, extra_path))
        else:
            plan = coverage_plan(field.M, cfg.env.N, cfg.eval.coverage_corner)
            ep = run_plan(env, field, prior, plan, env_ss, observer=observer)
            runs.append(_finish(rid, level, planner, dataset, seed, psi_deg, field, ep))
    return runs


def _level1_task(args):
    seed, checkpoint, cfg, planners = args
    field, prior, env_ss = cfg.scenario().make(seed)
    return _policy_runs(RealismLevel.L1, planners, checkpoint, cfg, field, prior, env_ss, None,
                        "", seed, 0.0, f"s{seed:05d}")


def _planners(checkpoint) -> tuple:
    return PLANNERS if checkpoint is not None else ("coverage",)


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def run_level1(checkpoint: Checkpoint | None, cfg: RunConfig, n_fields: int | None = None,
               seeds=None, jobs: int = 1) -> list[EvalRun]:
    """Greedy DQN and coverage baseline on freshly simulated fields.

    Both planners see the same field and draw observation noise from the same
    seed. Without a checkpoint only the coverage baseline runs.
    """
    if seeds is None:
        n = cfg.eval.n_fields if n_fields is None else n_fields
        seeds = [cfg.eval.seed + i for i in range(n)]
    tasks = [(s, checkpoint, cfg, _planners(checkpoint)) for s in seeds]
    return [r for runs in _map(_level1_task, tasks, jobs) for r in runs]


def bundle_field(bundle: DatasetBundle, spec: GridSpec) -> Field:
    """Ground-truth field on the rotated grid; objects off the grid are dropped."""
    cells = utm_to_grid(bundle.ground_truth, spec)
    cells = cells[np.all((cells >= 0) & (cells < spec.M), axis=1)]
    region = bundle.region_mask(spec)
    if region is not None:
        cells = cells[region[cells[:, 0], cells[:, 1]]]
    return Field(spec.M, cells, region)


def _require(level) -> tuple:
    return {2: (), 3: ("prior_detections",), 4: ("prior_detections", "flight_detections")}[int(level)]


def _bundle_task(args):
    level, ds_idx, rot_idx, bundle_path, rot_deg, checkpoint, cfg, planners = args
    require = _require(level) if "dqn" in planners else (("flight_detections",) if level == 4 else ())
    bundle = DatasetBundle.load(bundle_path, require=require)
    spec = bundle.spec.rotated(bundle.spec.psi + math.radians(rot_deg))
    if spec.M != cfg.field.M:
        raise ValueError(f"dataset {bundle.name}: grid M={spec.M} does not match configured M={cfg.field.M}")
    field = bundle_field(bundle, spec)
    seed = cfg.eval.seed
    p_ss, e_ss = np.random.SeedSequence([seed, ds_idx, rot_idx]).spawn(2)
    extra = 0
    if level == 2 or bundle.prior_detections is None:
        prior = generate_prior_map(field, cfg.noise, p_ss)
    else:
        prior = build_prior_from_detections(bundle.prior_detections, spec, cfg.eval.prior_threshold)
        if cfg.eval.include_prior_flight:
            extra = prior_flight_length(spec.M, cfg.eval.N_pk)
    observer = None
    if level == 4:
        observer = ReplayObserver(bundle.flight_detections, spec, cfg.env.N, cfg.eval.obs_threshold)
    tag = f"{bundle.name}-r{int(round(rot_deg)):03d}"
    return _policy_runs(level, planners, checkpoint, cfg, field, prior, e_ss, observer,
                        bundle.name, seed, rot_deg, tag, extra)


def run_level(level, checkpoint: Checkpoint | None, datasets, cfg: RunConfig, rotations=None,
              jobs: int = 1) -> list[EvalRun]:
    """Evaluate on dataset bundles at every grid rotation (degrees).

    Missing bundle files required by the level raise ``FileNotFoundError``
    naming the file.
    """
    level = RealismLevel(int(level))
    if level == RealismLevel.L1:
        raise ValueError("use run_level1 for simulated fields")
    rotations = cfg.eval.rotations_deg if rotations is None else rotations
    planners = _planners(checkpoint)
    for path in datasets:
        # Fail early, before any worker starts.
        DatasetBundle.load(path, require=_require(level) if checkpoint is not None
                           else (("flight_detections",) if level == 4 else ()))
    tasks = [(int(level), i, j, str(p), float(r), checkpoint, cfg, planners)
             for i, p in enumerate(datasets) for j, r in enumerate(rotations)]
    return [r for runs in _map(_bundle_task, tasks, jobs) for r in runs]


def prior_quality(datasets, cfg: RunConfig, rotations=None) -> list[Metrics]:
    """Precision/recall of recorded prior maps against ground truth, per dataset and rotation."""
    rotations = cfg.eval.rotations_deg if rotations is None else rotations
    out = []
    for path in datasets:
        bundle = DatasetBundle.load(path, require=("prior_detections",))
        for rot in rotations:
            spec = bundle.spec.rotated(bundle.spec.psi + math.radians(rot))
            prior = build_prior_from_detections(bundle.prior_detections, spec, cfg.eval.prior_threshold)
            out.append(score(prior, bundle_field(bundle, spec)))
    return out


# -- reporting --------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def format_curve(curve) -> str:
    return " ".join(f"{k}:{v:.6f}" for k, v in curve)


def parse_curve(text: str) -> list[tuple[int, float]]:
    out = []
    for tok in text.split():
        k, v = tok.split(":")
        out.append((int(k), float(v)))
    if not out:
        raise ValueError("empty curve")
    return out


def curve_value(curve, k: int) -> float:
    val = curve[0][1]
    for step, v in curve:
        if step <= k:
            val = v
        else:
            break
    return val


def run_row(run: EvalRun) -> dict:
    m = run.metrics
    return {"run_id": run.run_id, "level": run.level, "planner": run.planner,
            "precision": _fmt(m.precision), "recall": _fmt(m.recall), "path_length": m.path_length,
            "dataset": run.dataset, "seed": run.seed, "psi_deg": f"{run.psi_deg:g}",
            "tp": m.tp, "fp": m.fp, "fn": m.fn, "curve": format_curve(run.curve())}


def write_runs_csv(runs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in runs:
            w.writerow(run_row(r))


def read_runs_csv(path) -> list[dict]:
    """Rows of a runs CSV with numeric fields parsed; raises ``ValueError`` if malformed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in ("level", "planner", "precision", "recall", "path_length", "curve")
                   if c not in cols]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for i, row in enumerate(reader, start=2):
            try:
                row["level"] = int(row["level"])
                row["precision"] = float(row["precision"])
                row["recall"] = float(row["recall"])
                row["path_length"] = int(row["path_length"])
                row["curve"] = parse_curve(row["curve"])
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{i}: malformed row ({e})") from None
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no runs")
    return rows


def _mean_std(values) -> tuple[float, float]:
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def _groups(rows) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["level"], r["planner"]), []).append(r)
    order = {p: i for i, p in enumerate(PLANNERS)}
    return dict(sorted(groups.items(), key=lambda kv: (kv[0][0], order.get(kv[0][1], 99), kv[0][1])))


def _as_rows(runs) -> list[dict]:
    rows = []
    for r in runs:
        if isinstance(r, EvalRun):
            rows.append({"level": r.level, "planner": r.planner, "precision": r.metrics.precision,
                         "recall": r.metrics.recall, "path_length": r.metrics.path_length,
                         "curve": r.curve()})
        else:
            rows.append(r)
    return rows


def recall_table(runs, steps=(200, 400, 600, 800)) -> list[dict]:
    """Mean and std recall after each number of move steps, per level and planner."""
    out = []
    for (level, planner), rows in _groups(_as_rows(runs)).items():
        row = {"level": level, "planner": planner, "n_runs": len(rows)}
        for k in steps:
            row[f"recall@{k}_mean"], row[f"recall@{k}_std"] = _mean_std(curve_value(r["curve"], k) for r in rows)
        out.append(row)
    return out


def summary_table(runs) -> list[dict]:
    out = []
    for (level, planner), rows in _groups(_as_rows(runs)).items():
        row = {"level": level, "planner": planner, "n_runs": len(rows)}
        for key in ("precision", "recall", "path_length"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std(r[key] for r in rows)
        out.append(row)
    return out


def mean_curves(runs) -> dict:
    """Mean recall at every move step, per (level, planner); runs past their end hold their final value."""
    out = {}
    for key, rows in _groups(_as_rows(runs)).items():
        horizon = max(r["curve"][-1][0] for r in rows)
        out[key] = [(k, statistics.fmean(curve_value(r["curve"], k) for r in rows)) for k in range(horizon + 1)]
    return out


def _write_table(rows, path) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def curves_svg(curves: dict, width: int = 640, height: int = 400) -> str:
    """Recall-vs-steps polylines, one per (level, planner), as a standalone SVG."""
    left, right, top, bottom = 60, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom
    horizon = max((c[-1][0] for c in curves.values()), default=1) or 1

    def sx(k):
        return left + pw * k / horizon

    def sy(v):
        return top + ph * (1.0 - v)

    buf = io.StringIO()
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
              f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n')
    buf.write(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>\n')
    for i in range(6):
        v = i / 5
        buf.write(f'<text x="{left - 6}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.1f}</text>\n')
    for i in range(6):
        k = horizon * i / 5
        buf.write(f'<text x="{sx(k):.2f}" y="{top + ph + 16}" text-anchor="middle">{k:.0f}</text>\n')
    buf.write(f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle">flight steps</text>\n')
    buf.write(f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" '
              f'transform="rotate(-90 16 {top + ph / 2:.2f})">recall</text>\n')
    for i, ((level, planner), curve) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        dash = "" if planner == "dqn" else ' stroke-dasharray="5,3"'
        pts = []
        prev = None
        for k, v in curve:
            if prev is not None and v != prev:
                pts.append(f"{sx(k):.2f},{sy(prev):.2f}")
            pts.append(f"{sx(k):.2f},{sy(v):.2f}")
            prev = v
        buf.write(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
                  f'points="{" ".join(pts)}"/>\n')
        ly = top + 14 + 16 * i
        buf.write(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                  f'stroke="{color}" stroke-width="1.5"{dash}/>\n')
        name = "DQN" if planner == "dqn" else "FCov" if planner == "coverage" else planner
        buf.write(f'<text x="{left + pw + 35}" y="{ly}">{name} level {level}</text>\n')
    buf.write("</svg>\n")
    return buf.getvalue()


def report(runs, out_dir, steps=(200, 400, 600, 800), traces: bool = True) -> dict:
    """Write runs, the recall@steps table, the summary, curves and per-run traces."""
    if not runs:
        raise ValueError("report() needs at least one run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_runs_csv(runs, out / "runs.csv")
    table = recall_table(runs, steps)
    summary = summary_table(runs)
    curves = mean_curves(runs)
    _write_table(table, out / "table_recall_at_steps.csv")
    _write_table(summary, out / "summary.csv")
    curve_rows = [{"level": lv, "planner": pl, "step": k, "mean_recall": v}
                  for (lv, pl), c in curves.items() for k, v in c]
    _write_table(curve_rows, out / "curves.csv")
    (out / "curves.svg").write_text(curves_svg(curves))
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for r in runs:
            write_trace(tdir / f"{r.run_id}.jsonl", r.trace)
    return {"recall_table": table, "summary": summary, "curves": curves}
