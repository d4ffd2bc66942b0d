"""Detection scoring against ground-truth fruit centers, plus the
frame-count / resolution sweep experiment.

Matching is greedy globally-nearest: the closest unmatched (prediction,
ground truth) pair within the match radius is paired first, repeatedly;
leftovers are false positives / false negatives. Optimal (Hungarian)
assignment is available as a config toggle. Precision, recall, and F1 are
computed from the raw matched counts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

SWEEP_CSV_COLUMNS = ("frames", "resolution", "count", "gt", "precision", "recall", "f1")


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    matches: list  # (pred_index, gt_index, distance)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matches": [[int(p), int(g), float(d)] for p, g, d in self.matches],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metrics_from_counts(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def report_from_counts(tp, fp, fn, matches=None) -> EvalReport:
    p, r, f1 = metrics_from_counts(tp, fp, fn)
    return EvalReport(tp, fp, fn, p, r, f1, matches or [])


def match(pred_centers, gt_centers, tau, optimal=False) -> EvalReport:
    """Score predicted centers against ground truth at match radius tau."""
    if tau <= 0:
        raise ValueError("match radius must be positive")
    pred = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    np_, ng = len(pred), len(gt)
    if np_ == 0 or ng == 0:
        return report_from_counts(0, np_, ng)
    dist = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    matches = []
    if optimal:
        big = (tau + 1.0) * (min(np_, ng) + 2.0)
        cost = np.where(dist <= tau, dist, big)
        rows, cols = linear_sum_assignment(cost)
        for p, g in zip(rows, cols):
            if dist[p, g] <= tau:
                matches.append((int(p), int(g), float(dist[p, g])))
    else:
        order = np.argsort(dist, axis=None, kind="stable")
        used_p = np.zeros(np_, dtype=bool)
        used_g = np.zeros(ng, dtype=bool)
        for flat in order:
            p, g = divmod(int(flat), ng)
            if dist[p, g] > tau:
                break
            if used_p[p] or used_g[g]:
                continue
            used_p[p] = used_g[g] = True
            matches.append((p, g, float(dist[p, g])))
    tp = len(matches)
    return report_from_counts(tp, np_ - tp, ng - tp, matches)


@dataclass
class SweepConfig:
    """Everything a sweep cell needs besides the scene itself."""

    train: object  # train.TrainConfig template (iterations etc.)
    export: object  # export.ExportConfig template
    count: object  # count.CountConfig
    grid_resolution: object = 128  # int or (3,) per-axis
    grid_bounds: object = None  # None -> unit cube
    camera_radius: float = 1.05
    focal_factor: float = 1.2
    camera_seed: int = 1
    elevation_deg: tuple = (2.0, 72.0)
    render_steps: int = 256
    match_radius: float | None = None  # default: count.template_radius
    optimal_assignment: bool = False


def frame_sweep(scene, frame_counts, resolutions, config: SweepConfig,
                csv_path=None, progress=None):
    """Train an independent field per (frames, resolution) cell and count.

    Counting parameters are held constant across cells. Camera sampling is
    prefix-stable, so every cell at one resolution reuses the renders of the
    largest frame count. Per-cell failures are recorded (NaN metrics) and the
    sweep continues. Returns a list of row dicts in SWEEP_CSV_COLUMNS order.
    """
    from . import count as count_mod
    from . import export as export_mod
    from . import field as field_mod
    from . import scenegen
    from . import train as train_mod

    frame_counts = list(frame_counts)
    if frame_counts != sorted(frame_counts):
        raise ValueError("frame counts must be sorted ascending")
    gt = scene.fruit_centers
    tau = config.match_radius if config.match_radius is not None else config.count.template_radius
    rows = []
    for resolution in resolutions:
        cams = scenegen.sample_hemisphere_cameras(
            max(frame_counts), config.camera_radius, scene.spec.crown_center,
            config.camera_seed, width=resolution, height=resolution,
            focal_px=config.focal_factor * resolution, elevation_deg=config.elevation_deg,
        )
        frames = [scenegen.render_frame(scene, cam, steps=config.render_steps) for cam in cams]
        for n in frame_counts:
            row = {"frames": n, "resolution": resolution, "gt": len(gt),
                   "count": math.nan, "precision": math.nan, "recall": math.nan,
                   "f1": math.nan, "error": ""}
            try:
                bounds = config.grid_bounds
                if bounds is None:
                    bounds = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
                grid = field_mod.init_grid(config.grid_resolution, bounds=bounds)
                trained, _ = train_mod.train(frames[:n], config.train, grid=grid)
                cloud = export_mod.sample_volume(trained, config.export)
                report = count_mod.count(cloud, config.count)
                ev = match(report.centers, gt, tau, config.optimal_assignment)
                row.update(count=report.total, precision=ev.precision,
                           recall=ev.recall, f1=ev.f1)
            except Exception as exc:  # record and continue
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if progress is not None:
                progress(row)
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in SWEEP_CSV_COLUMNS])
