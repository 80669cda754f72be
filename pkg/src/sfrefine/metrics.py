"""End-point errors and KITTI-style outlier rates.

A pixel is an outlier for a quantity iff its error is at least 3 px AND at
least 5% of the ground-truth magnitude; SF counts a pixel that is an outlier
in any of D1, D2 or F1.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from sfrefine.fields import SceneFlowState

log = logging.getLogger(__name__)

ABS_THRESHOLD = 3.0
REL_THRESHOLD = 0.05
CSV_HEADER = ("step", "epe_d1", "epe_flow", "epe_c", "d1", "d2", "f1", "sf", "valid_px")


@dataclass
class MetricsReport:
    epe_d1: Optional[float]
    epe_flow: Optional[float]
    epe_dchange: Optional[float]
    epe_d2: Optional[float]  # on d1 + dchange against the warped second-frame disparity
    d1_out: Optional[float]
    d2_out: Optional[float]
    f1_out: Optional[float]
    sf_out: Optional[float]
    valid_px: int


def _error_norm(pred, gt):
    err = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    if err.ndim == 3:
        return np.sqrt((err ** 2).sum(axis=0))
    return np.abs(err)


def _magnitude(gt):
    gt = np.asarray(gt, np.float64)
    return np.sqrt((gt ** 2).sum(axis=0)) if gt.ndim == 3 else np.abs(gt)


def epe(pred, gt, valid=None) -> Optional[float]:
    """Mean end-point error over valid pixels; ``None`` when nothing is valid."""
    e = _error_norm(pred, gt)
    valid = np.ones(e.shape, bool) if valid is None else np.asarray(valid, bool)
    if e.shape != valid.shape:
        raise ValueError(f"epe: extent mismatch {e.shape} vs {valid.shape}")
    if not valid.any():
        return None
    return float(e[valid].mean())


def is_outlier(err, magnitude) -> np.ndarray:
    err = np.asarray(err, np.float64)
    return (err >= ABS_THRESHOLD) & (err >= REL_THRESHOLD * np.asarray(magnitude, np.float64))


def outlier_maps(state: SceneFlowState, gt: SceneFlowState, gt_d2_warped=None):
    """Per-pixel outlier booleans for D1, D2 and F1.

    ``gt_d2_warped`` is the second-frame disparity of each first-frame pixel's
    3-d point; it defaults to ``gt.d1 + gt.dchange``.
    """
    if gt_d2_warped is None:
        gt_d2_warped = gt.d1 + gt.dchange
    d1 = is_outlier(np.abs(state.d1 - gt.d1), np.abs(gt.d1))
    d2 = is_outlier(np.abs(state.d1 + state.dchange - gt_d2_warped), np.abs(gt_d2_warped))
    f1 = is_outlier(_error_norm(state.flow, gt.flow), _magnitude(gt.flow))
    return d1, d2, f1


def outlier_rates(state: SceneFlowState, gt: SceneFlowState, valid=None,
                  gt_d2_warped=None) -> MetricsReport:
    if state.shape != gt.shape:
        raise ValueError(f"outlier_rates: extent mismatch {state.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if gt_d2_warped is None:
        gt_d2_warped = gt.d1 + gt.dchange
    n = int(valid.sum())
    if n == 0:
        log.warning("outlier_rates: no valid pixels")
        return MetricsReport(None, None, None, None, None, None, None, None, 0)
    d1, d2, f1 = outlier_maps(state, gt, gt_d2_warped)
    sf = d1 | d2 | f1
    rate = lambda m: float(m[valid].mean())  # noqa: E731
    return MetricsReport(
        epe_d1=epe(state.d1, gt.d1, valid),
        epe_flow=epe(state.flow, gt.flow, valid),
        epe_dchange=epe(state.dchange, gt.dchange, valid),
        epe_d2=epe(state.d1 + state.dchange, gt_d2_warped, valid),
        d1_out=rate(d1), d2_out=rate(d2), f1_out=rate(f1), sf_out=rate(sf), valid_px=n)


def report_row(step, m: MetricsReport) -> dict:
    return {"step": step, "epe_d1": m.epe_d1, "epe_flow": m.epe_flow, "epe_c": m.epe_dchange,
            "d1": m.d1_out, "d2": m.d2_out, "f1": m.f1_out, "sf": m.sf_out,
            "valid_px": m.valid_px}


def trajectory_report(traj, gt: SceneFlowState, valid=None, gt_d2_warped=None) -> list:
    """One metrics row per refinement step, 0..T."""
    return [report_row(t, outlier_rates(x, gt, valid, gt_d2_warped))
            for t, x in enumerate(traj.states)]


def mean_rows(tables: Sequence[list]) -> list:
    """Average several per-step tables (same length) column by column; pixel counts are summed."""
    out = []
    for rows in zip(*tables):
        row = {"step": rows[0]["step"], "valid_px": sum(r["valid_px"] for r in rows)}
        for key in CSV_HEADER[1:-1]:
            vals = [r[key] for r in rows if r[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        out.append(row)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in CSV_HEADER])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (None if r[k] == "" else (int(r[k]) if k in ("step", "valid_px")
                                                      else float(r[k]))) for k in CSV_HEADER})
        return rows
