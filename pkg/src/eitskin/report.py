"""Run reports: per-experiment metrics computed from a frame log and the
pipeline results it produced. Regenerating a report from the same log is
byte-identical; wall-clock timings are printed by the CLI, never stored."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

MODALITIES = ("idle", "touch", "bend", "touch+bend")


@dataclass(frozen=True)
class RunReport:
    experiment: str
    seed: int
    config_echo: str
    confusion: np.ndarray          # truth x predicted over MODALITIES
    localization_errors: tuple     # mm, one per matched truth touch
    unmatched_touches: int
    angle_truths: tuple            # degrees, one per bend-truth frame
    angle_errors: tuple            # |predicted - truth| degrees, same order
    n_frames: int


def _touch_errors(truth_touches, points):
    """Greedy nearest matching of truth touches to reported points (mm)."""
    errors = []
    remaining = list(points)
    for t in truth_touches:
        if not remaining:
            errors.append(None)
            continue
        dists = [np.hypot(p.x_mm - t["x"], p.y_mm - t["y"]) for p in remaining]
        k = int(np.argmin(dists))
        errors.append(float(dists[k]))
        remaining.pop(k)
    return errors


def build_report(experiment: str, seed: int, config_echo: str,
                 log, results) -> RunReport:
    """Score pipeline results against the log's ground truth."""
    conf = np.zeros((len(MODALITIES), len(MODALITIES)), dtype=np.int64)
    loc_errors = []
    unmatched = 0
    angle_truths = []
    angle_errors = []
    for entry, result in zip(log, results):
        ti = MODALITIES.index(entry.label)
        pi = MODALITIES.index(result.modality)
        conf[ti, pi] += 1
        touches = entry.truth.get("touches", [])
        if touches:
            errs = _touch_errors(touches, result.touches.points)
            for e in errs:
                if e is None:
                    unmatched += 1
                else:
                    loc_errors.append(e)
        bends = entry.truth.get("bends", [])
        if bends:
            truth_angle = bends[0]["angle"]
            angle_truths.append(float(truth_angle))
            pred = result.bend_angle if result.bend_angle is not None else 0.0
            angle_errors.append(abs(pred - truth_angle))
    return RunReport(experiment=experiment, seed=seed, config_echo=config_echo,
                     confusion=conf,
                     localization_errors=tuple(loc_errors),
                     unmatched_touches=unmatched,
                     angle_truths=tuple(angle_truths),
                     angle_errors=tuple(angle_errors),
                     n_frames=len(results))


def report_to_text(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write("EITREPORT1\n")
    buf.write(f"experiment: {report.experiment}\n")
    buf.write(f"seed: {report.seed}\n")
    buf.write(f"config: {report.config_echo}\n")
    buf.write(f"frames: {report.n_frames}\n")
    buf.write("confusion (rows truth, cols predicted; order "
              + ",".join(MODALITIES) + "):\n")
    for row in report.confusion:
        buf.write("  " + " ".join(f"{v:5d}" for v in row) + "\n")
    if report.localization_errors:
        e = np.array(report.localization_errors)
        buf.write(f"touch_localization_mm: n={len(e)} mean={e.mean():.3f} "
                  f"max={e.max():.3f}\n")
        buf.write("touch_errors_mm: "
                  + " ".join(f"{v:.3f}" for v in report.localization_errors) + "\n")
    else:
        buf.write("touch_localization_mm: n=0\n")
    if report.unmatched_touches:
        buf.write(f"unmatched_touches: {report.unmatched_touches}\n")
    if report.angle_errors:
        e = np.array(report.angle_errors)
        buf.write(f"bend_angle_deg: n={len(e)} mae={e.mean():.3f} "
                  f"max={e.max():.3f}\n")
        per = {}
        for t, err in zip(report.angle_truths, report.angle_errors):
            per.setdefault(t, []).append(err)
        for t in sorted(per):
            vals = np.array(per[t])
            buf.write(f"bend_angle_{t:g}deg: n={len(vals)} "
                      f"mean_err={vals.mean():.3f}\n")
    else:
        buf.write("bend_angle_deg: n=0\n")
    return buf.getvalue()
