"""Bending-angle estimation from boundary-voltage changes.

Channels are ranked by one-way ANOVA F-statistic against the discrete
calibration angles, the top five are kept, and an ordinary least-squares
model maps those voltage changes (against the global reference) to an
angle in degrees.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .fem import MeasurementFrame

N_SELECTED = 5
ANGLE_RANGE_DEG = (0.0, 60.0)
RIDGE = 1e-9  # conditioning only; distinct from the reconstruction lambda


class DegenerateGroupingError(ValueError):
    """ANOVA requires at least two groups with two samples each."""


class RankDeficientError(ValueError):
    """Regression design matrix does not have full column rank."""


@dataclass(frozen=True)
class FeatureSelection:
    scores: np.ndarray    # (M,) F-statistics
    selected: tuple       # channel indices, descending score


@dataclass(frozen=True)
class BendModel:
    selection: FeatureSelection
    coefficients: np.ndarray  # (5,) degrees per mV
    intercept: float          # degrees
    train_angles: tuple       # distinct calibration angles
    n_samples: int
    seed: int = 0

    def predict(self, delta_v_selected: np.ndarray) -> float:
        raw = float(delta_v_selected @ self.coefficients + self.intercept)
        return min(max(raw, ANGLE_RANGE_DEG[0]), ANGLE_RANGE_DEG[1])


def anova_f_scores(X: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """One-way ANOVA F-statistic per channel.

    F = between-group mean square / within-group mean square. Channels with
    zero within-group variance but nonzero between-group variance get the
    largest finite value as a sentinel; all-constant channels get 0.
    """
    X = np.asarray(X, dtype=float)
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < 2:
        raise DegenerateGroupingError("need at least two distinct groups")
    counts = np.array([(groups == g).sum() for g in uniq])
    if np.any(counts < 2):
        raise DegenerateGroupingError("every group needs at least two samples")

    overall = X.mean(axis=0)
    ss_between = np.zeros(X.shape[1])
    ss_within = np.zeros(X.shape[1])
    for g, n_g in zip(uniq, counts):
        sub = X[groups == g]
        gm = sub.mean(axis=0)
        ss_between += n_g * (gm - overall) ** 2
        ss_within += ((sub - gm) ** 2).sum(axis=0)
    ms_between = ss_between / (len(uniq) - 1)
    ms_within = ss_within / (len(X) - len(uniq))

    sentinel = np.finfo(float).max
    with np.errstate(divide="ignore", invalid="ignore"):
        f = ms_between / ms_within
    f = np.where(ms_within == 0.0,
                 np.where(ms_between > 0.0, sentinel, 0.0),
                 f)
    return f


def select_k_best(scores: np.ndarray, k: int = N_SELECTED) -> tuple:
    """Indices of the k largest scores, descending; ties by ascending index."""
    if k > len(scores):
        raise ValueError(f"k = {k} exceeds channel count {len(scores)}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return tuple(order[:k])


def fit_linear(X_selected: np.ndarray, angles: np.ndarray,
               selection: FeatureSelection, seed: int = 0) -> BendModel:
    """Ordinary least squares (normal equations with a tiny ridge)."""
    X_selected = np.asarray(X_selected, dtype=float)
    angles = np.asarray(angles, dtype=float)
    n, k = X_selected.shape
    if n < k + 1:
        raise RankDeficientError(f"need at least {k + 1} samples, got {n}")
    design = np.column_stack([X_selected, np.ones(n)])
    if np.linalg.matrix_rank(design) < k + 1:
        raise RankDeficientError("design matrix is rank deficient")
    gram = design.T @ design + RIDGE * np.eye(k + 1)
    beta = np.linalg.solve(gram, design.T @ angles)
    return BendModel(selection=selection,
                     coefficients=beta[:k],
                     intercept=float(beta[k]),
                     train_angles=tuple(sorted(set(angles.tolist()))),
                     n_samples=n,
                     seed=seed)


def fit_bend_model(delta_v: np.ndarray, angles: np.ndarray,
                   k: int = N_SELECTED, seed: int = 0) -> BendModel:
    """Full calibration: rank channels, keep the top k, fit the line."""
    scores = anova_f_scores(delta_v, angles)
    selected = select_k_best(scores, k)
    selection = FeatureSelection(scores=scores, selected=selected)
    return fit_linear(delta_v[:, selected], angles, selection, seed=seed)


def predict_angle(model: BendModel, frame: MeasurementFrame,
                  global_ref: np.ndarray) -> float:
    """Angle in degrees from one frame, clamped to the calibrated range."""
    dv = frame.voltages - global_ref
    return model.predict(dv[list(model.selection.selected)])


# --- structured-text serialization ---

def bend_model_to_text(model: BendModel) -> str:
    buf = io.StringIO()
    buf.write("EITBEND1\n")
    buf.write("selected: " + " ".join(str(i) for i in model.selection.selected) + "\n")
    buf.write("coefficients: " + " ".join(repr(float(c)) for c in model.coefficients) + "\n")
    buf.write(f"intercept: {model.intercept!r}\n")
    buf.write("train_angles: " + " ".join(repr(a) for a in model.train_angles) + "\n")
    buf.write(f"n_samples: {model.n_samples}\n")
    buf.write(f"seed: {model.seed}\n")
    buf.write("scores: " + " ".join(repr(float(s)) for s in model.selection.scores) + "\n")
    return buf.getvalue()


def bend_model_from_text(text: str) -> BendModel:
    lines = text.splitlines()
    if not lines or lines[0] != "EITBEND1":
        raise ValueError("not an EITBEND1 model file")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    selected = tuple(int(v) for v in fields["selected"].split())
    scores_raw = fields.get("scores", "")
    scores = (np.array([float(v) for v in scores_raw.split()])
              if scores_raw else np.zeros(0))
    selection = FeatureSelection(scores=scores, selected=selected)
    return BendModel(
        selection=selection,
        coefficients=np.array([float(v) for v in fields["coefficients"].split()]),
        intercept=float(fields["intercept"]),
        train_angles=tuple(float(v) for v in fields["train_angles"].split()),
        n_samples=int(fields["n_samples"]),
        seed=int(fields.get("seed", 0)))
