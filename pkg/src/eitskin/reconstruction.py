"""One-step regularized reconstruction, rasterization, and touch localization.

The solver computes conductivity changes from boundary-voltage changes in a
single linear step, delta_sigma = (J^T J + lambda^2 R)^-1 J^T delta_V, with
the sensitivity-weighted diagonal prior R. Element values are sampled onto a
96x96 raster consumed by the classifier and the touch localizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.ndimage

from .fem import Mesh, MeasurementFrame, RegularizerMatrix, SensitivityMatrix

RASTER_SIZE = 96
DEFAULT_LAMBDA = 0.2
BINARIZE_THRESHOLD = 0.5
MIN_COMPONENT_PIXELS = 5

# Relative floor applied to the regularizer diagonal before inverting the
# normal matrix. Fields stagnate at the domain's right-angle corners, so
# diag(J^T J) spans ~4 orders of magnitude there; flooring the bottom few
# percent bounds the sensitivity compensation and keeps corner elements
# from dominating reconstructed images.
NOSER_FLOOR_REL = 1e-2

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


class NotPositiveDefiniteError(RuntimeError):
    """Regularized normal matrix failed its SPD factorization."""


@dataclass(frozen=True)
class ReconstructionImage:
    """Element-wise conductivity change and its raster view."""

    delta_sigma: np.ndarray  # (N,) S/m
    raster: np.ndarray       # (96, 96); row 0 is the y = height edge
    frame_id: int = 0
    reference_kind: str = "global"  # which reference the difference used
    width: float = 150.0     # domain extent the raster spans, mm
    height: float = 60.0


@dataclass(frozen=True)
class TouchPoint:
    x_mm: float
    y_mm: float
    intensity: float  # integrated normalized intensity over the component


@dataclass(frozen=True)
class TouchReport:
    """Up to two localized touch centroids, strongest first."""

    points: tuple  # of TouchPoint

    @property
    def count(self) -> int:
        return len(self.points)


def build_raster_map(mesh: Mesh, size: int = RASTER_SIZE) -> np.ndarray:
    """Map each raster pixel center to the element containing it.

    The rectangular domain fills the square raster anisotropically
    (x scaled by size/width, y by size/height); row 0 corresponds to the
    top edge y = height. Returns an int array of shape (size, size).
    """
    xs = (np.arange(size) + 0.5) * mesh.width / size
    ys = mesh.height - (np.arange(size) + 0.5) * mesh.height / size
    pix_x, pix_y = np.meshgrid(xs, ys)  # (size, size), row-major top-down

    raster_map = np.full((size, size), -1, dtype=np.int64)
    pts = mesh.nodes[mesh.elements]  # (N, 3, 2)
    eps = 1e-9 * max(mesh.width, mesh.height)

    for e in range(mesh.n_elements):
        (x1, y1), (x2, y2), (x3, y3) = pts[e]
        xmin, xmax = min(x1, x2, x3), max(x1, x2, x3)
        ymin, ymax = min(y1, y2, y3), max(y1, y2, y3)
        ci = np.nonzero((xs >= xmin - eps) & (xs <= xmax + eps))[0]
        ri = np.nonzero((ys >= ymin - eps) & (ys <= ymax + eps))[0]
        if len(ci) == 0 or len(ri) == 0:
            continue
        px = pix_x[np.ix_(ri, ci)]
        py = pix_y[np.ix_(ri, ci)]
        # barycentric sign tests against each edge (elements are CCW)
        d1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        d2 = (x3 - x2) * (py - y2) - (y3 - y2) * (px - x2)
        d3 = (x1 - x3) * (py - y3) - (y1 - y3) * (px - x3)
        inside = (d1 >= -eps) & (d2 >= -eps) & (d3 >= -eps)
        sub = raster_map[np.ix_(ri, ci)]
        sub[inside & (sub < 0)] = e
        raster_map[np.ix_(ri, ci)] = sub

    if np.any(raster_map < 0):
        missing = int(np.sum(raster_map < 0))
        raise ValueError(f"raster map incomplete: {missing} pixels unassigned")
    return raster_map


@dataclass(frozen=True)
class Reconstructor:
    """Precomputed one-step inverse operator B = (J^T J + lambda^2 R)^-1 J^T."""

    B: np.ndarray          # (N, M)
    lam: float
    mesh: Mesh
    raster_map: np.ndarray

    @property
    def n_measurements(self) -> int:
        return self.B.shape[1]


def floored_regularizer_diagonal(reg: RegularizerMatrix,
                                 floor_rel: float = NOSER_FLOOR_REL) -> np.ndarray:
    """Regularizer diagonal with entries below floor_rel * max raised to it."""
    diag = reg.diagonal
    top = diag.max() if len(diag) else 0.0
    if top > 0:
        diag = np.maximum(diag, floor_rel * top)
    return diag


def build_reconstructor(sens: SensitivityMatrix,
                        lam: float = DEFAULT_LAMBDA,
                        reg: RegularizerMatrix | None = None,
                        mesh: Mesh | None = None,
                        raster_map: np.ndarray | None = None,
                        noser_floor_rel: float = NOSER_FLOOR_REL) -> Reconstructor:
    """Factor the regularized normal matrix once and precompute B.

    The regularizer diagonal is floored at noser_floor_rel * max(diag)
    before inversion. Uses a symmetric positive-definite (Cholesky)
    factorization; raises NotPositiveDefiniteError with the smallest
    eigenvalue if that fails.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    J = sens.J
    if reg is None:
        from .fem import noser_regularizer
        reg = noser_regularizer(sens)
    if len(reg.diagonal) != J.shape[1]:
        raise ValueError("regularizer size does not match Jacobian columns")

    diag = floored_regularizer_diagonal(reg, noser_floor_rel)
    normal = J.T @ J + (lam * lam) * np.diag(diag)
    try:
        chol = scipy.linalg.cho_factor(normal, lower=True)
    except np.linalg.LinAlgError as exc:
        smallest = float(np.linalg.eigvalsh(normal)[0])
        raise NotPositiveDefiniteError(
            f"regularized normal matrix not positive definite "
            f"(smallest pivot {smallest:.3e})") from exc
    B = scipy.linalg.cho_solve(chol, J.T)

    if mesh is not None and raster_map is None:
        raster_map = build_raster_map(mesh)
    return Reconstructor(B=B, lam=float(lam), mesh=mesh, raster_map=raster_map)


def reconstruct(rec: Reconstructor, frame: MeasurementFrame,
                reference: np.ndarray,
                reference_kind: str = "global") -> ReconstructionImage:
    """One-step solve of the conductivity change for one frame."""
    v = frame.voltages
    if len(v) != rec.n_measurements or len(reference) != rec.n_measurements:
        raise ValueError(
            f"frame/reference length must be {rec.n_measurements}, "
            f"got {len(v)}/{len(reference)}")
    delta_sigma = rec.B @ (v - reference)
    raster = (delta_sigma[rec.raster_map]
              if rec.raster_map is not None
              else np.zeros((RASTER_SIZE, RASTER_SIZE)))
    width = rec.mesh.width if rec.mesh is not None else 150.0
    height = rec.mesh.height if rec.mesh is not None else 60.0
    return ReconstructionImage(delta_sigma=delta_sigma, raster=raster,
                               frame_id=frame.frame_id,
                               reference_kind=reference_kind,
                               width=width, height=height)


def threshold_nonnegative(img: ReconstructionImage) -> ReconstructionImage:
    """Copy of the image with all negative values clipped to zero."""
    return ReconstructionImage(
        delta_sigma=np.maximum(img.delta_sigma, 0.0),
        raster=np.maximum(img.raster, 0.0),
        frame_id=img.frame_id,
        reference_kind=img.reference_kind,
        width=img.width, height=img.height)


def normalize_raster(raster: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; an all-constant raster maps to zeros."""
    lo = raster.min()
    hi = raster.max()
    if hi == lo:
        return np.zeros_like(raster, dtype=float)
    return (raster - lo) / (hi - lo)


def normalize_and_binarize(img: ReconstructionImage | np.ndarray,
                           threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    """Min-max normalize then cut at `threshold`; returns a {0,1} float raster."""
    raster = img.raster if isinstance(img, ReconstructionImage) else img
    norm = normalize_raster(raster)
    return (norm >= threshold).astype(float)


def localize_touches(img: ReconstructionImage, max_points: int = 2,
                     min_pixels: int = MIN_COMPONENT_PIXELS) -> TouchReport:
    """Centroid report of the strongest binarized components.

    Binarizes the raster, labels 4-connected components, discards those
    smaller than `min_pixels`, ranks the rest by integrated normalized
    intensity (ties: earlier scan-order label), and returns the
    intensity-weighted centroids of the top `max_points`, mapped to mm.
    """
    norm = normalize_raster(img.raster)
    binary = norm >= BINARIZE_THRESHOLD
    labels, n_labels = scipy.ndimage.label(binary, structure=FOUR_CONNECTED)
    if n_labels == 0:
        return TouchReport(points=())

    size_r, size_c = img.raster.shape
    candidates = []
    for lab in range(1, n_labels + 1):
        mask = labels == lab
        npix = int(mask.sum())
        if npix < min_pixels:
            continue
        intensity = float(norm[mask].sum())
        candidates.append((lab, intensity, mask))
    candidates.sort(key=lambda t: (-t[1], t[0]))

    points = []
    for lab, intensity, mask in candidates[:max_points]:
        rr, cc = np.nonzero(mask)
        w = norm[rr, cc]
        wsum = w.sum()
        col = float((cc * w).sum() / wsum)
        row = float((rr * w).sum() / wsum)
        x = (col + 0.5) * img.width / size_c
        y = img.height - (row + 0.5) * img.height / size_r
        points.append(TouchPoint(x_mm=x, y_mm=y, intensity=intensity))
    return TouchReport(points=tuple(points))


# --- raster and report export ---

def raster_to_pgm(raster: np.ndarray) -> bytes:
    """16-bit binary PGM (big-endian per the netpbm standard), row-major
    with the top row being the y = height edge; values min-max scaled to
    0..65535 (an all-constant raster maps to zeros)."""
    norm = normalize_raster(raster)
    data = np.round(norm * 65535.0).astype(">u2")
    header = f"P5\n{raster.shape[1]} {raster.shape[0]}\n65535\n".encode("ascii")
    return header + data.tobytes()


def raster_to_csv(raster: np.ndarray) -> str:
    """96 rows x 96 columns of full-precision values."""
    lines = [",".join(repr(float(v)) for v in row) for row in raster]
    return "\n".join(lines) + "\n"


def touch_report_line(report: TouchReport) -> str:
    """One-line structured-text record: count and per-point x/y/intensity."""
    parts = [f"count={report.count}"]
    for i, p in enumerate(report.points):
        parts.append(f"p{i}=({p.x_mm!r},{p.y_mm!r},{p.intensity!r})")
    return " ".join(parts)
