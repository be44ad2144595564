"""2-D finite-element forward model for the rectangular tactile sensor.

Builds the sensor mesh and electrode layout, assembles the complete
electrode model (CEM), solves for boundary voltages under a measurement
protocol, and computes the voltage-vs-conductivity sensitivity matrix
together with its sensitivity-weighted diagonal regularizer.

Unit conventions used throughout the package: lengths in mm, conductivity
in S/m, current in mA, voltage in mV, contact impedance in Ohm*mm^2.
Contact impedance is interpreted relative to the background conductivity
(effective contact conductance = sigma0 / z), which makes the whole system
exactly 1-homogeneous in conductivity.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SENSOR_WIDTH_MM = 150.0
SENSOR_HEIGHT_MM = 60.0
DEFAULT_ELEM_SIZE_MM = 5.0
DEFAULT_ELECTRODE_COUNT = 8
DEFAULT_ELECTRODE_WIDTH_MM = 5.0
DEFAULT_CONTACT_IMPEDANCE = 100.0  # Ohm*mm^2 at unit background conductivity
DEFAULT_SIGMA0 = 1.0               # S/m
DEFAULT_CURRENT_MA = 1.0
DEFAULT_FREQUENCY_KHZ = 40.0       # metadata only; real-valued DC-equivalent model


class MeshError(ValueError):
    """Invalid mesh construction or electrode placement."""


class SolverError(RuntimeError):
    """Forward linear solve failed (singular or non-finite system)."""


@dataclass(frozen=True)
class Mesh:
    """Structured triangulation of the rectangular sensor domain."""

    nodes: np.ndarray          # (n_nodes, 2) mm
    elements: np.ndarray       # (N, 3) node indices, CCW
    element_areas: np.ndarray  # (N,) mm^2
    width: float
    height: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def element_centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @property
    def perimeter(self) -> float:
        return 2.0 * (self.width + self.height)


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrodes as snapped boundary-edge groups with nominal arc centers."""

    centers: np.ndarray            # (E,) nominal arc-length centers, mm
    segments: np.ndarray           # (E, 2) snapped (start, end) arc intervals, mm
    edge_nodes: tuple              # per electrode: tuple of (node_a, node_b) boundary edges
    contact_impedance: np.ndarray  # (E,) Ohm*mm^2
    electrode_width: float

    @property
    def n_electrodes(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class MeasurementProtocol:
    """Tetrapolar drive/measure schedule; measurements are flattened per drive."""

    drive_pairs: tuple             # ((a, b), ...)
    measure_pairs: tuple           # per drive: ((c, d), ...)
    n_electrodes: int
    excitation_current: float = DEFAULT_CURRENT_MA
    excitation_frequency_khz: float = DEFAULT_FREQUENCY_KHZ
    scheme: str = "adjacent"

    @property
    def n_measurements(self) -> int:
        return sum(len(m) for m in self.measure_pairs)

    def flat_measurements(self):
        """Yield (drive_pair, measure_pair) in protocol order."""
        for drive, measures in zip(self.drive_pairs, self.measure_pairs):
            for meas in measures:
                yield drive, meas


@dataclass(frozen=True)
class ConductivityField:
    """Per-element conductivity plus the scalar background it perturbs."""

    sigma: np.ndarray  # (N,) S/m, strictly positive
    sigma0: float

    def __post_init__(self):
        if np.any(self.sigma <= 0.0):
            raise ValueError("conductivity must be strictly positive element-wise")
        if self.sigma0 <= 0.0:
            raise ValueError("background conductivity must be positive")


@dataclass(frozen=True)
class MeasurementFrame:
    """One acquisition sweep of boundary voltages."""

    voltages: np.ndarray  # (M,) mV
    frame_id: int = 0
    timestamp_ms: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.voltages)):
            raise ValueError("frame voltages must be finite")


@dataclass(frozen=True)
class SensitivityMatrix:
    """Jacobian of boundary voltages w.r.t. element conductivities at sigma0."""

    J: np.ndarray  # (M, N) mV per S/m
    sigma0: float

    @property
    def shape(self):
        return self.J.shape


@dataclass(frozen=True)
class RegularizerMatrix:
    """Diagonal regularizer R = diag(J^T J), stored as its diagonal."""

    diagonal: np.ndarray  # (N,)


def build_rect_mesh(width: float = SENSOR_WIDTH_MM,
                    height: float = SENSOR_HEIGHT_MM,
                    target_elem_size: float = DEFAULT_ELEM_SIZE_MM) -> Mesh:
    """Triangulate the rectangle [0,width]x[0,height] on a structured grid.

    Each grid cell is split into two triangles; the split diagonal
    alternates in a checkerboard pattern so meshes with even cell counts
    are mirror symmetric about both midlines.
    """
    if width <= 0 or height <= 0 or target_elem_size <= 0:
        raise MeshError("width, height and target_elem_size must be positive")
    if target_elem_size > min(width, height) / 2.0:
        raise MeshError(
            f"target_elem_size {target_elem_size} too coarse for a "
            f"{width}x{height} domain (must be <= min(width, height)/2)")

    nx = max(1, round(width / target_elem_size))
    ny = max(1, round(height / target_elem_size))
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def node_id(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            ll = node_id(i, j)
            lr = node_id(i + 1, j)
            ul = node_id(i, j + 1)
            ur = node_id(i + 1, j + 1)
            if (i + j) % 2 == 0:
                tris.append((ll, lr, ur))
                tris.append((ll, ur, ul))
            else:
                tris.append((ll, lr, ul))
                tris.append((lr, ur, ul))
    elements = np.array(tris, dtype=np.int64)

    p = nodes[elements]
    areas = 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    if np.any(areas <= 0.0):
        raise MeshError("degenerate element produced during triangulation")
    return Mesh(nodes=nodes, elements=elements, element_areas=areas,
                width=float(width), height=float(height))


def _boundary_loop(mesh: Mesh):
    """Boundary edges as (node_a, node_b, arc_start, arc_end), CCW from (0,0).

    Arc length runs counterclockwise: bottom, right side, top, left side.
    """
    w, h = mesh.width, mesh.height
    nodes = mesh.nodes
    tol = 1e-9 * max(w, h)

    def arc_of(pt):
        x, y = pt
        if abs(y) <= tol:
            return x
        if abs(x - w) <= tol:
            return w + y
        if abs(y - h) <= tol:
            return w + h + (w - x)
        if abs(x) <= tol:
            return 2 * w + h + (h - y)
        raise MeshError("point not on boundary")

    on_boundary = (
        (np.abs(nodes[:, 1]) <= tol) | (np.abs(nodes[:, 0] - w) <= tol)
        | (np.abs(nodes[:, 1] - h) <= tol) | (np.abs(nodes[:, 0]) <= tol))
    bidx = np.nonzero(on_boundary)[0]
    arcs = np.array([arc_of(nodes[i]) for i in bidx])
    order = np.argsort(arcs)
    loop_nodes = bidx[order]
    loop_arcs = arcs[order]

    perim = mesh.perimeter
    edges = []
    for k in range(len(loop_nodes)):
        a = loop_nodes[k]
        b = loop_nodes[(k + 1) % len(loop_nodes)]
        s0 = loop_arcs[k]
        s1 = loop_arcs[(k + 1) % len(loop_nodes)]
        if k == len(loop_nodes) - 1:
            s1 = perim
        edges.append((int(a), int(b), float(s0), float(s1)))
    return edges


def _circ_dist(a: float, b: float, perim: float) -> float:
    d = abs(a - b) % perim
    return min(d, perim - d)


def place_electrodes(mesh: Mesh, count: int = DEFAULT_ELECTRODE_COUNT,
                     electrode_width: float = DEFAULT_ELECTRODE_WIDTH_MM,
                     contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE,
                     anchor_offset: float = 0.0) -> ElectrodeLayout:
    """Place `count` electrodes at equal arc spacing along the boundary.

    Electrode 0 is centered at arc length `anchor_offset` (default 0, the
    boundary point nearest the origin); placement proceeds counterclockwise.
    Each electrode is snapped to the whole boundary edges nearest its
    nominal center, accumulating edges while that brings the snapped width
    closer to `electrode_width`.
    """
    if count < 4:
        raise MeshError("at least 4 electrodes required")
    perim = mesh.perimeter
    if perim < count * electrode_width:
        raise MeshError("boundary too short for requested electrodes")

    edges = _boundary_loop(mesh)
    mids = np.array([(s0 + s1) / 2.0 for (_, _, s0, s1) in edges])
    lens = np.array([s1 - s0 for (_, _, s0, s1) in edges])

    spacing = perim / count
    centers = (anchor_offset + spacing * np.arange(count)) % perim

    claimed = set()
    seg_list = []
    edge_groups = []
    for c in centers:
        order = sorted(range(len(edges)),
                       key=lambda k: (_circ_dist(mids[k], c, perim), k))
        chosen = [order[0]]
        total = lens[order[0]]
        for k in order[1:]:
            if abs(total + lens[k] - electrode_width) < abs(total - electrode_width):
                chosen.append(k)
                total += lens[k]
            else:
                break
        for k in chosen:
            if k in claimed:
                raise MeshError(
                    "electrodes overlap after snapping; refine the mesh or "
                    "reduce electrode count/width")
            claimed.add(k)
        starts = [edges[k][2] for k in chosen]
        ends = [edges[k][3] for k in chosen]
        seg_list.append((min(starts), max(ends)))
        edge_groups.append(tuple((edges[k][0], edges[k][1]) for k in sorted(chosen)))

    return ElectrodeLayout(
        centers=centers,
        segments=np.array(seg_list),
        edge_nodes=tuple(edge_groups),
        contact_impedance=np.full(count, float(contact_impedance)),
        electrode_width=float(electrode_width))


def build_protocol(n_electrodes: int = DEFAULT_ELECTRODE_COUNT,
                   scheme: str = "adjacent",
                   excitation_current: float = DEFAULT_CURRENT_MA) -> MeasurementProtocol:
    """Build a tetrapolar measurement schedule.

    adjacent: drive (i, i+1), measure every adjacent pair not touching the
    drive electrodes, M = E*(E-3). all_pairs: each unordered electrode pair
    is measured exactly once against a deterministically assigned disjoint
    drive pair, with reciprocal duplicates dropped, M = C(E,2) for E >= 5.
    """
    E = n_electrodes
    if E < 4:
        raise ValueError("at least 4 electrodes required")

    if scheme == "adjacent":
        drives = []
        measures = []
        for i in range(E):
            a, b = i, (i + 1) % E
            drives.append((a, b))
            row = []
            for j in range(E):
                c, d = j, (j + 1) % E
                if len({a, b, c, d}) == 4:
                    row.append((c, d))
            measures.append(tuple(row))
        return MeasurementProtocol(tuple(drives), tuple(measures), E,
                                   excitation_current, scheme="adjacent")

    if scheme == "all_pairs":
        entries = []
        seen = set()
        for a in range(E):
            for b in range(a + 1, E):
                # drive = first two electrodes after b, skipping a and b
                cand = []
                k = (b + 1) % E
                while len(cand) < 2:
                    if k not in (a, b):
                        cand.append(k)
                    k = (k + 1) % E
                drive = (cand[0], cand[1])
                key = frozenset((frozenset(drive), frozenset((a, b))))
                if key in seen:
                    continue
                seen.add(key)
                entries.append((drive, (a, b)))
        grouped: dict = {}
        for drive, meas in entries:
            grouped.setdefault(drive, []).append(meas)
        drives = tuple(grouped.keys())
        measures = tuple(tuple(m) for m in grouped.values())
        return MeasurementProtocol(drives, measures, E,
                                   excitation_current, scheme="all_pairs")

    raise ValueError(f"unknown protocol scheme: {scheme!r}")


def _element_gradients(mesh: Mesh):
    """Per-element shape-function gradient coefficients.

    Returns (bx, by) of shape (N, 3): the gradient of the linear field with
    nodal values u on element e is (bx[e] @ u_e, by[e] @ u_e).
    """
    p = mesh.nodes[mesh.elements]  # (N, 3, 2)
    x, y = p[..., 0], p[..., 1]
    a2 = 2.0 * mesh.element_areas[:, None]
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / a2
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / a2
    return bx, by


class LinearSystem:
    """Assembled CEM system over node potentials + electrode potentials.

    The matrix is symmetric positive semi-definite with nullspace spanned by
    the constant vector; solves ground it by adding an exact rank-one penalty
    that enforces sum(electrode potentials) = 0.
    """

    def __init__(self, matrix: sp.csc_matrix, n_nodes: int, n_electrodes: int,
                 mesh: Mesh, layout: ElectrodeLayout):
        self.matrix = matrix
        self.n_nodes = n_nodes
        self.n_electrodes = n_electrodes
        self.mesh = mesh
        self.layout = layout
        self._factor = None

    @property
    def dim(self) -> int:
        return self.n_nodes + self.n_electrodes

    def _factorize(self):
        if self._factor is None:
            n, E = self.n_nodes, self.n_electrodes
            # exact grounding: penalty on the electrode block keeps the
            # matrix SPD and pins sum(U) = 0 without changing the solution
            eidx = np.arange(n, n + E)
            rows = np.repeat(eidx, E)
            cols = np.tile(eidx, E)
            beta = self.matrix.diagonal().mean()
            penalty = sp.coo_matrix((np.full(E * E, beta), (rows, cols)),
                                    shape=(self.dim, self.dim))
            K = (self.matrix + penalty).tocsc()
            try:
                self._factor = spla.splu(K)
            except RuntimeError as exc:
                raise SolverError(f"singular system (disconnected mesh?): {exc}") from exc
        return self._factor

    def solve(self, rhs: np.ndarray, context: str = "") -> np.ndarray:
        """Solve the grounded system for one right-hand side."""
        x = self._factorize().solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite solution{' for ' + context if context else ''}")
        return x

    def pair_rhs(self, pair, amplitude: float = 1.0) -> np.ndarray:
        """Right-hand side injecting +amplitude at pair[0], -amplitude at pair[1]."""
        rhs = np.zeros(self.dim)
        rhs[self.n_nodes + pair[0]] = amplitude
        rhs[self.n_nodes + pair[1]] = -amplitude
        return rhs

    def electrode_currents(self, solution: np.ndarray) -> np.ndarray:
        """Discrete current through each electrode for a solved potential."""
        return (self.matrix @ solution)[self.n_nodes:]


def assemble_system(mesh: Mesh, fld: ConductivityField,
                    layout: ElectrodeLayout) -> LinearSystem:
    """Assemble the complete-electrode-model system matrix.

    Blocks: sigma-weighted stiffness over nodes, electrode contact coupling
    (conductance sigma0/z per unit boundary length), and electrode diagonal.
    """
    if len(fld.sigma) != mesh.n_elements:
        raise ValueError("conductivity length does not match element count")

    n = mesh.n_nodes
    E = layout.n_electrodes
    bx, by = _element_gradients(mesh)
    tri = mesh.elements

    # stiffness: K_ij = sum_e sigma_e * (bx_i bx_j + by_i by_j) * area_e
    w = fld.sigma * mesh.element_areas
    kxx = np.einsum('e,ei,ej->eij', w, bx, bx) + np.einsum('e,ei,ej->eij', w, by, by)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K = sp.coo_matrix((kxx.ravel(), (rows, cols)), shape=(n + E, n + E))

    r2, c2, v2 = [], [], []
    for l in range(E):
        g = fld.sigma0 / layout.contact_impedance[l]  # 1 / (Ohm*mm)
        for (a, b) in layout.edge_nodes[l]:
            length = float(np.linalg.norm(mesh.nodes[a] - mesh.nodes[b]))
            # boundary mass on edge: len/3 diag, len/6 off-diag
            r2 += [a, b, a, b]
            c2 += [a, b, b, a]
            v2 += [g * length / 3.0, g * length / 3.0,
                   g * length / 6.0, g * length / 6.0]
            # node-electrode coupling: -g * integral(phi) = -g*len/2
            ecol = n + l
            r2 += [a, b, ecol, ecol]
            c2 += [ecol, ecol, a, b]
            v2 += [-g * length / 2.0] * 4
            # electrode diagonal: g * |segment|
            r2.append(ecol)
            c2.append(ecol)
            v2.append(g * length)
    K = (K + sp.coo_matrix((v2, (r2, c2)), shape=(n + E, n + E))).tocsc()
    return LinearSystem(K, n, E, mesh, layout)


def solve_forward(system: LinearSystem, protocol: MeasurementProtocol,
                  current: float | None = None,
                  frame_id: int = 0, timestamp_ms: float = 0.0) -> MeasurementFrame:
    """Drive each protocol pair and read differential electrode voltages."""
    if protocol.n_electrodes != system.n_electrodes:
        raise ValueError("protocol electrode count does not match layout")
    amp = protocol.excitation_current if current is None else current
    n = system.n_nodes
    out = np.empty(protocol.n_measurements)
    i = 0
    for drive, measures in zip(protocol.drive_pairs, protocol.measure_pairs):
        x = system.solve(system.pair_rhs(drive, amp), context=f"drive pair {drive}")
        U = x[n:]
        for (c, d) in measures:
            out[i] = U[c] - U[d]
            i += 1
    return MeasurementFrame(voltages=out, frame_id=frame_id, timestamp_ms=timestamp_ms)


def homogeneous_frame(mesh: Mesh, layout: ElectrodeLayout,
                      protocol: MeasurementProtocol,
                      sigma0: float = DEFAULT_SIGMA0) -> MeasurementFrame:
    """Forward solution at uniform background conductivity (clean reference)."""
    fld = ConductivityField(np.full(mesh.n_elements, sigma0), sigma0)
    return solve_forward(assemble_system(mesh, fld, layout), protocol)


def compute_jacobian(mesh: Mesh, layout: ElectrodeLayout,
                     protocol: MeasurementProtocol,
                     sigma0: float = DEFAULT_SIGMA0) -> SensitivityMatrix:
    """Sensitivity matrix at homogeneous background via the adjoint method.

    J[m, n] = -current * area_n * (grad u_drive . grad u_meas)_n, where
    u_drive and u_meas are unit-current solutions for the drive and measure
    pairs of measurement m. Rows follow protocol order, columns element order.
    """
    if sigma0 <= 0:
        raise ValueError("background conductivity must be positive")
    fld = ConductivityField(np.full(mesh.n_elements, sigma0), sigma0)
    system = assemble_system(mesh, fld, layout)
    bx, by = _element_gradients(mesh)
    tri = mesh.elements
    amp = protocol.excitation_current

    pairs = set(protocol.drive_pairs)
    for measures in protocol.measure_pairs:
        pairs.update(measures)
    grads = {}
    for pair in sorted(pairs):
        x = system.solve(system.pair_rhs(pair, 1.0), context=f"pair {pair}")
        u = x[tri]  # (N, 3) nodal potentials per element
        grads[pair] = (np.einsum('ei,ei->e', bx, u), np.einsum('ei,ei->e', by, u))

    M = protocol.n_measurements
    J = np.empty((M, mesh.n_elements))
    for m, (drive, meas) in enumerate(protocol.flat_measurements()):
        gdx, gdy = grads[drive]
        gmx, gmy = grads[meas]
        J[m] = -amp * mesh.element_areas * (gdx * gmx + gdy * gmy)
    if not np.all(np.isfinite(J)):
        raise SolverError("non-finite Jacobian entries")
    return SensitivityMatrix(J=J, sigma0=sigma0)


def noser_regularizer(sens: SensitivityMatrix) -> RegularizerMatrix:
    """Sensitivity-weighted diagonal regularizer, R = diag(J^T J) exactly.

    Zero or near-zero entries (elements the measurements cannot see) are
    kept as computed here; the inverse-operator builder floors them before
    inverting the regularized normal matrix.
    """
    diag = np.square(sens.J).sum(axis=0)
    return RegularizerMatrix(diagonal=diag)


# --- plain-text serialization (inspection and golden files) ---

def mesh_to_text(mesh: Mesh, layout: ElectrodeLayout | None = None) -> str:
    """Serialize mesh (and optionally electrodes) to a plain-text format.

    Format: header `EITMESH1 <width> <height>`, a NODES section of `x y`
    lines, an ELEMENTS section of `i j k` lines, and optionally an
    ELECTRODES section of `center start end z` lines plus per-electrode
    EDGE lines. Floats use repr precision and round-trip exactly.
    """
    buf = io.StringIO()
    buf.write(f"EITMESH1 {float(mesh.width)!r} {float(mesh.height)!r}\n")
    buf.write(f"NODES {mesh.n_nodes}\n")
    for x, y in mesh.nodes:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    buf.write(f"ELEMENTS {mesh.n_elements}\n")
    for a, b, c in mesh.elements:
        buf.write(f"{a} {b} {c}\n")
    if layout is not None:
        buf.write(f"ELECTRODES {layout.n_electrodes}\n")
        for l in range(layout.n_electrodes):
            c = float(layout.centers[l])
            s0, s1 = (float(v) for v in layout.segments[l])
            z = float(layout.contact_impedance[l])
            buf.write(f"{c!r} {s0!r} {s1!r} {z!r}\n")
            buf.write("EDGES " + " ".join(
                f"{a}:{b}" for a, b in layout.edge_nodes[l]) + "\n")
        buf.write(f"WIDTH {float(layout.electrode_width)!r}\n")
    return buf.getvalue()


def mesh_from_text(text: str):
    """Parse `mesh_to_text` output; returns (Mesh, ElectrodeLayout | None)."""
    lines = text.splitlines()
    pos = 0

    def take():
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    head = take().split()
    if head[0] != "EITMESH1":
        raise ValueError("not an EITMESH1 file")
    width, height = float(head[1]), float(head[2])

    tag, count = take().split()
    assert tag == "NODES"
    nodes = np.array([[float(v) for v in take().split()] for _ in range(int(count))])
    tag, count = take().split()
    assert tag == "ELEMENTS"
    elements = np.array([[int(v) for v in take().split()] for _ in range(int(count))],
                        dtype=np.int64)
    p = nodes[elements]
    areas = 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    mesh = Mesh(nodes=nodes, elements=elements, element_areas=areas,
                width=width, height=height)

    layout = None
    if pos < len(lines) and lines[pos].startswith("ELECTRODES"):
        count = int(take().split()[1])
        centers, segs, zs, groups = [], [], [], []
        for _ in range(count):
            c, s0, s1, z = (float(v) for v in take().split())
            centers.append(c)
            segs.append((s0, s1))
            zs.append(z)
            parts = take().split()[1:]
            groups.append(tuple(tuple(int(v) for v in p.split(":")) for p in parts))
        ewidth = float(take().split()[1])
        layout = ElectrodeLayout(
            centers=np.array(centers), segments=np.array(segs),
            edge_nodes=tuple(groups), contact_impedance=np.array(zs),
            electrode_width=ewidth)
    return mesh, layout
