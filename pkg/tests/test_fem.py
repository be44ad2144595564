"""Forward-model tests: mesh/electrode/protocol geometry against counting
oracles, the sparse solver against an independent dense implementation,
and the adjoint Jacobian against central finite differences."""

import numpy as np
import pytest

from eitskin import fem


# --- independent dense oracle: naive per-element assembly, Lagrange
# multiplier grounding (different code path and grounding than production) ---

def dense_cem_solve(mesh, fld, layout, drive_pair, current):
    n = mesh.n_nodes
    E = layout.n_electrodes
    dim = n + E
    K = np.zeros((dim, dim))
    for e in range(mesh.n_elements):
        tri = mesh.elements[e]
        (x1, y1), (x2, y2), (x3, y3) = mesh.nodes[tri]
        area = 0.5 * abs((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1))
        b = np.array([y2 - y3, y3 - y1, y1 - y2]) / (2 * area)
        c = np.array([x3 - x2, x1 - x3, x2 - x1]) / (2 * area)
        for i in range(3):
            for j in range(3):
                K[tri[i], tri[j]] += fld.sigma[e] * area * (b[i] * b[j] + c[i] * c[j])
    for l in range(E):
        g = fld.sigma0 / layout.contact_impedance[l]
        for (a, bnode) in layout.edge_nodes[l]:
            length = np.linalg.norm(mesh.nodes[a] - mesh.nodes[bnode])
            K[a, a] += g * length / 3
            K[bnode, bnode] += g * length / 3
            K[a, bnode] += g * length / 6
            K[bnode, a] += g * length / 6
            K[a, n + l] -= g * length / 2
            K[bnode, n + l] -= g * length / 2
            K[n + l, a] -= g * length / 2
            K[n + l, bnode] -= g * length / 2
            K[n + l, n + l] += g * length
    # ground with a Lagrange multiplier on sum of electrode potentials
    aug = np.zeros((dim + 1, dim + 1))
    aug[:dim, :dim] = K
    aug[dim, n:dim] = 1.0
    aug[n:dim, dim] = 1.0
    rhs = np.zeros(dim + 1)
    rhs[n + drive_pair[0]] = current
    rhs[n + drive_pair[1]] = -current
    sol = np.linalg.solve(aug, rhs)
    return sol[:dim]


def dense_forward(mesh, fld, layout, protocol, current=1.0):
    out = []
    for drive, measures in zip(protocol.drive_pairs, protocol.measure_pairs):
        x = dense_cem_solve(mesh, fld, layout, drive, current)
        for (c, d) in measures:
            out.append(x[mesh.n_nodes + c] - x[mesh.n_nodes + d])
    return np.array(out)


# --- mesh ---

def test_default_mesh_counts():
    mesh = fem.build_rect_mesh(150, 60, 5)
    assert mesh.n_elements == 720  # 30*12 cells, 2 triangles each
    assert mesh.n_nodes == 403     # 31*13
    assert mesh.element_areas.sum() == pytest.approx(9000.0, rel=1e-6)


def test_small_mesh_counts():
    mesh = fem.build_rect_mesh(10, 10, 5)
    assert mesh.n_elements == 8
    assert mesh.n_nodes == 9
    assert mesh.element_areas.sum() == pytest.approx(100.0, rel=1e-12)


def test_mesh_element_validity():
    mesh = fem.build_rect_mesh(150, 60, 5)
    assert np.all(mesh.element_areas > 0)
    for tri in mesh.elements:
        assert len(set(tri.tolist())) == 3
        assert all(0 <= t < mesh.n_nodes for t in tri)


def test_mesh_exceeds_measurement_count():
    mesh = fem.build_rect_mesh(150, 60, 5)
    protocol = fem.build_protocol(8, "adjacent")
    assert mesh.n_elements >= 4 * protocol.n_measurements


def test_too_coarse_mesh_rejected():
    with pytest.raises(fem.MeshError):
        fem.build_rect_mesh(150, 60, 35.0)  # coarser than a 2x2 grid
    with pytest.raises(fem.MeshError):
        fem.build_rect_mesh(150, 60, -1.0)


def test_mesh_text_round_trip():
    mesh = fem.build_rect_mesh(150, 60, 10)
    layout = fem.place_electrodes(mesh, 8, 5)
    text = fem.mesh_to_text(mesh, layout)
    mesh2, layout2 = fem.mesh_from_text(text)
    assert np.array_equal(mesh.nodes, mesh2.nodes)
    assert np.array_equal(mesh.elements, mesh2.elements)
    assert np.array_equal(layout.centers, layout2.centers)
    assert np.array_equal(layout.segments, layout2.segments)
    assert layout.edge_nodes == layout2.edge_nodes
    assert np.array_equal(layout.contact_impedance, layout2.contact_impedance)


# --- electrodes ---

def test_electrode_spacing_and_anchor():
    mesh = fem.build_rect_mesh(150, 60, 5)
    layout = fem.place_electrodes(mesh, 8, 5)
    assert layout.n_electrodes == 8
    # perimeter 2*(150+60) = 420, spacing 52.5, anchored at arc length 0
    assert layout.centers[0] == pytest.approx(0.0)
    spacings = np.diff(layout.centers)
    assert np.allclose(spacings, 52.5)


def test_four_electrode_spacing():
    mesh = fem.build_rect_mesh(150, 60, 5)
    layout = fem.place_electrodes(mesh, 4, 5)
    assert np.allclose(np.diff(layout.centers), 105.0)


def test_electrodes_disjoint_and_snapped():
    mesh = fem.build_rect_mesh(150, 60, 5)
    layout = fem.place_electrodes(mesh, 8, 5)
    seen = set()
    for group in layout.edge_nodes:
        assert len(group) >= 1
        for edge in group:
            assert edge not in seen
            seen.add(edge)
            # both nodes on the rectangle boundary
            for node in edge:
                x, y = mesh.nodes[node]
                assert x in (0.0, 150.0) or y in (0.0, 60.0)


def test_electrode_count_rejected():
    mesh = fem.build_rect_mesh(150, 60, 5)
    with pytest.raises(fem.MeshError):
        fem.place_electrodes(mesh, 3, 5)
    with pytest.raises(fem.MeshError):
        fem.place_electrodes(mesh, 8, 60.0)  # 8*60 > perimeter


# --- protocol ---

def test_adjacent_protocol_counts():
    assert fem.build_protocol(8, "adjacent").n_measurements == 40
    assert fem.build_protocol(4, "adjacent").n_measurements == 4
    assert fem.build_protocol(16, "adjacent").n_measurements == 16 * 13


def test_all_pairs_sixteen_gives_120():
    protocol = fem.build_protocol(16, "all_pairs")
    assert protocol.n_measurements == 120


def test_protocol_tetrapolar_and_unique():
    for scheme in ("adjacent", "all_pairs"):
        protocol = fem.build_protocol(8, scheme)
        seen = set()
        flat = list(protocol.flat_measurements())
        assert len(flat) == protocol.n_measurements
        for drive, meas in flat:
            assert len({drive[0], drive[1], meas[0], meas[1]}) == 4
            combo = (drive, meas)
            assert combo not in seen
            seen.add(combo)


def test_all_pairs_excludes_reciprocal_duplicates():
    # the adjacent cycle keeps reciprocal rows (standard practice, and the
    # E*(E-3) count requires them); the all_pairs scheme must not
    flat = list(fem.build_protocol(8, "all_pairs").flat_measurements())
    keys = [frozenset((frozenset(d), frozenset(m))) for d, m in flat]
    assert len(keys) == len(set(keys))
    # and every unordered electrode pair appears exactly once as measure
    measures = [frozenset(m) for _, m in flat]
    assert len(measures) == len(set(measures)) == 28  # C(8,2)


def test_unknown_scheme_rejected():
    with pytest.raises(ValueError):
        fem.build_protocol(8, "spiral")


# --- assembly and forward solve ---

def test_system_matrix_symmetric(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    system = fem.assemble_system(m.mesh, fld, m.layout)
    K = system.matrix.toarray()
    assert np.abs(K - K.T).max() <= 1e-12 * np.abs(K).max()


def test_system_dimension(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    system = fem.assemble_system(m.mesh, fld, m.layout)
    assert system.dim == m.mesh.n_nodes + m.layout.n_electrodes


def test_doubling_conductivity_halves_voltages(coarse_model):
    m = coarse_model
    f1 = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    f2 = fem.ConductivityField(2.0 * np.ones(m.mesh.n_elements), 2.0)
    v1 = fem.solve_forward(fem.assemble_system(m.mesh, f1, m.layout), m.protocol)
    v2 = fem.solve_forward(fem.assemble_system(m.mesh, f2, m.layout), m.protocol)
    assert np.allclose(v2.voltages, v1.voltages / 2.0, rtol=1e-8)


def test_forward_against_dense_oracle(coarse_model):
    m = coarse_model
    rng = np.random.default_rng(42)
    sigma = 1.0 + 0.3 * rng.random(m.mesh.n_elements)
    fld = fem.ConductivityField(sigma, 1.0)
    mine = fem.solve_forward(fem.assemble_system(m.mesh, fld, m.layout),
                             m.protocol).voltages
    oracle = dense_forward(m.mesh, fld, m.layout, m.protocol)
    assert np.abs(mine - oracle).max() <= 1e-8 * np.abs(oracle).max()


def test_zero_current_zero_frame(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    frame = fem.solve_forward(fem.assemble_system(m.mesh, fld, m.layout),
                              m.protocol, current=0.0)
    assert np.all(frame.voltages == 0.0)


def test_reciprocity(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    system = fem.assemble_system(m.mesh, fld, m.layout)
    n = m.mesh.n_nodes
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (1, 4)]
    sols = {p: system.solve(system.pair_rhs(p, 1.0)) for p in pairs}
    for i, p in enumerate(pairs):
        for q in pairs[i + 1:]:
            if set(p) & set(q):
                continue
            v_pq = sols[p][n + q[0]] - sols[p][n + q[1]]
            v_qp = sols[q][n + p[0]] - sols[q][n + p[1]]
            assert abs(v_pq - v_qp) <= 1e-8 * abs(v_pq)


def test_current_conservation(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    system = fem.assemble_system(m.mesh, fld, m.layout)
    for drive in m.protocol.drive_pairs:
        x = system.solve(system.pair_rhs(drive, 1.0))
        currents = system.electrode_currents(x)
        assert abs(currents.sum()) <= 1e-10
        assert currents[drive[0]] == pytest.approx(1.0, abs=1e-10)
        assert currents[drive[1]] == pytest.approx(-1.0, abs=1e-10)


def test_sigma_scaling_law(coarse_model):
    m = coarse_model
    c = 3.7
    f1 = fem.ConductivityField(np.ones(m.mesh.n_elements), 1.0)
    fc = fem.ConductivityField(c * np.ones(m.mesh.n_elements), c)
    v1 = fem.solve_forward(fem.assemble_system(m.mesh, f1, m.layout), m.protocol).voltages
    vc = fem.solve_forward(fem.assemble_system(m.mesh, fc, m.layout), m.protocol).voltages
    assert np.abs(vc - v1 / c).max() <= 1e-8 * np.abs(v1 / c).max()
    j1 = fem.compute_jacobian(m.mesh, m.layout, m.protocol, 1.0).J
    jc = fem.compute_jacobian(m.mesh, m.layout, m.protocol, c).J
    assert np.abs(jc - j1 / c**2).max() <= 1e-8 * np.abs(j1 / c**2).max()


def test_field_validation():
    with pytest.raises(ValueError):
        fem.ConductivityField(np.array([1.0, -1.0]), 1.0)
    with pytest.raises(ValueError):
        fem.ConductivityField(np.array([1.0, 1.0]), 0.0)


def test_mismatched_field_length(coarse_model):
    m = coarse_model
    fld = fem.ConductivityField(np.ones(3), 1.0)
    with pytest.raises(ValueError):
        fem.assemble_system(m.mesh, fld, m.layout)


def test_singular_system_reported():
    # two disjoint triangles; electrodes only on the first: the second
    # floats, so the system is singular
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                      [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]])
    elements = np.array([[0, 1, 2], [3, 4, 5]])
    areas = np.full(2, 0.5)
    mesh = fem.Mesh(nodes=nodes, elements=elements, element_areas=areas,
                    width=6.0, height=6.0)
    layout = fem.ElectrodeLayout(
        centers=np.array([0.0, 1.0, 2.0, 3.0]),
        segments=np.array([[0.0, 1.0]] * 4),
        edge_nodes=(((0, 1),), ((1, 2),), ((2, 0),), ((0, 1),)),
        contact_impedance=np.full(4, 100.0),
        electrode_width=1.0)
    fld = fem.ConductivityField(np.ones(2), 1.0)
    system = fem.assemble_system(mesh, fld, layout)
    with pytest.raises(fem.SolverError):
        system.solve(system.pair_rhs((0, 1), 1.0))


# --- Jacobian ---

def test_jacobian_shape(coarse_model, coarse_jacobian):
    m = coarse_model
    M, N = coarse_jacobian.shape
    assert M == m.protocol.n_measurements
    assert N == m.mesh.n_elements
    assert M < N  # many more unknowns than measurements


def test_jacobian_vs_finite_difference_sample(coarse_model, coarse_jacobian):
    """Spot check on a column subset; the full sweep runs in acceptance."""
    m = coarse_model
    J = coarse_jacobian.J
    h = 0.01
    for n in range(0, m.mesh.n_elements, 13):
        sp = np.ones(m.mesh.n_elements)
        sm = np.ones(m.mesh.n_elements)
        sp[n] += h
        sm[n] -= h
        vp = fem.solve_forward(fem.assemble_system(
            m.mesh, fem.ConductivityField(sp, 1.0), m.layout), m.protocol).voltages
        vm = fem.solve_forward(fem.assemble_system(
            m.mesh, fem.ConductivityField(sm, 1.0), m.layout), m.protocol).voltages
        fd = (vp - vm) / (2 * h)
        denom = max(np.abs(J[:, n]).max(), np.abs(fd).max())
        assert np.abs(J[:, n] - fd).max() <= 1e-3 * denom


def test_jacobian_mirror_symmetry():
    """A mirror-symmetric world must give mirror-equal sensitivities.

    Uses an even-cell mesh (checkerboard diagonals are then symmetric) and
    four electrodes whose nominal centers sit exactly on boundary-edge
    midpoints and map onto each other under x -> width - x, so snapping
    cannot break the symmetry.
    """
    mesh = fem.build_rect_mesh(150, 60, 5)  # 30x12 cells, both even
    perim = mesh.perimeter
    layout = fem.place_electrodes(mesh, 4, 5, anchor_offset=22.5)
    protocol = fem.build_protocol(4, "adjacent")
    J = fem.compute_jacobian(mesh, layout, protocol, 1.0).J

    def mirror_arc(s):
        return (150.0 - s) % perim

    emap = {}
    for i, c in enumerate(layout.centers):
        target = mirror_arc(c)
        j = int(np.argmin([min(abs(c2 - target), perim - abs(c2 - target))
                           for c2 in layout.centers]))
        emap[i] = j

    cents = mesh.element_centroids
    mirrored = np.column_stack([150.0 - cents[:, 0], cents[:, 1]])
    elem_map = np.array([
        int(np.argmin(np.hypot(cents[:, 0] - mx, cents[:, 1] - my)))
        for mx, my in mirrored])
    # mirrored centroids must coincide exactly with existing centroids
    assert np.allclose(cents[elem_map], mirrored, atol=1e-9)

    flat = list(protocol.flat_measurements())
    index = {}
    for k, (d, mm) in enumerate(flat):
        index[(d, mm)] = (k, 1.0)
    for k, (d, mm) in enumerate(flat):
        md = (emap[d[0]], emap[d[1]])
        mm2 = (emap[mm[0]], emap[mm[1]])
        sign = 1.0
        if md not in {dd for dd, _ in flat}:
            md = (md[1], md[0])
            sign *= -1.0
        found = None
        for cand_sign_m in (1.0, -1.0):
            key = (md, mm2 if cand_sign_m > 0 else (mm2[1], mm2[0]))
            if key in index:
                found = (index[key][0], sign * cand_sign_m)
                break
        assert found is not None, f"no mirrored measurement for {(d, mm)}"
        k2, total_sign = found
        lhs = J[k, :]
        rhs = total_sign * J[k2, elem_map]
        assert np.abs(lhs - rhs).max() <= 1e-6 * np.abs(J).max()


# --- NOSER regularizer ---

def test_noser_identity_small():
    J = fem.SensitivityMatrix(J=np.eye(2), sigma0=1.0)
    reg = fem.noser_regularizer(J)
    assert np.array_equal(reg.diagonal, np.ones(2))


def test_noser_zero_column():
    J = np.array([[1.0, 0.0], [2.0, 0.0]])
    reg = fem.noser_regularizer(fem.SensitivityMatrix(J=J, sigma0=1.0))
    assert reg.diagonal[1] == 0.0


def test_noser_brute_force_random():
    rng = np.random.default_rng(3)
    J = rng.standard_normal((3, 4))
    reg = fem.noser_regularizer(fem.SensitivityMatrix(J=J, sigma0=1.0))
    brute = np.zeros(4)
    for n in range(4):
        for m in range(3):
            brute[n] += J[m, n] ** 2
    assert np.array_equal(reg.diagonal, brute)


def test_noser_bit_for_bit_small_case():
    # with few rows numpy's reduction is sequential, so a plain python
    # double loop is bitwise-reproducible
    rng = np.random.default_rng(11)
    J = rng.standard_normal((6, 9))
    reg = fem.noser_regularizer(fem.SensitivityMatrix(J=J, sigma0=1.0))
    brute = np.zeros(9)
    for n in range(9):
        acc = 0.0
        for m in range(6):
            acc += J[m, n] * J[m, n]
        brute[n] = acc
    assert np.array_equal(reg.diagonal, brute)


def test_noser_matches_normal_matrix_diagonal(coarse_jacobian):
    reg = fem.noser_regularizer(coarse_jacobian)
    J = coarse_jacobian.J
    assert np.allclose(reg.diagonal, np.diag(J.T @ J), rtol=1e-13, atol=0)
    assert np.all(reg.diagonal >= 0)
