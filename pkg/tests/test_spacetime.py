import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from varmion.errors import OutsideDomain, SingularSystem, TooLarge
from varmion.fem import assemble_scalar_mass
from varmion.geometry import BoundaryTag, Mesh, build_unit_square_mesh
from varmion.spacetime import (SpaceTimeBasis, _time_matrices, assemble_blocks, discrete_operator,
                               full_coefficients, solve_saddle, structure_report)

ONE_TRIANGLE = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [1, 1, 1])


@pytest.fixture(scope="module")
def tiny():
    basis = SpaceTimeBasis.tiny()
    return basis, assemble_blocks(basis, 1.3, 0.7)


def random_inputs(system, rng):
    u0, g, free, p0, pf = system.parts
    return (rng.standard_normal(system.basis.n_velocity), rng.standard_normal(len(g)),
            rng.standard_normal(len(u0)), rng.standard_normal(len(p0)))


def zeros_like_inputs(system):
    u0, g, free, p0, pf = system.parts
    return np.zeros(system.basis.n_velocity), np.zeros(len(g)), np.zeros(len(u0)), np.zeros(len(p0))


def symbolic_time_pairing(nodes):
    """C[k, l] = int phi_k phi_l' dt and the P1 mass, by exact integration."""
    t = sp.symbols("t")
    nodes = [sp.Rational(n) for n in nodes]
    n = len(nodes)
    phis = []
    for k in range(n):
        pieces = []
        for e in range(n - 1):
            a, b = nodes[e], nodes[e + 1]
            if k == e:
                pieces.append(((b - t) / (b - a), (a, b)))
            elif k == e + 1:
                pieces.append(((t - a) / (b - a), (a, b)))
            else:
                pieces.append((sp.Integer(0), (a, b)))
        phis.append(pieces)
    C = np.zeros((n, n))
    Mt = np.zeros((n, n))
    for k in range(n):
        for l in range(n):
            c = m = 0
            for (pk, (a, b)), (pl, _) in zip(phis[k], phis[l]):
                c += sp.integrate(pk * sp.diff(pl, t), (t, a, b))
                m += sp.integrate(pk * pl, (t, a, b))
            C[k, l], Mt[k, l] = float(c), float(m)
    return C, Mt


def test_time_pairing_unit_interval():
    C, Mt = symbolic_time_pairing(["0", "1"])
    np.testing.assert_array_equal(C, [[-0.5, 0.5], [-0.5, 0.5]])
    Mt_code, C_code = _time_matrices(np.array([0.0, 1.0]))
    np.testing.assert_allclose(C_code, C, atol=1e-15)
    np.testing.assert_allclose(Mt_code, Mt, atol=1e-15)


def test_time_pairing_nonuniform_nodes():
    nodes = ["0", "1/5", "1/2", "3/2"]
    C, Mt = symbolic_time_pairing(nodes)
    Mt_code, C_code = _time_matrices(np.array([float(sp.Rational(x)) for x in nodes]))
    np.testing.assert_allclose(C_code, C, atol=1e-14)
    np.testing.assert_allclose(Mt_code, Mt, atol=1e-14)


def test_W_block_two_spatial_dofs():
    basis = SpaceTimeBasis.build(ONE_TRIANGLE, 1, 1.0, dirichlet_tags=[])
    rho = 1.7
    sys_ = assemble_blocks(basis, rho, 1.0)
    C, _ = symbolic_time_pairing(["0", "1"])
    Ms = assemble_scalar_mass(basis.space.velocity_mesh).toarray()
    i, j = 0, 3
    for c in range(2):
        for k in range(2):
            for l in range(2):
                w = sys_.W[basis.velocity_index(c, k, i), basis.velocity_index(c, l, j)]
                assert abs(w - rho * C[k, l] * Ms[i, j]) < 1e-15
    # no coupling between velocity components
    assert np.all(sys_.W[basis.velocity_index(0, 0, i), basis.velocity_index(1, 0, j)] == 0)


def test_parameter_scaling(tiny):
    basis, s = tiny
    s_rho = assemble_blocks(basis, 2.6, 0.7)
    s_mu = assemble_blocks(basis, 1.3, 1.4)
    assert np.max(np.abs(s_rho.W - 2 * s.W)) <= 1e-12
    assert np.max(np.abs(s_mu.K - 2 * s.K)) <= 1e-12
    assert np.array_equal(s_rho.M, s.M) and np.array_equal(s_mu.L, s.L)
    assert np.array_equal(s.A, s.W + s.K)


def test_partitions_disjoint_exhaustive(tiny):
    basis, s = tiny
    u0, g, free, p0, pf = s.parts
    vel = np.concatenate([u0, g, free])
    assert len(np.unique(vel)) == len(vel) == basis.n_velocity
    pre = np.concatenate([p0, pf])
    assert len(np.unique(pre)) == len(pre) == basis.n_pressure


def test_tiny_instance_size_and_rank(tiny):
    _, s = tiny
    n = s.saddle().shape[0]
    assert n <= 200
    s.inverse()
    assert s.rank == n


def test_zero_inputs_give_zero_coefficients(tiny):
    _, s = tiny
    (Ut, Pt), c = solve_saddle(s, *zeros_like_inputs(s))
    for v in (c.b_f, c.b_g, c.b_u0, c.b_p0, Ut, Pt):
        assert np.all(v == 0)


def test_superposition(tiny):
    _, s = tiny
    rng = np.random.default_rng(4)
    F, G, U0, P0 = random_inputs(s, rng)
    zF, zG, zU, zP = zeros_like_inputs(s)
    a = solve_saddle(s, F, G, zU, zP)[1].total
    b = solve_saddle(s, F, zG, zU, zP)[1].total + solve_saddle(s, zF, G, zU, zP)[1].total
    assert np.max(np.abs(a - b)) <= 1e-10


def test_one_triangle_against_explicit_inverse():
    basis = SpaceTimeBasis.build(ONE_TRIANGLE, 1, 1.0, dirichlet_tags=[])
    s = assemble_blocks(basis, 1.1, 0.6)
    u0, g, free, p0, pf = s.parts
    A = s.W + s.K
    # saddle matrix rebuilt from the global matrices and the index sets
    top = np.hstack([A[np.ix_(free, free)], -s.L[np.ix_(pf, free)].T])
    bottom = np.hstack([s.L[np.ix_(pf, free)], np.zeros((len(pf), len(pf)))])
    inv = np.linalg.inv(np.vstack([top, bottom]))
    nu = len(free)
    D1, D3 = inv[:nu, :nu], inv[nu:, :nu]
    F = np.random.default_rng(7).standard_normal(basis.n_velocity)
    MF = s.M[free, :] @ F
    zF, zG, zU, zP = zeros_like_inputs(s)
    _, c = solve_saddle(s, F, zG, zU, zP)
    np.testing.assert_allclose(c.b_f, np.concatenate([D1 @ MF, D3 @ MF]), rtol=1e-9, atol=1e-12)


def test_rank_deficient_system_raises():
    basis = SpaceTimeBasis.build(ONE_TRIANGLE, 1, 1.0, dirichlet_tags=[BoundaryTag.WALL])
    s = assemble_blocks(basis, 1.0, 1.0)
    with pytest.raises(SingularSystem) as info:
        s.inverse()
    # every velocity node carries data, leaving a pressure-only block of zeros
    assert info.value.rank == 0 < s.saddle().shape[0]


def test_too_large():
    with pytest.raises(TooLarge):
        assemble_blocks(SpaceTimeBasis.build(build_unit_square_mesh(8), 10, 1.0), 1.0, 1.0)


def test_discrete_operator_at_nodes(tiny):
    basis, s = tiny
    rng = np.random.default_rng(5)
    F, G, U0, P0 = random_inputs(s, rng)
    _, c = solve_saddle(s, F, G, U0, P0)
    U, P = full_coefficients(s, c, G, U0, P0)
    fine = basis.space.velocity_mesh
    Nv, Np, T1 = basis.n_space_velocity, basis.n_space_pressure, basis.n_time
    for k, i in ((0, 4), (2, 7), (3, 12)):
        u1, u2, _ = discrete_operator(basis, s.rho, s.mu, F, G, U0, P0, fine.vertices[i], basis.time_nodes[k],
                                      system=s)
        assert abs(u1 - U[basis.velocity_index(0, k, i)]) < 1e-12
        assert abs(u2 - U[basis.velocity_index(1, k, i)]) < 1e-12
    # coarse vertices keep their index in the refined mesh
    for k, j in ((1, 4), (3, 0)):
        _, _, p = discrete_operator(basis, s.rho, s.mu, F, G, U0, P0, basis.space.mesh.vertices[j],
                                    basis.time_nodes[k], system=s)
        assert abs(p - P[k * Np + j]) < 1e-12
    assert U.shape == (2 * T1 * Nv,)


def test_discrete_operator_linear_and_zero(tiny):
    basis, s = tiny
    rng = np.random.default_rng(6)
    F, G, U0, P0 = random_inputs(s, rng)
    zF, zG, zU, zP = zeros_like_inputs(s)
    x, t = (0.3, 0.55), 0.4
    out = lambda F_: np.array(discrete_operator(basis, s.rho, s.mu, F_, G, U0, P0, x, t, system=s))
    assert np.max(np.abs((out(2 * F) - out(zF)) - 2 * (out(F) - out(zF)))) <= 1e-10
    assert discrete_operator(basis, s.rho, s.mu, zF, zG, zU, zP, x, t, system=s) == (0.0, 0.0, 0.0)
    with pytest.raises(OutsideDomain):
        discrete_operator(basis, s.rho, s.mu, F, G, U0, P0, (1.5, 0.5), t, system=s)
    with pytest.raises(OutsideDomain):
        discrete_operator(basis, s.rho, s.mu, F, G, U0, P0, x, 1.5, system=s)


def test_structure_report_machine_precision():
    report = structure_report()
    assert report["rank"] == report["n_unknowns"] == 99
    for key, value in report.items():
        if key not in ("rank", "n_unknowns"):
            assert value <= 1e-12, key


@settings(max_examples=10, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(-3.0, 3.0), st.integers(0, 1000))
def test_additivity_and_scaling_property(rho, mu, alpha, seed):
    basis = SpaceTimeBasis.tiny(n_intervals=2)
    s = assemble_blocks(basis, rho, mu)
    F, G, U0, P0 = random_inputs(s, np.random.default_rng(seed))
    (Ut, Pt), c = solve_saddle(s, F, G, U0, P0)
    scale = max(1.0, np.max(np.abs(c.total)))
    assert np.max(np.abs(np.concatenate([Ut, Pt]) - (c.b_f + c.b_g + c.b_u0 + c.b_p0))) <= 1e-13 * scale
    _, c2 = solve_saddle(s, alpha * F, alpha * G, alpha * U0, alpha * P0)
    assert np.max(np.abs(c2.total - alpha * c.total)) <= 1e-11 * scale
