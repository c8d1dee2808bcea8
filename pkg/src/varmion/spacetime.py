"""Dense space-time Galerkin block system on tiny meshes.

Trial and test spaces are tensor products of spatial P1 functions and
continuous P1 functions in time.  Velocity uses the refined mesh of a
P1-iso-P2 pair and pressure the geometry mesh, as in the time-stepping
solver.  The module exists as a structural oracle: it exposes the inverse
blocks ``D1..D4`` and the four additive solution contributions (forcing,
boundary data, initial velocity, initial pressure) that the operator
network's branches imitate.

Index conventions: velocity dof ``(c, k, i)`` -> ``(c * (T + 1) + k) * Nv + i``
and pressure dof ``(k, j)`` -> ``k * Np + j`` where ``k`` is the time node.
Matrix rows are test functions and columns trial functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutsideDomain, SingularSystem, TooLarge
from .fem import (MixedSpace, _derivative_blocks, assemble_scalar_mass, assemble_scalar_stiffness)
from .geometry import BoundaryTag, Mesh, build_unit_square_mesh, locate_point

MAX_DOFS = 2000


def _time_matrices(nodes: np.ndarray):
    """1D P1 mass and ``C[k, l] = int phi_k phi_l' dt`` on the given nodes."""
    n = len(nodes)
    Mt = np.zeros((n, n))
    Ct = np.zeros((n, n))
    for e in range(n - 1):
        h = nodes[e + 1] - nodes[e]
        idx = [e, e + 1]
        Mt[np.ix_(idx, idx)] += h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
        # phi' = -1/h, +1/h on the element; int phi_k dt = h / 2
        Ct[np.ix_(idx, idx)] += 0.5 * np.array([[-1.0, 1.0], [-1.0, 1.0]])
    return Mt, Ct


@dataclass(frozen=True, eq=False)
class SpaceTimeBasis:
    space: MixedSpace
    time_nodes: np.ndarray
    dirichlet_nodes: np.ndarray   # velocity-mesh vertices carrying boundary data

    @classmethod
    def build(cls, mesh: Mesh, n_intervals: int, tau: float = 1.0, dirichlet_tags=None):
        space = MixedSpace.from_mesh(mesh)
        tags = dirichlet_tags if dirichlet_tags is not None else mesh.tags_present()
        nodes = space.velocity_mesh.boundary_nodes(*tags)
        return cls(space, np.linspace(0.0, tau, n_intervals + 1), np.asarray(nodes, dtype=np.int64))

    @classmethod
    def tiny(cls, n_intervals: int = 3, tau: float = 1.0):
        """Unit square, 2x2 pressure cells; walls carry data, the lid is natural."""
        return cls.build(build_unit_square_mesh(2), n_intervals, tau, dirichlet_tags=[BoundaryTag.WALL])

    @property
    def n_space_velocity(self) -> int:
        return self.space.velocity_mesh.n_vertices

    @property
    def n_space_pressure(self) -> int:
        return self.space.mesh.n_vertices

    @property
    def n_time(self) -> int:
        return len(self.time_nodes)

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_time * self.n_space_velocity

    @property
    def n_pressure(self) -> int:
        return self.n_time * self.n_space_pressure

    def velocity_index(self, c, k, i):
        return (c * self.n_time + k) * self.n_space_velocity + i

    def partitions(self):
        """Index arrays (U0, G, U~, P0, P~); disjoint and exhaustive."""
        Nv, T1 = self.n_space_velocity, self.n_time
        dir_mask = np.zeros(Nv, dtype=bool)
        dir_mask[self.dirichlet_nodes] = True
        u0, g, free = [], [], []
        for c in range(2):
            for k in range(T1):
                for i in range(Nv):
                    idx = self.velocity_index(c, k, i)
                    if k == 0:
                        u0.append(idx)
                    elif dir_mask[i]:
                        g.append(idx)
                    else:
                        free.append(idx)
        Np = self.n_space_pressure
        p0 = np.arange(Np)
        pf = np.arange(Np, T1 * Np)
        return tuple(np.array(a, dtype=np.int64) for a in (u0, g, free, p0, pf))


@dataclass(eq=False)
class BlockSystem:
    basis: SpaceTimeBasis
    rho: float
    mu: float
    L: np.ndarray
    W: np.ndarray
    K: np.ndarray
    M: np.ndarray
    parts: tuple
    _inverse: np.ndarray | None = field(default=None, repr=False)
    rank: int | None = None

    @property
    def A(self) -> np.ndarray:
        return self.W + self.K

    # column/row blocks of the partition
    def blocks(self) -> dict:
        u0, g, free, p0, pf = self.parts
        A = self.A
        return {
            "A0": A[np.ix_(free, u0)], "Ag": A[np.ix_(free, g)], "At": A[np.ix_(free, free)],
            "L0": self.L[np.ix_(pf, u0)], "Lg": self.L[np.ix_(pf, g)], "Lt": self.L[np.ix_(pf, free)],
            "LP0": self.L[np.ix_(p0, free)], "Mr": self.M[free, :],
        }

    def saddle(self) -> np.ndarray:
        b = self.blocks()
        At, Lt = b["At"], b["Lt"]
        nu, npr = At.shape[0], Lt.shape[0]
        S = np.zeros((nu + npr, nu + npr))
        S[:nu, :nu] = At
        S[:nu, nu:] = -Lt.T
        S[nu:, :nu] = Lt
        return S

    def inverse(self, rtol: float = 1e-12) -> np.ndarray:
        """Inverse of the reduced saddle matrix via a rank-checked SVD."""
        if self._inverse is None:
            S = self.saddle()
            U, s, Vt = np.linalg.svd(S)
            self.rank = int(np.sum(s > rtol * s[0])) if s.size else 0
            if self.rank < S.shape[0]:
                raise SingularSystem(f"reduced saddle matrix is rank deficient: rank {self.rank} of {S.shape[0]}",
                                     rank=self.rank)
            self._inverse = (Vt.T / s) @ U.T
        return self._inverse

    def D_blocks(self):
        Dinv = self.inverse()
        nu = len(self.parts[2])
        return Dinv[:nu, :nu], Dinv[:nu, nu:], Dinv[nu:, :nu], Dinv[nu:, nu:]


def assemble_blocks(basis: SpaceTimeBasis, rho: float, mu: float) -> BlockSystem:
    """Space-time matrices ``L``, ``W(rho)``, ``K(mu)``, ``M``.

    ``K`` carries the factor ``2 mu`` of the symmetric-gradient convention.
    """
    total = basis.n_velocity + basis.n_pressure
    if total > MAX_DOFS:
        raise TooLarge(f"{total} space-time dofs exceed the dense budget of {MAX_DOFS}")
    fine = basis.space.velocity_mesh
    P = basis.space.prolongation.toarray()
    Ms = assemble_scalar_mass(fine).toarray()
    Ks = assemble_scalar_stiffness(fine).toarray()
    dx, dy = (d.toarray() for d in _derivative_blocks(fine))
    Mt, Ct = _time_matrices(basis.time_nodes)

    def vec(block):
        Z = np.zeros_like(block)
        return np.block([[block, Z], [Z, block]])

    M = vec(np.kron(Mt, Ms))
    W = rho * vec(np.kron(Ct, Ms))
    K = 2.0 * mu * vec(np.kron(Mt, Ks))
    L = np.hstack([np.kron(Mt, P.T @ dx), np.kron(Mt, P.T @ dy)])
    return BlockSystem(basis, rho, mu, L, W, K, M, basis.partitions())


@dataclass
class OperatorCoefficients:
    """Additive contributions over the free (velocity, pressure) unknowns."""

    b_f: np.ndarray
    b_g: np.ndarray
    b_u0: np.ndarray
    b_p0: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.b_f + self.b_g + self.b_u0 + self.b_p0


def solve_saddle(system: BlockSystem, F, G, U0, P0):
    """Solve for ``(U~, P~)`` and return the four contributions separately.

    ``F`` lives on all velocity dofs, ``G`` on the boundary-data dofs,
    ``U0`` on the initial velocity dofs and ``P0`` on the initial pressure
    dofs.  The boundary contribution includes the continuity coupling
    ``L_g G`` as well as ``A_g G``.
    """
    b = system.blocks()
    D1, D2, D3, D4 = system.D_blocks()
    F, G, U0, P0 = (np.asarray(v, dtype=np.float64) for v in (F, G, U0, P0))

    def stack(top_vel, top_p):
        return np.concatenate([D1 @ top_vel + D2 @ top_p, D3 @ top_vel + D4 @ top_p])

    zero_p = np.zeros(b["Lt"].shape[0])
    coeffs = OperatorCoefficients(
        b_f=stack(b["Mr"] @ F, zero_p),
        b_g=-stack(b["Ag"] @ G, b["Lg"] @ G),
        b_u0=-stack(b["A0"] @ U0, b["L0"] @ U0),
        b_p0=stack(b["LP0"].T @ P0, zero_p),
    )
    nu = b["At"].shape[0]
    total = coeffs.total
    return (total[:nu], total[nu:]), coeffs


def full_coefficients(system: BlockSystem, coeffs: OperatorCoefficients, G, U0, P0):
    """Assemble complete velocity and pressure coefficient vectors."""
    u0, g, free, p0, pf = system.parts
    U = np.zeros(system.basis.n_velocity)
    P = np.zeros(system.basis.n_pressure)
    total = coeffs.total
    nu = len(free)
    U[u0], U[g], U[free] = U0, G, total[:nu]
    P[p0], P[pf] = P0, total[nu:]
    return U, P


def _time_basis(nodes: np.ndarray, t: float) -> np.ndarray:
    if t < nodes[0] - 1e-12 or t > nodes[-1] + 1e-12:
        raise OutsideDomain(f"time {t} outside [{nodes[0]}, {nodes[-1]}]")
    phi = np.zeros(len(nodes))
    e = min(max(int(np.searchsorted(nodes, t, side="right")) - 1, 0), len(nodes) - 2)
    s = (t - nodes[e]) / (nodes[e + 1] - nodes[e])
    phi[e], phi[e + 1] = 1.0 - s, s
    return phi


def discrete_operator(basis: SpaceTimeBasis, rho, mu, F, G, U0, P0, x, t, system: BlockSystem | None = None):
    """Evaluate the discrete solution ``(u1, u2, p)`` at ``(x, t)``."""
    if system is None:
        system = assemble_blocks(basis, rho, mu)
    _, coeffs = solve_saddle(system, F, G, U0, P0)
    U, P = full_coefficients(system, coeffs, G, U0, P0)
    fine = basis.space.velocity_mesh
    hit = locate_point(fine, x)
    if hit is None:
        raise OutsideDomain(f"point {tuple(x)} outside the spatial mesh")
    tri, lam = hit
    psi = np.zeros(fine.n_vertices)
    psi[fine.triangles[tri]] = lam
    phi = _time_basis(basis.time_nodes, t)
    Nv, T1 = basis.n_space_velocity, basis.n_time
    Uc = U.reshape(2, T1, Nv)
    u1 = phi @ Uc[0] @ psi
    u2 = phi @ Uc[1] @ psi
    pressure_on_fine = basis.space.prolongation @ P.reshape(T1, -1).T   # (Nv, T1)
    p = psi @ pressure_on_fine @ phi
    return float(u1), float(u2), float(p)


def structure_report(basis: SpaceTimeBasis | None = None, rho: float = 1.3, mu: float = 0.7,
                     seed: int = 0) -> dict:
    """Numerical checks of the block structure; returns named maximum errors."""
    basis = basis or SpaceTimeBasis.tiny()
    rng = np.random.default_rng(seed)
    sys1 = assemble_blocks(basis, rho, mu)
    u0, g, free, p0, pf = sys1.parts
    F, F2 = rng.standard_normal((2, basis.n_velocity))
    G = rng.standard_normal(len(g))
    U0 = rng.standard_normal(len(u0))
    P0 = rng.standard_normal(len(p0))
    zG, zU, zP = np.zeros(len(g)), np.zeros(len(u0)), np.zeros(len(p0))
    zF = np.zeros(basis.n_velocity)

    (Ut, Pt), c = solve_saddle(sys1, F, G, U0, P0)
    S = sys1.saddle()
    blk = sys1.blocks()
    rhs = np.concatenate([blk["Mr"] @ F - blk["Ag"] @ G - blk["A0"] @ U0 + blk["LP0"].T @ P0,
                          -blk["L0"] @ U0 - blk["Lg"] @ G])
    direct = np.linalg.solve(S, rhs)
    parts = [solve_saddle(sys1, F, zG, zU, zP)[1].b_f, solve_saddle(sys1, zF, G, zU, zP)[1].b_g,
             solve_saddle(sys1, zF, zG, U0, zP)[1].b_u0, solve_saddle(sys1, zF, zG, zU, P0)[1].b_p0]
    sys_r = assemble_blocks(basis, 2 * rho, mu)
    sys_m = assemble_blocks(basis, rho, 2 * mu)
    bf1 = solve_saddle(sys1, F, zG, zU, zP)[1].b_f
    bf2 = solve_saddle(sys1, F2, zG, zU, zP)[1].b_f
    bf12 = solve_saddle(sys1, F + F2, zG, zU, zP)[1].b_f
    sys_other = assemble_blocks(basis, 2.1 * rho, 0.4 * mu)
    D1, _, D3, _ = sys_other.D_blocks()
    bf_other = solve_saddle(sys_other, F, zG, zU, zP)[1].b_f
    right = sys1.blocks()["Mr"] @ F
    scale = max(1.0, float(np.max(np.abs(c.total))))
    report = {
        "n_unknowns": int(S.shape[0]),
        "rank": int(sys1.rank),
        "solve_vs_direct": float(np.max(np.abs(c.total - direct))) / scale,
        "additivity": float(np.max(np.abs(c.total - sum(parts)))) / scale,
        "superposition": float(np.max(np.abs(
            solve_saddle(sys1, F, G, zU, zP)[1].total
            - solve_saddle(sys1, F, zG, zU, zP)[1].total - solve_saddle(sys1, zF, G, zU, zP)[1].total))) / scale,
        "scaling": float(np.max(np.abs(solve_saddle(sys1, 3 * F, 3 * G, 3 * U0, 3 * P0)[1].total - 3 * c.total))) / scale,
        "W_rho_linearity": float(np.max(np.abs(sys_r.W - 2 * sys1.W))),
        "K_mu_linearity": float(np.max(np.abs(sys_m.K - 2 * sys1.K))),
        "M_parameter_free": float(np.max(np.abs(sys_other.M - sys1.M))),
        "b_f_linearity": float(np.max(np.abs(bf12 - bf1 - bf2))) / scale,
        "b_f_factorization": float(np.max(np.abs(bf_other - np.concatenate([D1 @ right, D3 @ right])))) / scale,
    }
    return report
