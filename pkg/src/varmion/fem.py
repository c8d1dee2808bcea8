"""Linear (P1) finite-element matrices, Dirichlet constraints and a PCG solver.

Velocity dofs are component-blocked: all x-components first, then all
y-components, i.e. dof ``c * N + i`` is component ``c`` at vertex ``i``.
Pressure may live on the same mesh (equal order) or on a coarser one, see
:class:`MixedSpace`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import InvalidArgument, SolverFailure
from .geometry import Mesh, refine_mesh


@dataclass(frozen=True)
class DofMap:
    """Dof counts; ``n_pressure`` defaults to the equal-order count."""

    n_scalar: int
    n_pressure: int | None = None

    def __post_init__(self):
        if self.n_pressure is None:
            object.__setattr__(self, "n_pressure", self.n_scalar)

    @classmethod
    def for_mesh(cls, mesh: Mesh) -> "DofMap":
        return cls(mesh.n_vertices)

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_scalar

    def velocity_dofs(self, nodes, component: int) -> np.ndarray:
        return component * self.n_scalar + np.asarray(nodes, dtype=np.int64)


def _element_geometry(mesh: Mesh):
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    # gradients of the barycentric coordinates
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], 1) / area2[:, None]
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], 1) / area2[:, None]
    return 0.5 * area2, bx, by


def _scatter(mesh: Mesh, local: np.ndarray, shape) -> sparse.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    A = sparse.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_scalar_mass(mesh: Mesh) -> sparse.csr_matrix:
    area, _, _ = _element_geometry(mesh)
    n = mesh.n_vertices
    return _scatter(mesh, area[:, None, None] * _MASS_REF, (n, n))


def assemble_scalar_stiffness(mesh: Mesh) -> sparse.csr_matrix:
    """Unit-coefficient Laplacian, ``(grad psi_i, grad psi_j)``."""
    area, bx, by = _element_geometry(mesh)
    local = area[:, None, None] * (bx[:, :, None] * bx[:, None, :] + by[:, :, None] * by[:, None, :])
    n = mesh.n_vertices
    return _scatter(mesh, local, (n, n))


def _derivative_blocks(mesh: Mesh):
    """``D_c[i, j] = (psi_i, d_c psi_j)`` for c = x, y."""
    area, bx, by = _element_geometry(mesh)
    n = mesh.n_vertices
    third = (area / 3.0)[:, None, None]
    dx = _scatter(mesh, third * np.broadcast_to(bx[:, None, :], (len(area), 3, 3)), (n, n))
    dy = _scatter(mesh, third * np.broadcast_to(by[:, None, :], (len(area), 3, 3)), (n, n))
    return dx, dy


def lumped_areas(mesh: Mesh) -> np.ndarray:
    area, _, _ = _element_geometry(mesh)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    return out


def _block_diag(A) -> sparse.csr_matrix:
    out = sparse.block_diag([A, A], format="csr")
    out.sort_indices()
    return out


def assemble_mass(mesh: Mesh, dofmap: DofMap | None = None) -> sparse.csr_matrix:
    """Vector mass matrix ``(psi_i, psi_j)`` on the 2N velocity dofs."""
    return _block_diag(assemble_scalar_mass(mesh))


def assemble_stiffness(mesh: Mesh, dofmap: DofMap | None = None) -> sparse.csr_matrix:
    """Vector stiffness with unit viscosity; callers scale by the viscosity."""
    return _block_diag(assemble_scalar_stiffness(mesh))


def assemble_divergence(mesh: Mesh, dofmap: DofMap | None = None) -> sparse.csr_matrix:
    """``L = (pi_i, div psi_j)``: pressure rows, 2N velocity columns."""
    dx, dy = _derivative_blocks(mesh)
    L = sparse.hstack([dx, dy], format="csr")
    L.sort_indices()
    return L


def assemble_gradient(mesh: Mesh, dofmap: DofMap | None = None) -> sparse.csr_matrix:
    """``G = (psi_i, grad pi_j)``: 2N velocity rows, pressure columns."""
    dx, dy = _derivative_blocks(mesh)
    G = sparse.vstack([dx, dy], format="csr")
    G.sort_indices()
    return G


def export_matrix_market(A, path) -> None:
    from scipy.io import mmwrite

    mmwrite(str(path), sparse.coo_matrix(A))


# --- Dirichlet conditions -----------------------------------------------

ValueFn = Callable[[float], np.ndarray]


class DirichletSet:
    """Constrained dofs with time-dependent prescribed values.

    ``values`` is either an array (constant in time) or a callable
    ``t -> array`` returning one value per dof.
    """

    def __init__(self, dofs: Iterable[int] = (), values: np.ndarray | ValueFn | None = None):
        self.dofs = np.asarray(list(dofs) if not isinstance(dofs, np.ndarray) else dofs, dtype=np.int64)
        if len(np.unique(self.dofs)) != len(self.dofs):
            raise InvalidArgument("Dirichlet dofs must be unique")
        if values is None:
            values = np.zeros(len(self.dofs))
        if not callable(values):
            const = np.asarray(values, dtype=np.float64)
            if const.shape != self.dofs.shape:
                raise InvalidArgument("one prescribed value per constrained dof is required")
            values = (lambda t, _c=const: _c)
        self._values = values

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, Callable[[float], float]]]) -> "DirichletSet":
        pairs = list(pairs)
        dofs = [d for d, _ in pairs]
        fns = [f for _, f in pairs]
        return cls(dofs, lambda t: np.array([f(t) for f in fns], dtype=np.float64))

    def __len__(self) -> int:
        return len(self.dofs)

    def values(self, t: float) -> np.ndarray:
        return np.asarray(self._values(t), dtype=np.float64).reshape(len(self.dofs))

    def check_range(self, n: int) -> None:
        if len(self.dofs) and (self.dofs.min() < 0 or self.dofs.max() >= n):
            raise InvalidArgument(f"Dirichlet dof index out of range [0, {n})")


def apply_dirichlet(matrix, rhs, bc: DirichletSet, t: float = 0.0):
    """Symmetric elimination: identity rows/columns on constrained dofs.

    Returns the modified ``(matrix, rhs)``; inputs are not mutated.
    """
    A = sparse.csr_matrix(matrix, copy=True)
    b = np.array(rhs, dtype=np.float64, copy=True)
    n = A.shape[0]
    bc.check_range(n)
    if len(bc) == 0:
        return A, b
    g = bc.values(t)
    b -= A[:, bc.dofs] @ g
    keep = np.ones(n)
    keep[bc.dofs] = 0.0
    P = sparse.diags(keep)
    E = sparse.diags(1.0 - keep)
    A = (P @ A @ P + E).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    b[bc.dofs] = g
    return A, b


class ConstrainedSolver:
    """Factorize ``matrix`` once with ``bc`` eliminated; solve for many right-hand sides.

    Used in time stepping where the operator is constant and only the
    right-hand side and the prescribed values change.
    """

    def __init__(self, matrix, bc: DirichletSet, tol: float = 1e-10):
        A = sparse.csr_matrix(matrix)
        self.n = A.shape[0]
        bc.check_range(self.n)
        self.bc = bc
        self.tol = tol
        self.coupling = A[:, bc.dofs].tocsr()
        self.A, _ = apply_dirichlet(A, np.zeros(self.n), DirichletSet(bc.dofs))
        self._solve = spla.factorized(self.A.tocsc())

    def solve(self, rhs: np.ndarray, t: float = 0.0, values: np.ndarray | None = None) -> np.ndarray:
        b = np.array(rhs, dtype=np.float64, copy=True)
        if len(self.bc):
            g = self.bc.values(t) if values is None else np.asarray(values, dtype=np.float64)
            b -= self.coupling @ g
            b[self.bc.dofs] = g
        x = self._solve(b)
        nb = np.linalg.norm(b)
        res = np.linalg.norm(self.A @ x - b)
        if nb > 0 and res > self.tol * nb:
            raise SolverFailure(f"direct solve residual {res / nb:.3e} above tolerance", residual=res / nb)
        return x


def solve_spd(matrix, rhs, tol: float = 1e-10, max_iter: int = 10000, x0=None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    Raises :class:`SolverFailure` carrying the final relative residual if
    ``tol`` is not met within ``max_iter`` iterations.
    """
    A = sparse.csr_matrix(matrix)
    b = np.asarray(rhs, dtype=np.float64)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverFailure("matrix has a non-positive diagonal entry; not SPD", residual=np.inf)
    inv_d = 1.0 / diag
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    z = inv_d * r
    d = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * nb:
            return x
        Ad = A @ d
        alpha = rz / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        z = inv_d * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    rel = np.linalg.norm(b - A @ x) / nb
    if rel <= tol:
        return x
    raise SolverFailure(f"CG did not converge in {max_iter} iterations (residual {rel:.3e})", residual=rel)


@dataclass(frozen=True, eq=False)
class MixedSpace:
    """P1-iso-P2 velocity / P1 pressure pair.

    Velocity is P1 on the uniformly refined ``velocity_mesh``; pressure is
    P1 on the geometry ``mesh``.  ``prolongation`` maps coarse pressure
    values to the refined vertices, where they represent the same function.
    """

    mesh: Mesh
    velocity_mesh: Mesh
    prolongation: sparse.csr_matrix

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "MixedSpace":
        fine, P = refine_mesh(mesh)
        return cls(mesh, fine, P)

    @property
    def dofmap(self) -> DofMap:
        return DofMap(self.velocity_mesh.n_vertices, self.mesh.n_vertices)
