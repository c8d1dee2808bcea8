"""Transient Stokes solver with the incremental pressure-correction scheme.

Each step performs

1. tentative velocity: ``(rho/dt M + mu K) u* = rho/dt M u^n + L^T p^n + M f^{n+1}``
   with velocity Dirichlet data imposed,
2. pressure increment: ``K_s phi = -(rho/dt) L u*`` (natural condition
   except where a boundary pins the pressure),
3. projection: ``M u^{n+1} = M u* - (dt/rho) G phi`` and ``p^{n+1} = p^n + phi``.

Velocity is P1 on the once-refined mesh and pressure P1 on the geometry
mesh (P1-iso-P2), which keeps the pair inf-sup stable for any time step.

The viscous term uses ``mu`` times the unit stiffness (Laplacian form).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import binio
from .errors import InvalidArgument, InvalidConfiguration, OutsideDomain, SolverFailure
from .fem import (ConstrainedSolver, DirichletSet, DofMap, MixedSpace, assemble_divergence, assemble_gradient,
                  assemble_mass, assemble_scalar_mass, assemble_scalar_stiffness, assemble_stiffness)
from .geometry import BoundaryTag, Mesh, locate_point

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"VMTRAJ\x00\x01"
TRAJ_VERSION = 1

# (x, y, t) -> (ux, uy) evaluated on arrays of node coordinates
VectorField = Callable[[np.ndarray, np.ndarray, float], tuple]
ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise InvalidArgument(f"density and viscosity must be positive (rho={self.rho}, mu={self.mu})")


@dataclass(frozen=True)
class BoundaryCondition:
    """Per-tag condition.

    kind is one of ``no-slip``, ``velocity`` (prescribed ``profile``),
    ``symmetry`` (zero normal velocity on a horizontal axis) or ``open``
    (natural velocity condition, optional Dirichlet ``pressure``).
    """

    kind: str
    profile: VectorField | None = None
    pressure: float | None = None

    def __post_init__(self):
        if self.kind not in ("no-slip", "velocity", "symmetry", "open"):
            raise InvalidArgument(f"unknown boundary condition kind {self.kind!r}")
        if self.kind == "velocity" and self.profile is None:
            raise InvalidArgument("velocity boundary condition needs a profile")


NO_SLIP = BoundaryCondition("no-slip")


def _zero_vector(x, y, t):
    return np.zeros_like(x), np.zeros_like(x)


def _zero_scalar(x, y):
    return np.zeros_like(x)


@dataclass
class ProblemInputs:
    params: FluidParams
    boundary_spec: dict
    body_force: VectorField = _zero_vector
    initial_velocity: Callable = _zero_vector  # (x, y, 0) -> (ux, uy)
    initial_pressure: ScalarField = _zero_scalar
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    tau: float
    linear_tol: float = 1e-10
    max_iter: int = 10000

    def __post_init__(self):
        if not (0 < self.dt <= self.tau):
            raise InvalidArgument(f"need 0 < dt <= tau (dt={self.dt}, tau={self.tau})")

    @property
    def n_steps(self) -> int:
        return int(round(self.tau / self.dt))


@dataclass
class Trajectory:
    times: np.ndarray
    velocity_frames: np.ndarray   # (n_frames, 2N) on the velocity mesh
    pressure_frames: np.ndarray   # (n_frames, N) pressure prolongated to the velocity mesh
    dt: float = 0.0
    tau: float = 0.0
    params: dict = field(default_factory=dict)
    # per step: (|L u*|, |L u^{n+1}|)
    divergence_history: np.ndarray | None = None

    def frame(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.velocity_frames[k], self.pressure_frames[k]


def lid_profile(f: float, x1, t: float):
    """Lid x-velocity ``8 f (1 + tanh(8 (t - 1/2))) x1^2 (1 - x1)^2``."""
    x1 = np.asarray(x1, dtype=np.float64)
    return 8.0 * f * (1.0 + math.tanh(8.0 * (t - 0.5))) * x1 ** 2 * (1.0 - x1) ** 2


# --- boundary bookkeeping -----------------------------------------------

_PRIORITY = {"open": 0, "symmetry": 1, "velocity": 2, "no-slip": 3}


def velocity_dirichlet(mesh: Mesh, dofmap: DofMap, boundary_spec: dict) -> DirichletSet:
    missing = mesh.tags_present() - set(boundary_spec)
    if missing:
        raise InvalidConfiguration(f"boundary_spec misses tags {sorted(t.name for t in missing)}")
    # each node takes the strongest condition among the tags touching it
    owner: dict[int, BoundaryCondition] = {}
    for tag in sorted(mesh.tags_present()):
        bc = boundary_spec[tag]
        for node in mesh.boundary_nodes(tag).tolist():
            cur = owner.get(node)
            if cur is None or _PRIORITY[bc.kind] > _PRIORITY[cur.kind]:
                owner[node] = bc
    N = dofmap.n_scalar
    xy = mesh.vertices
    groups: dict[int, list[int]] = {}
    dofs, blocks = [], []
    for node in sorted(owner):
        bc = owner[node]
        if bc.kind in ("no-slip", "velocity"):
            dofs.extend([node, N + node])
        elif bc.kind == "symmetry":
            dofs.append(N + node)
    for node in sorted(owner):
        groups.setdefault(id(owner[node]), []).append(node)
    dofs = np.array(dofs, dtype=np.int64)
    position = {d: k for k, d in enumerate(dofs.tolist())}
    for nodes in groups.values():
        bc = owner[nodes[0]]
        if bc.kind == "velocity":
            nodes = np.array(nodes)
            blocks.append((bc.profile, nodes,
                           np.array([position[n] for n in nodes]), np.array([position[N + n] for n in nodes])))

    def values(t):
        out = np.zeros(len(dofs))
        for profile, nodes, ix, iy in blocks:
            ux, uy = profile(xy[nodes, 0], xy[nodes, 1], t)
            out[ix] = ux
            out[iy] = uy
        return out

    return DirichletSet(dofs, values)


def pressure_dirichlet_nodes(mesh: Mesh, boundary_spec: dict) -> tuple[np.ndarray, np.ndarray]:
    nodes, vals = [], []
    for tag in sorted(mesh.tags_present()):
        bc = boundary_spec[tag]
        if bc.kind == "open" and bc.pressure is not None:
            for n in mesh.boundary_nodes(tag).tolist():
                nodes.append(n)
                vals.append(bc.pressure)
    nodes = np.array(nodes, dtype=np.int64)
    nodes, first = np.unique(nodes, return_index=True)
    return nodes, np.array(vals, dtype=np.float64)[first]


# --- time stepping ------------------------------------------------------

def solve_transient(space: MixedSpace | Mesh, inputs: ProblemInputs, config: SolverConfig,
                    record_times=None) -> Trajectory:
    """Run the projection scheme from t = 0 to ``config.tau``.

    Velocity lives on ``space.velocity_mesh``; pressure frames are returned
    prolongated to the same vertices, so every frame is a P1 field there.
    With ``record_times`` only frames at t = 0 and at those times are kept
    (linear interpolation between the bracketing steps, exact when a time
    falls on a step); otherwise every step is stored.
    """
    if isinstance(space, Mesh):
        space = MixedSpace.from_mesh(space)
    rho, mu = inputs.params.rho, inputs.params.mu
    dt = config.dt
    n_steps = config.n_steps
    if abs(n_steps * dt - config.tau) > 1e-9 * config.tau:
        raise InvalidArgument("tau must be an integer multiple of dt")
    fine, coarse, P = space.velocity_mesh, space.mesh, space.prolongation
    N = fine.n_vertices
    x, y = fine.vertices[:, 0], fine.vertices[:, 1]

    M = assemble_mass(fine)
    K = assemble_stiffness(fine)
    PT = P.T.tocsr()
    Ks = (PT @ assemble_scalar_stiffness(fine) @ P).tocsr()
    L = (PT @ assemble_divergence(fine)).tocsr()
    G = (assemble_gradient(fine) @ P).tocsr()
    LT = L.T.tocsr()
    weights = np.asarray(PT @ assemble_scalar_mass(fine).sum(axis=1)).ravel()
    area = weights.sum()

    vel_bc = velocity_dirichlet(fine, space.dofmap, inputs.boundary_spec)
    p_nodes, p_vals = pressure_dirichlet_nodes(coarse, inputs.boundary_spec)
    pure_neumann = len(p_nodes) == 0
    if pure_neumann:
        # pin one node; the mean is removed afterwards
        p_nodes, p_vals = np.array([0]), np.array([0.0])

    momentum = ConstrainedSolver(rho / dt * M + mu * K, vel_bc, tol=config.linear_tol)
    projection = ConstrainedSolver(M, vel_bc, tol=config.linear_tol)
    poisson = ConstrainedSolver(Ks, DirichletSet(p_nodes), tol=config.linear_tol)

    ux0, uy0 = inputs.initial_velocity(x, y, 0.0)
    u = np.concatenate([np.broadcast_to(ux0, (N,)), np.broadcast_to(uy0, (N,))]).astype(np.float64)
    cx, cy = coarse.vertices[:, 0], coarse.vertices[:, 1]
    p = np.array(np.broadcast_to(inputs.initial_pressure(cx, cy), (coarse.n_vertices,)), dtype=np.float64)

    def forcing(t):
        fx, fy = inputs.body_force(x, y, t)
        return np.concatenate([np.broadcast_to(fx, (N,)), np.broadcast_to(fy, (N,))]).astype(np.float64)

    times = [0.0]
    u_frames = [u.copy()]
    p_frames = [P @ p]
    wanted = None if record_times is None else list(np.sort(np.asarray(record_times, dtype=np.float64)))
    if wanted and (wanted[0] <= 0 or wanted[-1] > config.tau * (1 + 1e-12)):
        raise InvalidArgument("record_times must lie in (0, tau]")

    div_history = []
    for step in range(1, n_steps + 1):
        t = step * dt
        try:
            rhs = rho / dt * (M @ u) + LT @ p + M @ forcing(t)
            u_star = momentum.solve(rhs, t)
            phi = poisson.solve(-(rho / dt) * (L @ u_star), t, values=p_vals - p[p_nodes])
            if pure_neumann:
                phi -= (weights @ phi) / area
            u_new = projection.solve(M @ u_star - (dt / rho) * (G @ phi), t)
        except SolverFailure as exc:
            raise SolverFailure(f"step {step}: {exc}", residual=exc.residual, step=step) from exc
        p_new = p + phi
        div_history.append((np.linalg.norm(L @ u_star), np.linalg.norm(L @ u_new)))
        if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(p_new))):
            raise SolverFailure(f"step {step}: non-finite solution", step=step)
        if wanted is None:
            times.append(t)
            u_frames.append(u_new.copy())
            p_frames.append(P @ p_new)
        else:
            while wanted and wanted[0] <= t + 1e-12 * config.tau:
                tw = wanted.pop(0)
                s = min(max((tw - (t - dt)) / dt, 0.0), 1.0)
                times.append(tw)
                if s >= 1.0 - 1e-12:
                    u_frames.append(u_new.copy())
                    p_frames.append(P @ p_new)
                else:
                    u_frames.append((1 - s) * u + s * u_new)
                    p_frames.append(P @ ((1 - s) * p + s * p_new))
        u, p = u_new, p_new

    return Trajectory(np.array(times), np.array(u_frames), np.array(p_frames), dt=dt, tau=config.tau,
                      params={"rho": rho, "mu": mu, **inputs.meta}, divergence_history=np.array(div_history))


def evaluate_field(mesh: Mesh, dofmap: DofMap, frame, p) -> tuple[float, float, float]:
    """P1 interpolation of a ``(velocity, pressure)`` frame at point ``p``."""
    u, pr = frame
    hit = locate_point(mesh, p)
    if hit is None:
        raise OutsideDomain(f"point {tuple(p)} is outside the domain")
    tri, lam = hit
    nodes = mesh.triangles[tri]
    N = dofmap.n_scalar
    return (float(lam @ u[nodes]), float(lam @ u[N + nodes]), float(lam @ pr[nodes]))


# --- experiment set-ups -------------------------------------------------

def uniform_force(fx: float, fy: float = 0.0) -> VectorField:
    def force(x, y, t):
        return np.full_like(x, fx), np.full_like(x, fy)
    return force


def experiment_inputs(geometry: str, mu: float, amplitude: float, rho: float = 1.0) -> ProblemInputs:
    """Inputs of the three benchmark flows, all started from rest.

    cavity: lid-driven with amplitude ``amplitude``; cylinder and
    contraction: uniform body force ``(amplitude, 0)``, and open inlet and
    outlet sections, both held at zero pressure.
    """
    params = FluidParams(rho=rho, mu=mu)
    meta = {"geometry": geometry, "amplitude": amplitude}
    if geometry == "cavity":
        def lid(x, y, t):
            return lid_profile(amplitude, x, t), np.zeros_like(x)
        spec = {BoundaryTag.LID: BoundaryCondition("velocity", profile=lid), BoundaryTag.WALL: NO_SLIP}
        return ProblemInputs(params, spec, meta=meta)
    if geometry in ("cylinder", "contraction"):
        spec = {
            BoundaryTag.INLET: BoundaryCondition("open", pressure=0.0),
            BoundaryTag.OUTLET: BoundaryCondition("open", pressure=0.0),
            BoundaryTag.WALL: NO_SLIP,
            BoundaryTag.CYLINDER: NO_SLIP,
            BoundaryTag.SYMMETRY_AXIS: BoundaryCondition("symmetry"),
        }
        return ProblemInputs(params, spec, body_force=uniform_force(amplitude), meta=meta)
    raise InvalidArgument(f"unknown geometry {geometry!r}")


# --- persistence --------------------------------------------------------

def save_trajectory(traj: Trajectory, path) -> None:
    header = {"dt": traj.dt, "tau": traj.tau, "params": traj.params,
              "n_frames": len(traj.times), "n_velocity": traj.velocity_frames.shape[1],
              "n_pressure": traj.pressure_frames.shape[1]}
    binio.write(path, TRAJ_MAGIC, TRAJ_VERSION, header, {
        "times": traj.times, "velocity": traj.velocity_frames, "pressure": traj.pressure_frames})


def load_trajectory(path) -> Trajectory:
    header, arrays = binio.read(Path(path), TRAJ_MAGIC, TRAJ_VERSION)
    return Trajectory(arrays["times"], arrays["velocity"], arrays["pressure"],
                      dt=header["dt"], tau=header["tau"], params=header["params"])
