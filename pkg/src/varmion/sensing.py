"""Sensor readings, parameter sampling, quadrature weights and datasets.

A dataset holds ``J`` solver runs sampled on one shared space-time output
lattice.  Targets are stored time-major, matching
:meth:`OutputLattice.nodes`: node ``i * L + l`` is point ``l`` at time ``i``.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import InvalidArgument, InvalidConfiguration, OutsideDomain, SolverFailure
from .fem import MixedSpace
from .geometry import (BoundaryTag, Mesh, OutputLattice, build_mesh, in_holes, interpolation_matrix,
                       locate_point, uniform_times)
from .ipcs import _PRIORITY, ProblemInputs, SolverConfig, experiment_inputs, solve_transient

log = logging.getLogger(__name__)

DATASET_MAGIC = b"VMDSET\x00\x01"
DATASET_VERSION = 1

PARAMETER_RANGES = {
    "cavity": ((1.1, 10.0), (0.02, 0.9)),
    "cylinder": ((1.1, 10.0), (80.0, 720.0)),
    "contraction": ((1.1, 10.0), (80.0, 720.0)),
}

SENSING_MODES = ("amplitude", "field")


def _boundary_distance(mesh: Mesh, pts: np.ndarray):
    """Distance of each point to every boundary edge, shape (n_points, n_edges)."""
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    d = b - a
    rel = pts[:, None, :] - a[None]
    s = np.clip(np.einsum("pek,ek->pe", rel, d) / np.einsum("ek,ek->e", d, d), 0.0, 1.0)
    return np.linalg.norm(rel - s[..., None] * d[None], axis=-1)


@dataclass(frozen=True, eq=False)
class SensorLayout:
    """Sensor positions; ``boundary_tag_mask`` marks the tags touching each boundary sensor."""

    time_nodes: np.ndarray
    interior_nodes: np.ndarray
    boundary_nodes: np.ndarray
    boundary_tag_mask: np.ndarray

    @property
    def r(self) -> int:
        return len(self.time_nodes)

    @property
    def k(self) -> int:
        return len(self.interior_nodes)

    @property
    def k_boundary(self) -> int:
        return len(self.boundary_nodes)

    @property
    def dims(self) -> dict:
        """Lengths of the sensed vectors ``(F, G, U0, P0)``."""
        return {"f": 2 * self.k * self.r, "g": 2 * self.k_boundary * self.r, "u0": 2 * self.k, "p0": self.k}

    @classmethod
    def build(cls, mesh: Mesh, time_nodes, interior_nodes, boundary_nodes) -> "SensorLayout":
        t = np.atleast_1d(np.asarray(time_nodes, dtype=np.float64))
        xi = np.atleast_2d(np.asarray(interior_nodes, dtype=np.float64))
        xb = np.atleast_2d(np.asarray(boundary_nodes, dtype=np.float64))
        if len(t) < 1 or len(xi) < 1 or len(xb) < 1:
            raise InvalidArgument("a sensor layout needs at least one time, interior and boundary node")
        for p in xi:
            if locate_point(mesh, p) is None or in_holes(mesh, p[None])[0]:
                raise OutsideDomain(f"interior sensor ({p[0]:.6g}, {p[1]:.6g}) is outside the domain")
        x0, y0, x1, y1 = mesh.bounding_box()
        tol = 1e-9 * max(x1 - x0, y1 - y0)
        dist = _boundary_distance(mesh, xb)
        masks = np.zeros(len(xb), dtype=np.int64)
        for n in range(len(xb)):
            near = np.nonzero(dist[n] <= tol)[0]
            if near.size == 0:
                raise OutsideDomain(f"boundary sensor ({xb[n, 0]:.6g}, {xb[n, 1]:.6g}) is not on the boundary")
            for tag in np.unique(mesh.boundary_tags[near]):
                masks[n] |= 1 << int(tag)
        return cls(t, xi, xb, masks)

    @classmethod
    def from_lattice(cls, mesh: Mesh, lattice: OutputLattice, r: int = 16) -> "SensorLayout":
        """Interior sensors at the lattice points, ``r`` uniform times, boundary sensors at boundary vertices."""
        return cls.build(mesh, uniform_times(lattice.tau, r), lattice.points,
                         mesh.vertices[mesh.all_boundary_nodes()])

    @classmethod
    def compressed(cls, mesh: Mesh, lattice: OutputLattice) -> "SensorLayout":
        """One sensor of each kind; enough for spatially uniform scalar forcing."""
        centre = np.mean(lattice.points, axis=0)
        pick = lattice.points[np.argmin(np.linalg.norm(lattice.points - centre, axis=1))]
        corner = mesh.vertices[mesh.boundary_edges[0, 0]]
        return cls.build(mesh, [lattice.tau], pick, corner)

    def to_arrays(self, prefix: str = "layout_") -> dict:
        return {prefix + "times": self.time_nodes, prefix + "interior": self.interior_nodes,
                prefix + "boundary": self.boundary_nodes, prefix + "boundary_tags": self.boundary_tag_mask}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "layout_") -> "SensorLayout":
        return cls(arrays[prefix + "times"], arrays[prefix + "interior"].reshape(-1, 2),
                   arrays[prefix + "boundary"].reshape(-1, 2), arrays[prefix + "boundary_tags"])


@dataclass
class SensedSample:
    rho: float
    mu: float
    F_hat: np.ndarray
    U0_hat: np.ndarray
    P0_hat: np.ndarray
    G_hat: np.ndarray


def _stack_pairs(field_fn, nodes: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Component-blocked readings over (node, time) pairs, node-major."""
    x = np.repeat(nodes[:, 0], len(times))
    y = np.repeat(nodes[:, 1], len(times))
    t = np.tile(times, len(nodes))
    out_x = np.empty(len(x))
    out_y = np.empty(len(x))
    for tv in np.unique(t):
        sel = t == tv
        fx, fy = field_fn(x[sel], y[sel], float(tv))
        out_x[sel] = np.broadcast_to(fx, (int(sel.sum()),))
        out_y[sel] = np.broadcast_to(fy, (int(sel.sum()),))
    return np.concatenate([out_x, out_y])


def _boundary_value(inputs: ProblemInputs, mask: int, x: float, y: float, t: float):
    """Prescribed velocity at a boundary point; unprescribed components read as zero."""
    best = None
    for tag in BoundaryTag:
        if mask & (1 << int(tag)) and tag in inputs.boundary_spec:
            bc = inputs.boundary_spec[tag]
            if best is None or _PRIORITY[bc.kind] > _PRIORITY[best.kind]:
                best = bc
    if best is None:
        raise InvalidConfiguration("boundary sensor touches no tag of the boundary specification")
    if best.kind == "velocity":
        ux, uy = best.profile(np.array([x]), np.array([y]), t)
        return float(np.asarray(ux).ravel()[0]), float(np.asarray(uy).ravel()[0])
    return 0.0, 0.0


def sense(inputs: ProblemInputs, layout: SensorLayout) -> SensedSample:
    """Evaluate the input fields at the sensor nodes."""
    F = _stack_pairs(inputs.body_force, layout.interior_nodes, layout.time_nodes)
    xi = layout.interior_nodes
    ux, uy = inputs.initial_velocity(xi[:, 0], xi[:, 1], 0.0)
    U0 = np.concatenate([np.broadcast_to(ux, (layout.k,)), np.broadcast_to(uy, (layout.k,))]).astype(np.float64)
    P0 = np.array(np.broadcast_to(inputs.initial_pressure(xi[:, 0], xi[:, 1]), (layout.k,)), dtype=np.float64)
    gx, gy = [], []
    for (x, y), mask in zip(layout.boundary_nodes, layout.boundary_tag_mask):
        for t in layout.time_nodes:
            vx, vy = _boundary_value(inputs, int(mask), float(x), float(y), float(t))
            gx.append(vx)
            gy.append(vy)
    G = np.array(gx + gy, dtype=np.float64)
    return SensedSample(inputs.params.rho, inputs.params.mu, F, U0, P0, G)


def amplitude_readings(amplitude: float, layout: SensorLayout) -> np.ndarray:
    """Forcing vector for spatially uniform scalar forcing: ``(a, ..., a, 0, ..., 0)``."""
    n = layout.k * layout.r
    return np.concatenate([np.full(n, float(amplitude)), np.zeros(n)])


def sense_experiment(geometry: str, layout: SensorLayout, sensing: str, mu: float, amplitude: float,
                     rho: float = 1.0) -> SensedSample:
    """Sensor readings of one benchmark problem, as stored in datasets."""
    s = sense(experiment_inputs(geometry, mu, amplitude, rho=rho), layout)
    if sensing == "amplitude":
        s.F_hat = amplitude_readings(amplitude, layout)
    return s


def sample_parameters(rng: np.random.Generator, experiment: str) -> tuple[float, float]:
    """Uniform draw of ``(viscosity, forcing amplitude)`` for the experiment."""
    if experiment not in PARAMETER_RANGES:
        raise InvalidArgument(f"unknown experiment {experiment!r}")
    (m0, m1), (f0, f1) = PARAMETER_RANGES[experiment]
    mu = rng.uniform(m0, m1)
    f = rng.uniform(f0, f1)
    return float(mu), float(f)


def quadrature_weights(lattice: OutputLattice) -> np.ndarray:
    """Cell-area times time-slice weights on the lattice nodes (time-major).

    Each retained point stands for its lattice cell, each output time for the
    interval back to the previous one (or to zero).
    """
    if lattice.nx < 2 or lattice.ny < 2 or lattice.n_times < 1:
        raise InvalidConfiguration("degenerate lattice: need at least two points per direction")
    hx, hy = lattice.spacing
    dt = np.diff(np.concatenate([[0.0], lattice.times]))
    return np.outer(dt, np.full(lattice.n_points, hx * hy)).ravel()


# --- datasets -----------------------------------------------------------

_RECORD_FIELDS = ("rho", "mu", "amplitude", "F", "U0", "P0", "G", "targets", "record_ids")


@dataclass(eq=False)
class Dataset:
    geometry: str
    mesh_params: dict
    solver: dict
    layout: SensorLayout
    lattice: OutputLattice
    weights: np.ndarray
    sensing: str
    seed: int
    rho: np.ndarray
    mu: np.ndarray
    amplitude: np.ndarray
    F: np.ndarray
    U0: np.ndarray
    P0: np.ndarray
    G: np.ndarray
    targets: np.ndarray          # (J, M * L, 3)
    record_ids: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def n_records(self) -> int:
        return len(self.rho)

    @property
    def n_target_triples(self) -> int:
        return int(self.targets.shape[0] * self.targets.shape[1])

    def sample(self, j: int) -> SensedSample:
        return SensedSample(float(self.rho[j]), float(self.mu[j]), self.F[j], self.U0[j], self.P0[j], self.G[j])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        kw = {name: getattr(self, name)[idx] for name in _RECORD_FIELDS}
        return Dataset(self.geometry, dict(self.mesh_params), dict(self.solver), self.layout, self.lattice,
                       self.weights, self.sensing, self.seed, failures=list(self.failures), **kw)

    def build_mesh(self) -> Mesh:
        return build_mesh(self.geometry, **self.mesh_params)

    def header(self) -> dict:
        return {"geometry": self.geometry, "mesh_params": self.mesh_params, "solver": self.solver,
                "sensing": self.sensing, "seed": self.seed, "lattice": self.lattice.to_dict(),
                "failures": [[int(j), str(msg)] for j, msg in self.failures]}

    def arrays(self) -> dict:
        out = {name: getattr(self, name) for name in _RECORD_FIELDS}
        out.update(self.layout.to_arrays())
        out.update({"lattice_points": self.lattice.points, "lattice_times": self.lattice.times,
                    "lattice_mask": self.lattice.membership_mask, "weights": self.weights})
        return out

    def to_bytes(self) -> bytes:
        return binio.dumps(DATASET_MAGIC, DATASET_VERSION, self.header(), self.arrays())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.header() != other.header():
            return False
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a)

    __hash__ = None


def save_dataset(ds: Dataset, path) -> bytes:
    return binio.write(path, DATASET_MAGIC, DATASET_VERSION, ds.header(), ds.arrays())


def load_dataset(path) -> Dataset:
    header, arrays = binio.read(path, DATASET_MAGIC, DATASET_VERSION)
    lat = header["lattice"]
    lattice = OutputLattice(arrays["lattice_points"].reshape(-1, 2), arrays["lattice_times"],
                            arrays["lattice_mask"], tuple(lat["bbox"]), lat["nx"], lat["ny"], lat["tau"])
    kw = {name: arrays[name] for name in _RECORD_FIELDS}
    return Dataset(header["geometry"], header["mesh_params"], header["solver"], SensorLayout.from_arrays(arrays),
                   lattice, arrays["weights"], header["sensing"], header["seed"],
                   failures=[tuple(f) for f in header["failures"]], **kw)


# state of a generation worker: set once per process
_WORKER: dict = {}


def _init_worker(mesh, layout, lattice, config, sensing, seed, rho, amplitude_override):
    space = MixedSpace.from_mesh(mesh)
    _WORKER.update(mesh=mesh, space=space, layout=layout, lattice=lattice, config=config, sensing=sensing,
                   seed=seed, rho=rho, override=amplitude_override,
                   interp=interpolation_matrix(space.velocity_mesh, lattice.points))


def _generate_record(j: int):
    w = _WORKER
    geometry = w["mesh"].geometry
    # steps 1-2: draw the parameters and set up the input functions
    rng = np.random.default_rng([w["seed"], j])
    mu, amp = sample_parameters(rng, geometry)
    if w["override"] is not None:
        amp = float(w["override"])
    inputs = experiment_inputs(geometry, mu, amp, rho=w["rho"])
    # step 3: reference solution
    try:
        traj = solve_transient(w["space"], inputs, w["config"], record_times=w["lattice"].times)
    except SolverFailure as exc:
        return j, None, f"{type(exc).__name__}: {exc}"
    # step 4: sample it on the output nodes; pressure relative to its initial value
    interp = w["interp"]
    N = w["space"].velocity_mesh.n_vertices
    u = traj.velocity_frames[1:]
    p = traj.pressure_frames[1:] - traj.pressure_frames[0]
    targets = np.stack([u[:, :N] @ interp.T, u[:, N:] @ interp.T, p @ interp.T], axis=-1)
    # step 5: sensor readings
    s = sense_experiment(geometry, w["layout"], w["sensing"], mu, amp, rho=w["rho"])
    return j, (inputs.params.rho, mu, amp, s, targets.reshape(-1, 3)), None


def generate_dataset(mesh: Mesh, J: int, layout: SensorLayout, lattice: OutputLattice, config: SolverConfig,
                     seed: int, *, sensing: str = "amplitude", amplitude_override: float | None = None,
                     rho: float = 1.0, workers: int = 1) -> Dataset:
    """Solve ``J`` sampled problems and collect sensor readings and targets.

    Record ``j`` draws its parameters from a generator seeded with
    ``(seed, j)``, so results do not depend on ``workers``.  A record whose
    solve fails is skipped and listed in ``failures``.
    """
    if J < 1:
        raise InvalidArgument("J must be at least 1")
    if sensing not in SENSING_MODES:
        raise InvalidArgument(f"sensing must be one of {SENSING_MODES}")
    if mesh.geometry not in PARAMETER_RANGES:
        raise InvalidArgument(f"no parameter ranges for geometry {mesh.geometry!r}")
    if abs(lattice.tau - config.tau) > 1e-12 * config.tau:
        raise InvalidConfiguration("lattice and solver must share the final time")
    init = (mesh, layout, lattice, config, sensing, seed, rho, amplitude_override)
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=init) as pool:
            results = list(pool.map(_generate_record, range(J)))
    else:
        _init_worker(*init)
        results = [_generate_record(j) for j in range(J)]
    _WORKER.clear()

    ok = [(j, rec) for j, rec, _ in results if rec is not None]
    failures = [(j, msg) for j, rec, msg in results if rec is None]
    for j, msg in failures:
        log.warning("record %d skipped: %s", j, msg)
    log.info("generated %d of %d records", len(ok), J)
    if not ok:
        raise SolverFailure(f"all {J} records failed")
    recs = [r for _, r in ok]
    return Dataset(
        geometry=mesh.geometry, mesh_params=dict(mesh.params),
        solver={"dt": config.dt, "tau": config.tau, "linear_tol": config.linear_tol},
        layout=layout, lattice=lattice, weights=quadrature_weights(lattice), sensing=sensing, seed=int(seed),
        rho=np.array([r[0] for r in recs]), mu=np.array([r[1] for r in recs]),
        amplitude=np.array([r[2] for r in recs]),
        F=np.stack([r[3].F_hat for r in recs]), U0=np.stack([r[3].U0_hat for r in recs]),
        P0=np.stack([r[3].P0_hat for r in recs]), G=np.stack([r[3].G_hat for r in recs]),
        targets=np.stack([r[4] for r in recs]), record_ids=np.array([j for j, _ in ok], dtype=np.int64),
        failures=failures,
    )


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint record-level (train, validation, test) partition."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidArgument("fractions must be three non-negative numbers summing to 1")
    J = ds.n_records
    n_train = int(round(fr[0] * J))
    n_val = int(round(fr[1] * J))
    n_test = J - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgument(f"split of {J} records by {tuple(fr)} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(J)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(ds.subset(np.sort(p)) for p in parts)
