"""Relative L2 errors, error statistics and plot-ready CSV exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateReference, InvalidArgument
from .fem import MixedSpace
from .geometry import interpolation_matrix
from .ipcs import experiment_inputs, SolverConfig, solve_transient
from .network import BranchInputs, VarMiON, predict

HISTOGRAM_BINS = 30
PERTURBATION_GEOMETRIES = ("cylinder", "contraction")


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    initial: tuple | None = None     # (train, validation) before the first update

    def append(self, train: float, validation: float) -> None:
        self.train.append(float(train))
        self.validation.append(float(validation))

    def __len__(self) -> int:
        return len(self.train)

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation,
                "initial": list(self.initial) if self.initial is not None else None}

    @classmethod
    def from_dict(cls, d: dict) -> "LossHistory":
        init = d.get("initial")
        return cls(list(d["train"]), list(d["validation"]), tuple(init) if init is not None else None)

    def relative_spread(self, last: int) -> float:
        """``(max - min) / mean`` of the validation loss over the last ``last`` epochs."""
        tail = np.asarray(self.validation[-last:])
        return float((tail.max() - tail.min()) / tail.mean())


def relative_l2_error(prediction, reference, weights) -> float:
    """Weighted relative L2 error over all nodes and components.

    ``prediction`` and ``reference`` have shape ``(n_nodes, n_components)``
    (or ``(n_nodes,)``); ``weights`` has one entry per node.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape != ref.shape or pred.shape[0] != w.shape[0]:
        raise InvalidArgument(f"shape mismatch: prediction {pred.shape}, reference {ref.shape}, weights {w.shape}")
    w = w.reshape((-1,) + (1,) * (ref.ndim - 1))
    den = float(np.sum(w * ref * ref))
    if not den > 0.0:
        raise DegenerateReference("reference field has zero weighted norm")
    return float(np.sqrt(np.sum(w * (pred - ref) ** 2) / den))


@dataclass
class ErrorReport:
    errors: np.ndarray
    mean: float
    std: float
    bin_edges: np.ndarray
    density: np.ndarray
    record_ids: np.ndarray | None = None

    @classmethod
    def from_errors(cls, errors, record_ids=None, bins: int = HISTOGRAM_BINS) -> "ErrorReport":
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            raise InvalidArgument("no errors to report")
        lo, hi = float(e.min()), float(e.max())
        density, edges = np.histogram(e, bins=bins, range=(lo, hi) if hi > lo else None, density=True)
        return cls(e, float(e.mean()), float(e.std()), edges, density,
                   None if record_ids is None else np.asarray(record_ids))

    def to_dict(self) -> dict:
        return {
            "n_records": int(self.errors.size), "mean": self.mean, "std": self.std,
            "errors": self.errors.tolist(),
            "record_ids": None if self.record_ids is None else self.record_ids.tolist(),
            "histogram": {"bin_edges": self.bin_edges.tolist(), "density": self.density.tolist()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def record_errors(model: VarMiON, ds) -> np.ndarray:
    pred = predict(model.params, BranchInputs.from_dataset(model.config, ds), ds.lattice.nodes())
    return np.array([relative_l2_error(pred[j], ds.targets[j], ds.weights) for j in range(ds.n_records)])


def error_report(model: VarMiON, ds) -> ErrorReport:
    """Per-record relative error on a split, with mean, population std and histogram."""
    if ds.n_records == 0:
        raise InvalidArgument("empty split")
    return ErrorReport.from_errors(record_errors(model, ds), ds.record_ids)


# --- comparisons --------------------------------------------------------------

def reference_fields(ds, j: int, times, points) -> np.ndarray:
    """Re-solve record ``j`` and sample ``(u1, u2, p)`` at ``points`` x ``times``.

    Returns shape ``(n_times, n_points, 3)``; the pressure is taken relative
    to its initial value for the channel geometries.
    """
    times = np.asarray(times, dtype=np.float64)
    tau = ds.solver["tau"]
    if times.size == 0 or np.any(times <= 0) or np.any(times > tau * (1 + 1e-12)):
        raise InvalidArgument(f"comparison times must lie in (0, {tau}]")
    order = np.argsort(times)
    if np.any(np.diff(times[order]) == 0):
        raise InvalidArgument("comparison times must be distinct")
    space = MixedSpace.from_mesh(ds.build_mesh())
    interp = interpolation_matrix(space.velocity_mesh, points)
    inputs = experiment_inputs(ds.geometry, float(ds.mu[j]), float(ds.amplitude[j]), rho=float(ds.rho[j]))
    cfg = SolverConfig(ds.solver["dt"], tau, ds.solver.get("linear_tol", 1e-10))
    traj = solve_transient(space, inputs, cfg, record_times=times[order])
    N = space.velocity_mesh.n_vertices
    u = traj.velocity_frames[1:]
    p = traj.pressure_frames[1:]
    if ds.geometry in PERTURBATION_GEOMETRIES:
        p = p - traj.pressure_frames[0]
    out = np.stack([u[:, :N] @ interp.T, u[:, N:] @ interp.T, p @ interp.T], axis=-1)
    back = np.empty_like(out)
    back[order] = out
    return back


COMPARISON_COLUMNS = ("x", "y", "t", "u1_ref", "u1_pred", "u2_ref", "u2_pred", "p_ref", "p_pred")


def comparison_table(ref: np.ndarray, pred: np.ndarray, times, points) -> np.ndarray:
    """Rows ``(x, y, t, u1_ref, u1_pred, u2_ref, u2_pred, p_ref, p_pred)``, time-major."""
    times = np.asarray(times, dtype=np.float64)
    points = np.atleast_2d(points)
    M, L = len(times), len(points)
    cols = [np.tile(points[:, 0], M), np.tile(points[:, 1], M), np.repeat(times, L)]
    for c in range(3):
        cols += [ref[..., c].ravel(), pred[..., c].ravel()]
    return np.column_stack(cols)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def export_comparisons(model, ds, j: int, snapshot_times, probes, out_dir, predictor=None) -> dict:
    """Write field snapshots and probe time series of record ``j`` as CSV.

    ``snapshots.csv`` covers the lattice points at ``snapshot_times``;
    ``trends.csv`` covers ``probes`` at every lattice time.  ``predictor``
    overrides the model: a callable ``(times, points) -> (M, L, 3)``.
    Returns the written tables keyed by file name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    sensed = ds.sample(j)

    def model_predict(times, points):
        if predictor is not None:
            return np.asarray(predictor(times, points))
        nodes = np.column_stack([np.tile(points, (len(times), 1)), np.repeat(times, len(points))])
        return model.predict_sample(sensed, nodes).reshape(len(times), len(points), 3)

    tables = {}
    for name, times, points in (("snapshots.csv", np.atleast_1d(snapshot_times), ds.lattice.points),
                                ("trends.csv", ds.lattice.times, probes)):
        times = np.asarray(times, dtype=np.float64)
        ref = reference_fields(ds, j, times, points)
        table = comparison_table(ref, model_predict(times, points), times, points)
        write_csv(out_dir / name, COMPARISON_COLUMNS, table)
        tables[name] = table
    return tables


def export_loss_history(history: LossHistory, path) -> None:
    rows = [(e, tr, va) for e, (tr, va) in enumerate(zip(history.train, history.validation))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train", "validation"))
        for e, tr, va in rows:
            w.writerow([e, repr(tr), repr(va)])


def export_error_histogram(report: ErrorReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_left", "bin_right", "density"))
        for a, b, d in zip(report.bin_edges[:-1], report.bin_edges[1:], report.density):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(d))])
