import csv
import json

import numpy as np
import pytest

from varmion.errors import DegenerateReference, InvalidArgument
from varmion.geometry import build_channel_cylinder_mesh, build_output_lattice, uniform_times
from varmion.ipcs import SolverConfig
from varmion.metrics import (COMPARISON_COLUMNS, ErrorReport, LossHistory, error_report, export_comparisons,
                             export_error_histogram, export_loss_history, record_errors, reference_fields,
                             relative_l2_error)
from varmion.sensing import SensorLayout, generate_dataset, split_dataset
from varmion.training import TrainConfig, build_model, net_config_for, train


@pytest.fixture(scope="module")
def model_and_splits(small_cavity_dataset):
    tr, va, te = split_dataset(small_cavity_dataset, (0.6, 0.2, 0.2), seed=0)
    cfg = TrainConfig(epochs=10, batch_size=2, lr=1e-2)
    params, hist = train(net_config_for(tr, 4, (8, 8)), tr, va, cfg)
    return build_model(params, tr, hist, cfg), (tr, va, te)


def test_relative_error_examples():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((20, 3))
    w = rng.uniform(0.1, 1, 20)
    assert relative_l2_error(ref, ref, w) == 0.0
    assert relative_l2_error(np.zeros_like(ref), ref, w) == pytest.approx(1.0, abs=1e-15)
    assert abs(relative_l2_error(1.01 * ref, ref, w) - 0.01) <= 1e-12
    pred = ref + 0.1 * rng.standard_normal(ref.shape)
    e = relative_l2_error(pred, ref, w)
    assert relative_l2_error(-3.7 * pred, -3.7 * ref, w) == pytest.approx(e, rel=1e-14)
    with pytest.raises(DegenerateReference):
        relative_l2_error(ref, np.zeros_like(ref), w)
    with pytest.raises(InvalidArgument):
        relative_l2_error(ref[:, :2], ref, w)


def test_report_statistics():
    r = ErrorReport.from_errors([0.05] * 4)
    assert r.mean == pytest.approx(0.05) and r.std == pytest.approx(0.0, abs=1e-17)
    r = ErrorReport.from_errors([0.01, 0.03])
    assert r.mean == pytest.approx(0.02) and r.std == pytest.approx(0.01)
    e = np.random.default_rng(1).uniform(0, 0.2, 57)
    r = ErrorReport.from_errors(e)
    assert len(r.density) == 30 and r.bin_edges[0] == e.min() and r.bin_edges[-1] == e.max()
    assert abs(np.sum(r.density * np.diff(r.bin_edges)) - 1.0) <= 1e-9
    with pytest.raises(InvalidArgument):
        ErrorReport.from_errors([])


def test_loss_history():
    h = LossHistory()
    for tr, va in ((3.0, 4.0), (2.0, 2.0), (1.0, 2.0), (1.0, 1.0)):
        h.append(tr, va)
    assert len(h) == 4
    assert h.relative_spread(3) == pytest.approx((2 - 1) / (5 / 3))
    assert LossHistory.from_dict(json.loads(json.dumps(h.to_dict()))) == h


def test_error_report_on_model(model_and_splits):
    model, (_, _, te) = model_and_splits
    rep = error_report(model, te)
    errs = record_errors(model, te)
    assert np.all(rep.errors >= 0) and np.array_equal(rep.errors, errs)
    assert rep.mean == pytest.approx(errs.mean())
    np.testing.assert_array_equal(rep.record_ids, te.record_ids)
    assert error_report(model, te).to_json() == rep.to_json()
    with pytest.raises(InvalidArgument):
        error_report(model, te.subset([]))


def test_reference_fields_reproduce_targets(small_cavity_dataset):
    ds = small_cavity_dataset
    j = 2
    ref = reference_fields(ds, j, ds.lattice.times, ds.lattice.points)
    np.testing.assert_array_equal(ref.reshape(-1, 3), ds.targets[j])
    # unsorted times come back in the requested order
    t = ds.lattice.times[[2, 0]]
    np.testing.assert_array_equal(reference_fields(ds, j, t, ds.lattice.points[:3]), ref[[2, 0], :3])
    with pytest.raises(InvalidArgument):
        reference_fields(ds, j, [0.0], ds.lattice.points[:1])
    with pytest.raises(InvalidArgument):
        reference_fields(ds, j, [2.0], ds.lattice.points[:1])


def read_table(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == COMPARISON_COLUMNS
    return np.array(rows[1:], dtype=float)


def test_export_perfect_predictor(tmp_path, model_and_splits, small_cavity_dataset):
    model, _ = model_and_splits
    ds = small_cavity_dataset
    j = 4
    probes = ds.lattice.points[[3, 12]]
    perfect = lambda times, points: reference_fields(ds, j, times, points)
    tables = export_comparisons(model, ds, j, [ds.lattice.times[1]], probes, tmp_path, predictor=perfect)
    for name in ("snapshots.csv", "trends.csv"):
        t = read_table(tmp_path / name)
        np.testing.assert_array_equal(t, tables[name])
        np.testing.assert_array_equal(t[:, 3::2], t[:, 4::2])
    # probes at lattice nodes reproduce the stored targets
    trends = read_table(tmp_path / "trends.csv")
    M, L = ds.lattice.n_times, ds.lattice.n_points
    target = ds.targets[j].reshape(M, L, 3)[:, [3, 12]]
    np.testing.assert_array_equal(trends[:, [3, 5, 7]].reshape(M, 2, 3), target)
    assert trends.shape == (M * 2, 9)


def test_export_with_model(tmp_path, model_and_splits, small_cavity_dataset):
    model, _ = model_and_splits
    ds = small_cavity_dataset
    tables = export_comparisons(model, ds, 0, ds.lattice.times[:2], ds.lattice.points[:1], tmp_path)
    snap = tables["snapshots.csv"]
    nodes = snap[:, :3]
    np.testing.assert_allclose(snap[:, [4, 6, 8]], model.predict_sample(ds.sample(0), nodes), rtol=1e-14)


def test_cylinder_pressure_is_perturbation(tmp_path):
    mesh = build_channel_cylinder_mesh(target_h=0.05)
    lat = build_output_lattice(mesh, 11, 4, uniform_times(2e-3, 4))
    ds = generate_dataset(mesh, 1, SensorLayout.compressed(mesh, lat), lat, SolverConfig(2.5e-5, 2e-3), seed=0)
    early = reference_fields(ds, 0, [2.5e-5, 2e-3], lat.points)
    p = np.abs(early[..., 2])
    assert p[0].max() < 0.1 * p[1].max()
    np.testing.assert_array_equal(reference_fields(ds, 0, lat.times, lat.points).reshape(-1, 3), ds.targets[0])


def test_export_loss_and_histogram(tmp_path):
    h = LossHistory([3.0, 2.0], [4.0, 1.5])
    export_loss_history(h, tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows == [["epoch", "train", "validation"], ["0", "3.0", "4.0"], ["1", "2.0", "1.5"]]
    r = ErrorReport.from_errors([0.01, 0.02, 0.05])
    export_error_histogram(r, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert len(rows) == 31 and rows[0] == ["bin_left", "bin_right", "density"]
