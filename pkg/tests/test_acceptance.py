"""End-to-end acceptance checks.

Each test prints a single ``PASS``/``FAIL`` line (visible in the terminal
even without ``-s``) and then asserts the same condition.  The desk runs
train full-size models and take several minutes in total.
"""

import json
import time

import numpy as np
import pytest
import sympy as sp

from oracles import domain_integral, finite_difference_check, mms_errors, observed_orders
from varmion.cli import bundled_config, main
from varmion.geometry import build_mesh, build_output_lattice, uniform_times
from varmion.metrics import LossHistory
from varmion.network import (BranchInputs, NetConfig, VarMiONParams, flat_gradient, loss, loss_and_gradient,
                             param_group, param_shapes)
from varmion.sensing import quadrature_weights
from varmion.spacetime import structure_report
from varmion.training import TrainConfig, net_config_for, train

GEOMETRIES = ("cavity", "cylinder", "contraction")


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, detail
    return emit


def test_projection_scheme_convergence(verdict):
    start = time.perf_counter()
    errors = mms_errors((8, 16, 32))
    orders = observed_orders(errors)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(orders >= 1.8)) and elapsed < 300
    verdict("projection scheme velocity convergence", ok,
            f"errors {np.array2string(errors, precision=3)} orders {np.array2string(orders, precision=3)} "
            f"in {elapsed:.1f}s")


def test_spacetime_structure(verdict):
    start = time.perf_counter()
    rep = structure_report()
    elapsed = time.perf_counter() - start
    values = {k: v for k, v in rep.items() if k not in ("n_unknowns", "rank")}
    worst = max(values.values())
    ok = worst <= 1e-12 and rep["n_unknowns"] <= 200 and rep["rank"] == rep["n_unknowns"] and elapsed < 10
    verdict("space-time block structure", ok,
            f"{rep['n_unknowns']} unknowns, rank {rep['rank']}, worst check {worst:.2e} in {elapsed:.2f}s")


def test_gradient_every_block(verdict):
    start = time.perf_counter()
    cfg = NetConfig(latent_dim=8, hidden=(12, 12), mode="full", input_dims=(6, 4, 5, 3),
                    input_lo=(0, 0, 0), input_hi=(1, 1, 2))
    rng = np.random.default_rng(21)
    params = VarMiONParams(cfg, {k: 0.5 * rng.standard_normal(s) for k, s in param_shapes(cfg).items()})
    B, Q = 4, 12
    F, G, U0, P0 = (rng.standard_normal((B, d)) for d in cfg.input_dims)
    inputs = BranchInputs.from_arrays(cfg, rng.uniform(0.5, 2, B), rng.uniform(1, 10, B), F, G, U0, P0)
    nodes = rng.uniform(size=(Q, 3)) * [1, 1, 2]
    targets = rng.standard_normal((B, Q, 3))
    weights = rng.uniform(0.1, 1.0, Q)
    _, grads = loss_and_gradient(params, inputs, targets, nodes, weights)
    g = flat_gradient(params, grads)
    theta = params.flatten()
    f = lambda th: loss(params.unflatten(th), inputs, targets, nodes, weights)

    groups = np.concatenate([[param_group(name)] * params[name].size for name in params.arrays])
    worst, checked = {}, {}
    for group in ("D", "A", "trunk0", "trunk1", "trunk2"):
        idx = np.flatnonzero(groups == group)
        coords = rng.choice(idx, size=min(50, idx.size), replace=False)
        checked[group] = coords.size
        worst[group] = finite_difference_check(f, theta, g, coords)
    elapsed = time.perf_counter() - start
    ok = all(n >= 50 for n in checked.values()) and max(worst.values()) <= 1e-4 and elapsed < 60
    verdict("analytic gradient against finite differences", ok,
            ", ".join(f"{k}: {checked[k]} coords worst {worst[k]:.1e}" for k in worst) + f" in {elapsed:.1f}s")


def desk_run(tmp_path, geometry):
    """Generate, train and evaluate with a bundled config through the CLI."""
    data, model, report = (str(tmp_path / name) for name in ("d.vmds", "m.vmn", "report.json"))
    assert main(["generate", "--config", geometry, "--threads", "1", "--out", data]) == 0
    assert main(["train", "--config", geometry, "--threads", "1", "--data", data, "--out", model]) == 0
    assert main(["evaluate", "--model", model, "--data", data, "--split", "test", "--out", report]) == 0
    from varmion.network import load_model
    history = LossHistory.from_dict(load_model(model).meta["history"])
    return json.loads((tmp_path / "report.json").read_text()), history


@pytest.mark.slow
def test_cavity_desk_run(verdict, tmp_path):
    start = time.perf_counter()
    rep, history = desk_run(tmp_path, "cavity")
    spread = history.relative_spread(30)
    ok = rep["mean"] <= 0.10 and spread < 0.05
    verdict("cavity operator accuracy", ok,
            f"test mean relative error {100 * rep['mean']:.2f}% (std {100 * rep['std']:.2f}%), "
            f"validation spread over last 30 epochs {100 * spread:.2f}% in {time.perf_counter() - start:.0f}s")


@pytest.mark.slow
@pytest.mark.parametrize("geometry", ["cylinder", "contraction"])
def test_channel_desk_run(verdict, tmp_path, geometry):
    start = time.perf_counter()
    rep, _ = desk_run(tmp_path, geometry)
    verdict(f"{geometry} operator accuracy", rep["mean"] <= 0.15,
            f"test mean relative error {100 * rep['mean']:.2f}% (std {100 * rep['std']:.2f}%) "
            f"in {time.perf_counter() - start:.0f}s")


def test_overfit_single_record(verdict, small_cavity_dataset):
    one = small_cavity_dataset.subset([0])
    _, history = train(net_config_for(one, 4), one, one, TrainConfig(epochs=200, batch_size=1, lr=1e-2))
    ratio = history.train[-1] / history.initial[0]
    verdict("single-record overfit", ratio < 0.01,
            f"train loss {history.initial[0]:.3e} -> {history.train[-1]:.3e} (ratio {ratio:.2e})")


def test_quadrature_weights(verdict):
    x, y = sp.symbols("x y")
    xi2 = (1 + sp.sin(2 * x) * sp.cos(3 * y)) ** 2
    f = sp.lambdify((x, y), xi2, "numpy")
    lines, ok = [], True
    for geometry in GEOMETRIES:
        cfg = bundled_config(geometry)
        mesh = build_mesh(geometry, **cfg["mesh"])
        tau = cfg["solver"]["tau"]
        lat = build_output_lattice(mesh, cfg["lattice"]["nx"], cfg["lattice"]["ny"],
                                   uniform_times(tau, cfg["lattice"]["times"]), tau)
        total_err = abs(quadrature_weights(lat).sum() - tau * mesh.area()) / (tau * mesh.area())
        exact = domain_integral(mesh, xi2)
        errs = []
        for n in (5, 10, 20):
            small = build_output_lattice(mesh, n, n, [1.0])
            errs.append(abs(np.sum(quadrature_weights(small) * f(*small.points.T)) - exact))
        good = total_err <= 0.02 and errs[0] > errs[1] > errs[2]
        ok &= good
        lines.append(f"{geometry} total off by {100 * total_err:.2f}%, errors "
                     + " > ".join(f"{e:.2e}" for e in errs))
    verdict("lattice quadrature weights", ok, "; ".join(lines))


def test_cli_determinism(verdict, tmp_path):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["generate", "--config", "smoke", "--threads", "1", "--seed", "5",
                     "--out", str(d / "d.vmds")]) == 0
        assert main(["train", "--config", "smoke", "--threads", "1", "--seed", "5", "--data", str(d / "d.vmds"),
                     "--out", str(d / "m.vmn")]) == 0
        digests.append(((d / "d.vmds").read_bytes(), (d / "m.vmn").read_bytes()))
    same_data = digests[0][0] == digests[1][0]
    same_model = digests[0][1] == digests[1][1]
    verdict("repeatable generate and train", same_data and same_model,
            f"dataset identical: {same_data}, model identical: {same_model}")
