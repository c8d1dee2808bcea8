import math

import numpy as np
import pytest

from varmion.errors import InvalidArgument, TrainingDiverged
from varmion.network import params_digest
from varmion.sensing import split_dataset
from varmion.training import Adam, TrainConfig, build_model, dataset_loss, input_scales, net_config_for, train


@pytest.fixture(scope="module")
def splits(small_cavity_dataset):
    return split_dataset(small_cavity_dataset, (0.6, 0.2, 0.2), seed=0)


def small_net(ds, **kw):
    return net_config_for(ds, latent_dim=4, hidden=(8, 8), **kw)


def test_cosine_schedule():
    cfg = TrainConfig(epochs=10, lr=1e-2)
    assert cfg.lr_at(0) == pytest.approx(1e-2)
    assert cfg.lr_at(10) == pytest.approx(1e-4)
    lrs = [cfg.lr_at(e) for e in range(11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    for kw in (dict(epochs=0), dict(batch_size=0), dict(lr=0.0)):
        with pytest.raises(InvalidArgument):
            TrainConfig(**kw)


def test_adam_first_step_moves_by_lr():
    opt = Adam(3)
    theta = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]), lr=0.1)
    np.testing.assert_allclose(theta, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_net_config_for(small_cavity_dataset):
    ds = small_cavity_dataset
    cfg = small_net(ds)
    assert cfg.input_dims == (ds.layout.dims["f"], ds.layout.dims["g"], ds.layout.dims["u0"], ds.layout.dims["p0"])
    assert cfg.input_lo == (0.0, 0.0, 0.0) and cfg.input_hi == (1.0, 1.0, ds.lattice.tau)
    scales = input_scales(cfg, ds)
    assert scales["mu"] == pytest.approx(np.sqrt(np.mean(ds.mu ** 2)))


def test_history_and_best_checkpoint(splits):
    tr, va, _ = splits
    seen = []
    params, hist = train(small_net(tr), tr, va, TrainConfig(epochs=12, batch_size=2, lr=1e-2, seed=1),
                         callback=lambda e, a, b: seen.append(e))
    assert len(hist) == len(hist.train) == len(hist.validation) == 12
    assert seen == list(range(12))
    assert all(math.isfinite(v) for v in hist.train + hist.validation)
    assert dataset_loss(params, va) == pytest.approx(min(hist.validation), rel=1e-12)
    assert hist.initial is not None and min(hist.train) < hist.initial[0]


def test_seed_reproducibility(splits):
    tr, va, _ = splits
    cfg = TrainConfig(epochs=5, batch_size=3, lr=1e-2, seed=7)
    a, ha = train(small_net(tr), tr, va, cfg)
    b, hb = train(small_net(tr), tr, va, cfg)
    assert ha.train == hb.train and ha.validation == hb.validation
    assert params_digest(a) == params_digest(b)
    c, hc = train(small_net(tr), tr, va, TrainConfig(epochs=5, batch_size=3, lr=1e-2, seed=8))
    assert hc.train != ha.train


def test_divergence_guard(splits):
    tr, va, _ = splits
    with pytest.raises(TrainingDiverged) as info:
        train(small_net(tr), tr, va, TrainConfig(epochs=5, batch_size=2, lr=1e200))
    assert info.value.epoch is not None and 0 <= info.value.epoch < 5


def test_empty_split(splits):
    tr, va, _ = splits
    with pytest.raises(InvalidArgument):
        train(small_net(tr), tr, va.subset([]), TrainConfig(epochs=1))


def test_continue_from_params(splits):
    tr, va, _ = splits
    cfg = TrainConfig(epochs=3, batch_size=2, lr=1e-3)
    p, _ = train(small_net(tr), tr, va, cfg)
    p2, hist = train(p, tr, va, cfg)
    assert hist.initial[1] == pytest.approx(dataset_loss(p, va))
    assert p2.config == p.config


def test_build_model_meta(splits):
    tr, va, _ = splits
    cfg = TrainConfig(epochs=2, batch_size=2)
    p, hist = train(small_net(tr), tr, va, cfg)
    model = build_model(p, tr, hist, cfg, dataset_hash="x")
    assert model.meta["geometry"] == "cavity" and model.meta["dataset_hash"] == "x"
    assert model.meta["history"]["train"] == hist.train
    assert "layout_times" in model.layout_arrays
