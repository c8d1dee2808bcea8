"""Minibatch Adam training of the operator network on a generated dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .metrics import LossHistory
from .network import (BranchInputs, NetConfig, VarMiON, VarMiONParams, flat_gradient, init_params, loss,
                      loss_and_gradient)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    # the cosine schedule decays from lr to lr * final_lr_fraction
    final_lr_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgument("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        lo = self.lr * self.final_lr_fraction
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * epoch / self.epochs))


class Adam:
    def __init__(self, n: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def net_config_for(ds, latent_dim: int = 32, hidden=(64, 64, 64, 64), mode: str = "simplified") -> NetConfig:
    """Network configuration matching a dataset's sensor lengths and domain."""
    x0, y0, x1, y1 = ds.lattice.bbox
    dims = ds.layout.dims
    return NetConfig(latent_dim=latent_dim, hidden=tuple(hidden), mode=mode,
                     input_dims=(dims["f"], dims["g"], dims["u0"], dims["p0"]),
                     input_lo=(x0, y0, 0.0), input_hi=(x1, y1, ds.lattice.tau))


def input_scales(net: NetConfig, ds) -> dict:
    """Root-mean-square magnitude of each network input over a dataset."""
    def rms(a):
        return float(np.sqrt(np.mean(np.square(a))))
    out = {"rho": rms(ds.rho), "mu": rms(ds.mu)}
    for b, attr in zip(("f", "g", "u0", "p0"), ("F", "G", "U0", "P0")):
        out[b] = rms(getattr(ds, attr))
    return out


def dataset_loss(params: VarMiONParams, ds) -> float:
    return loss(params, BranchInputs.from_dataset(params.config, ds), ds.targets, ds.lattice.nodes(), ds.weights)


def train(net: NetConfig | VarMiONParams, train_ds, val_ds, cfg: TrainConfig, callback=None):
    """Fit the network; returns ``(best_params, history)``.

    ``best_params`` are the parameters with the lowest validation loss seen
    at the end of any epoch.  A non-finite loss raises
    :class:`TrainingDiverged` with the epoch index.
    """
    if train_ds.n_records == 0 or val_ds.n_records == 0:
        raise InvalidArgument("training and validation splits must be non-empty")
    if isinstance(net, NetConfig):
        params = init_params(net, cfg.seed, input_scales(net, train_ds))
    else:
        params = net.copy()
    ncfg = params.config
    rng = np.random.default_rng([cfg.seed, 1])
    nodes = train_ds.lattice.nodes()
    weights = train_ds.weights
    tr_inputs = BranchInputs.from_dataset(ncfg, train_ds)
    va_inputs = BranchInputs.from_dataset(ncfg, val_ds)

    def full_losses(p):
        return (loss(p, tr_inputs, train_ds.targets, nodes, weights),
                loss(p, va_inputs, val_ds.targets, nodes, weights))

    history = LossHistory(initial=full_losses(params))
    theta = params.flatten()
    opt = Adam(theta.size, cfg.beta1, cfg.beta2, cfg.eps)
    best, best_val = params.copy(), math.inf
    n = train_ds.n_records
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = BranchInputs(tr_inputs.rho[idx], tr_inputs.mu[idx], {k: v[idx] for k, v in tr_inputs.data.items()})
            value, grads = loss_and_gradient(params, batch, train_ds.targets[idx], nodes, weights)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch=epoch)
            theta = opt.step(theta, flat_gradient(params, grads), lr)
            params = params.unflatten(theta)
        tr, va = full_losses(params)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch=epoch)
        history.append(tr, va)
        if va < best_val:
            best, best_val = params.copy(), va
        if callback is not None:
            callback(epoch, tr, va)
        log.debug("epoch %d lr %.3e train %.6e val %.6e", epoch, lr, tr, va)
    return best, history


def build_model(params: VarMiONParams, train_ds, history: LossHistory, cfg: TrainConfig,
                dataset_hash: str | None = None) -> VarMiON:
    meta = {
        "geometry": train_ds.geometry, "mesh_params": train_ds.mesh_params, "solver": train_ds.solver,
        "sensing": train_ds.sensing, "lattice": train_ds.lattice.to_dict(), "dataset_hash": dataset_hash,
        "train": cfg.to_dict(), "history": history.to_dict(),
    }
    return VarMiON(params, meta, train_ds.layout.to_arrays())
