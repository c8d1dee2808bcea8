"""Operator network with linear input branches, an affine latent matrix and MLP trunks.

For one sample the latent coefficients are

    beta = D(rho, mu) @ (A_f F - A_g G - A_u0 U0 + A_p0 P0)

with ``D`` an affine function of ``(rho, mu)`` reshaped to ``p x p``, and
the prediction of component ``c`` at ``(x, t)`` is ``trunk_c(x, t) @ beta``.
In simplified mode only the forcing branch is kept.

Everything is plain float64 numpy with a hand-written reverse pass, so the
gradient can be checked against finite differences to round-off.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import binio
from .errors import ConfigMismatch, FormatError, InvalidArgument, InvalidConfiguration

MODEL_MAGIC = b"VMMODEL\x01"
MODEL_VERSION = 1

BRANCHES = ("f", "g", "u0", "p0")
# sign of each branch inside the latent sum
BRANCH_SIGN = {"f": 1.0, "g": -1.0, "u0": -1.0, "p0": 1.0}
N_COMPONENTS = 3


@dataclass(frozen=True)
class NetConfig:
    latent_dim: int = 32
    hidden: tuple = (64, 64, 64, 64)
    activation: str = "tanh"
    mode: str = "simplified"
    # lengths of the sensed vectors F, G, U0, P0
    input_dims: tuple = (2, 2, 2, 1)
    # trunk inputs (x, y, t) are mapped affinely from [lo, hi] to [-1, 1]
    input_lo: tuple = (0.0, 0.0, 0.0)
    input_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "input_lo", tuple(float(v) for v in self.input_lo))
        object.__setattr__(self, "input_hi", tuple(float(v) for v in self.input_hi))
        if self.latent_dim < 1:
            raise InvalidConfiguration("latent_dim must be at least 1")
        if self.mode not in ("full", "simplified"):
            raise InvalidConfiguration(f"mode must be 'full' or 'simplified', got {self.mode!r}")
        if self.activation != "tanh":
            raise InvalidConfiguration(f"unsupported activation {self.activation!r}")
        if len(self.input_dims) != 4 or min(self.input_dims) < 1:
            raise InvalidConfiguration("input_dims needs four positive lengths (F, G, U0, P0)")
        if any(h < 1 for h in self.hidden):
            raise InvalidConfiguration("hidden layer sizes must be positive")
        if len(self.input_lo) != 3 or len(self.input_hi) != 3 or any(
                h <= l for l, h in zip(self.input_lo, self.input_hi)):
            raise InvalidConfiguration("input bounds need lo < hi in each of (x, y, t)")

    @property
    def branches(self) -> tuple:
        return BRANCHES if self.mode == "full" else ("f",)

    def branch_dim(self, name: str) -> int:
        return self.input_dims[BRANCHES.index(name)]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def param_shapes(cfg: NetConfig) -> dict:
    """Ordered name -> shape map; this order defines the flat parameter vector."""
    p = cfg.latent_dim
    shapes = {"D.rho.w": (p * p,), "D.rho.b": (p * p,), "D.mu.w": (p * p,), "D.mu.b": (p * p,)}
    for b in cfg.branches:
        shapes[f"A.{b}"] = (p, cfg.branch_dim(b))
    sizes = (3,) + cfg.hidden + (p,)
    for c in range(N_COMPONENTS):
        for k in range(len(sizes) - 1):
            shapes[f"trunk{c}.W{k}"] = (sizes[k], sizes[k + 1])
            shapes[f"trunk{c}.b{k}"] = (sizes[k + 1],)
    return shapes


def param_group(name: str) -> str:
    """Coarse block a parameter belongs to: D-branch, A-family or one trunk."""
    if name.startswith("D."):
        return "D"
    if name.startswith("A."):
        return "A"
    return name.split(".")[0]


@dataclass
class VarMiONParams:
    config: NetConfig
    arrays: dict

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.arrays) != list(shapes):
            raise ConfigMismatch("parameter names do not match the configuration")
        for name, shape in shapes.items():
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ConfigMismatch(f"parameter {name} has shape {a.shape}, expected {shape}")
            self.arrays[name] = a

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unflatten(self, theta: np.ndarray) -> "VarMiONParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise InvalidArgument(f"flat vector of length {theta.shape} does not match {self.size} parameters")
        out, pos = {}, 0
        for name, a in self.arrays.items():
            out[name] = theta[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return VarMiONParams(self.config, out)

    def slices(self) -> dict:
        """Name -> slice into the flat vector."""
        out, pos = {}, 0
        for name, a in self.arrays.items():
            out[name] = slice(pos, pos + a.size)
            pos += a.size
        return out

    def copy(self) -> "VarMiONParams":
        return VarMiONParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def init_params(cfg: NetConfig, seed: int = 0, input_scales: dict | None = None) -> VarMiONParams:
    """Variance-scaled uniform initialization; trunk biases start at zero.

    ``input_scales`` optionally gives a typical magnitude per input (keys
    ``rho``, ``mu`` and branch names); the matching weights are divided by
    it so that every term starts at unit scale.
    """
    rng = np.random.default_rng(seed)
    scales = {k: float(v) for k, v in (input_scales or {}).items() if v and np.isfinite(v) and v > 0}
    p = cfg.latent_dim
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("D."):
            # four affine pieces add up, each with variance 1 / (4 p)
            lim = np.sqrt(3.0 / (4 * p))
        elif name.startswith("A."):
            lim = np.sqrt(3.0 / shape[1])
        elif ".W" in name:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        else:
            arrays[name] = np.zeros(shape)
            continue
        arrays[name] = rng.uniform(-lim, lim, size=shape)
    for key, name in (("rho", "D.rho.w"), ("mu", "D.mu.w")):
        if key in scales:
            arrays[name] /= scales[key]
    for b in cfg.branches:
        if b in scales:
            arrays[f"A.{b}"] /= scales[b]
    return VarMiONParams(cfg, arrays)


# --- forward pieces -------------------------------------------------------

def build_D(params: VarMiONParams, rho, mu) -> np.ndarray:
    """Latent matrix ``D(rho, mu)``; vectorized over arrays of ``rho``/``mu``."""
    p = params.config.latent_dim
    rho = np.asarray(rho, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    flat = (rho[..., None] * params["D.rho.w"] + params["D.rho.b"]
            + mu[..., None] * params["D.mu.w"] + params["D.mu.b"])
    return flat.reshape(rho.shape + (p, p))


def normalize_nodes(cfg: NetConfig, nodes: np.ndarray) -> np.ndarray:
    lo = np.array(cfg.input_lo)
    hi = np.array(cfg.input_hi)
    return 2.0 * (np.asarray(nodes, dtype=np.float64) - lo) / (hi - lo) - 1.0


def _trunk_forward(params: VarMiONParams, c: int, s: np.ndarray):
    n_layers = len(params.config.hidden) + 1
    acts = [s]
    h = s
    for k in range(n_layers):
        a = h @ params[f"trunk{c}.W{k}"] + params[f"trunk{c}.b{k}"]
        h = np.tanh(a) if k < n_layers - 1 else a
        acts.append(h)
    return h, acts


def _trunk_backward(params: VarMiONParams, c: int, acts, d_out: np.ndarray, grads: dict) -> None:
    n_layers = len(params.config.hidden) + 1
    d = d_out
    for k in reversed(range(n_layers)):
        if k < n_layers - 1:
            d = d * (1.0 - acts[k + 1] ** 2)
        grads[f"trunk{c}.W{k}"] = acts[k].T @ d
        grads[f"trunk{c}.b{k}"] = d.sum(axis=0)
        if k > 0:
            d = d @ params[f"trunk{c}.W{k}"].T


def trunk_outputs(params: VarMiONParams, nodes: np.ndarray) -> np.ndarray:
    """Basis values, shape ``(3, n_nodes, p)``, at raw ``(x, y, t)`` nodes."""
    s = normalize_nodes(params.config, nodes)
    return np.stack([_trunk_forward(params, c, s)[0] for c in range(N_COMPONENTS)])


@dataclass
class BranchInputs:
    """Batched sensed inputs for the enabled branches."""

    rho: np.ndarray
    mu: np.ndarray
    data: dict          # branch name -> (B, n) array

    @property
    def size(self) -> int:
        return len(self.rho)

    @classmethod
    def from_arrays(cls, cfg: NetConfig, rho, mu, F=None, G=None, U0=None, P0=None) -> "BranchInputs":
        given = {"f": F, "g": G, "u0": U0, "p0": P0}
        rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        data = {}
        for b in BRANCHES:
            v = given[b]
            if b not in cfg.branches:
                if v is not None and np.size(v) > 0 and np.any(np.asarray(v) != 0):
                    raise InvalidConfiguration(f"non-zero input for disabled branch {b!r} ({cfg.mode} mode)")
                continue
            if v is None:
                raise InvalidConfiguration(f"missing input for branch {b!r}")
            v = np.atleast_2d(np.asarray(v, dtype=np.float64))
            if v.shape != (len(rho), cfg.branch_dim(b)):
                raise InvalidConfiguration(
                    f"branch {b!r} input has shape {v.shape}, expected {(len(rho), cfg.branch_dim(b))}")
            data[b] = v
        return cls(rho, mu, data)

    @classmethod
    def from_sample(cls, cfg: NetConfig, s, strict: bool = True) -> "BranchInputs":
        """With ``strict=False`` readings of disabled branches are dropped instead of checked."""
        vals = {"f": s.F_hat, "g": s.G_hat, "u0": s.U0_hat, "p0": s.P0_hat}
        vals = {b: np.asarray(v)[None] for b, v in vals.items() if strict or b in cfg.branches}
        return cls.from_arrays(cfg, [s.rho], [s.mu], vals.get("f"), vals.get("g"), vals.get("u0"), vals.get("p0"))

    @classmethod
    def from_dataset(cls, cfg: NetConfig, ds, idx=None) -> "BranchInputs":
        idx = np.arange(ds.n_records) if idx is None else np.asarray(idx)
        pick = {b: getattr(ds, a)[idx] for b, a in zip(BRANCHES, ("F", "G", "U0", "P0")) if b in cfg.branches}
        return cls.from_arrays(cfg, ds.rho[idx], ds.mu[idx], pick.get("f"), pick.get("g"), pick.get("u0"),
                               pick.get("p0"))


def latent_input(params: VarMiONParams, inputs: BranchInputs) -> np.ndarray:
    """``sum_b sign_b A_b x_b`` for each record, shape ``(B, p)``."""
    z = None
    for b in params.config.branches:
        term = inputs.data[b] @ params[f"A.{b}"].T
        if z is None:
            z = term
        elif BRANCH_SIGN[b] > 0:
            z = z + term
        else:
            z = z - term
    return z


def coefficients(params: VarMiONParams, inputs: BranchInputs) -> np.ndarray:
    D = build_D(params, inputs.rho, inputs.mu)
    return np.einsum("bij,bj->bi", D, latent_input(params, inputs))


def predict(params: VarMiONParams, inputs: BranchInputs, nodes: np.ndarray) -> np.ndarray:
    """Predictions ``(B, n_nodes, 3)`` at raw nodes ``(x, y, t)``."""
    T = trunk_outputs(params, nodes)
    beta = coefficients(params, inputs)
    return np.einsum("cqp,bp->bqc", T, beta)


def forward(params: VarMiONParams, sensed, x, t):
    """Evaluate ``(u1, u2, p)`` for one sensed sample at points ``x`` and times ``t``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
    out = predict(params, BranchInputs.from_sample(params.config, sensed), np.column_stack([x, t]))[0]
    return out[:, 0], out[:, 1], out[:, 2]


# --- loss and gradient ------------------------------------------------------

def _check_batch(inputs: BranchInputs, targets: np.ndarray, nodes: np.ndarray, weights: np.ndarray) -> None:
    if inputs.size == 0:
        raise InvalidArgument("empty batch")
    if targets.shape != (inputs.size, len(nodes), N_COMPONENTS) or weights.shape != (len(nodes),):
        raise InvalidArgument(f"targets {targets.shape} / weights {weights.shape} do not match "
                              f"{inputs.size} records on {len(nodes)} nodes")


def loss(params: VarMiONParams, inputs: BranchInputs, targets, nodes, weights) -> float:
    """Mean over records of the weighted squared residual summed over components."""
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_batch(inputs, targets, nodes, weights)
    r = predict(params, inputs, nodes) - targets
    return float(np.einsum("q,bqc->", weights, r * r) / inputs.size)


def loss_and_gradient(params: VarMiONParams, inputs: BranchInputs, targets, nodes, weights):
    """Loss and its exact gradient as a name -> array dict."""
    cfg = params.config
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_batch(inputs, targets, nodes, weights)
    B = inputs.size
    s = normalize_nodes(cfg, nodes)
    trunks = [_trunk_forward(params, c, s) for c in range(N_COMPONENTS)]
    T = np.stack([out for out, _ in trunks])                      # (3, Q, p)
    D = build_D(params, inputs.rho, inputs.mu)                     # (B, p, p)
    z = latent_input(params, inputs)                               # (B, p)
    beta = np.einsum("bij,bj->bi", D, z)
    r = np.einsum("cqp,bp->bqc", T, beta) - targets
    value = float(np.einsum("q,bqc->", weights, r * r) / B)

    g_pred = (2.0 / B) * weights[None, :, None] * r                # dLoss/dprediction
    grads = {}
    g_beta = np.einsum("bqc,cqp->bp", g_pred, T)
    g_T = np.einsum("bqc,bp->cqp", g_pred, beta)
    g_D = np.einsum("bi,bj->bij", g_beta, z).reshape(B, -1)
    g_z = np.einsum("bij,bi->bj", D, g_beta)
    grads["D.rho.w"] = inputs.rho @ g_D
    grads["D.rho.b"] = g_D.sum(axis=0)
    grads["D.mu.w"] = inputs.mu @ g_D
    grads["D.mu.b"] = g_D.sum(axis=0)
    for b in cfg.branches:
        grads[f"A.{b}"] = BRANCH_SIGN[b] * (g_z.T @ inputs.data[b])
    for c, (_, acts) in enumerate(trunks):
        _trunk_backward(params, c, acts, g_T[c], grads)
    return value, {name: grads[name] for name in params.arrays}


def flat_gradient(params: VarMiONParams, grads: dict) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in params.arrays])


# --- model container --------------------------------------------------------

@dataclass
class VarMiON:
    """Trained parameters plus what is needed to use them on new inputs.

    ``meta`` carries the geometry, sensor layout and sensing mode of the
    training data, the dataset hash and the loss history.
    """

    params: VarMiONParams
    meta: dict = field(default_factory=dict)
    layout_arrays: dict = field(default_factory=dict)

    @property
    def config(self) -> NetConfig:
        return self.params.config

    def predict_sample(self, sensed, nodes) -> np.ndarray:
        """Prediction ``(n_nodes, 3)``; readings of disabled branches are ignored."""
        return predict(self.params, BranchInputs.from_sample(self.config, sensed, strict=False), nodes)[0]


def save_model(model: VarMiON, path) -> bytes:
    header = {"config": model.config.to_dict(), "meta": model.meta}
    arrays = dict(model.params.arrays)
    arrays.update(model.layout_arrays)
    return binio.write(path, MODEL_MAGIC, MODEL_VERSION, header, arrays)


def load_model(path, expect: NetConfig | dict | None = None, dataset_hash: str | None = None) -> VarMiON:
    """Load a model file.

    ``expect`` (a config or a dict of config fields) must match the stored
    configuration, otherwise :class:`ConfigMismatch` is raised.  A differing
    ``dataset_hash`` only produces a warning.
    """
    import warnings

    header, arrays = binio.read(path, MODEL_MAGIC, MODEL_VERSION)
    try:
        cfg = NetConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"model header lacks a valid configuration: {exc}") from exc
    if expect is not None:
        want = expect.to_dict() if isinstance(expect, NetConfig) else dict(expect)
        have = cfg.to_dict()
        bad = {k: (have.get(k), v) for k, v in want.items()
               if (list(v) if isinstance(v, tuple) else v) != have.get(k)}
        if bad:
            raise ConfigMismatch("model configuration differs: " + ", ".join(
                f"{k} stored {h!r} requested {w!r}" for k, (h, w) in sorted(bad.items())))
    names = list(param_shapes(cfg))
    missing = [n for n in names if n not in arrays]
    if missing:
        raise FormatError(f"model file lacks parameters {missing[:3]}")
    params = VarMiONParams(cfg, {n: arrays[n] for n in names})
    meta = header.get("meta", {})
    if dataset_hash is not None and meta.get("dataset_hash") not in (None, dataset_hash):
        warnings.warn(f"model was trained on dataset {meta.get('dataset_hash', '')[:12]}, "
                      f"not {dataset_hash[:12]}", stacklevel=2)
    layout = {k: v for k, v in arrays.items() if k.startswith("layout_")}
    return VarMiON(params, meta, layout)


def params_digest(params: VarMiONParams) -> str:
    return hashlib.sha256(params.flatten().tobytes()).hexdigest()
