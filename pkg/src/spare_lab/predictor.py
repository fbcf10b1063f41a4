"""Gaussian regressor over fixed-length vectors: mean net + diagonal-variance net.

Both nets are plain MLPs trained with hand-written backprop and Adam.  Inputs
and targets are z-scored with training statistics; the variance map is
``y_scale**2 * softplus(raw) + floor`` so variances stay above ``floor`` in
raw units.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

FORMAT_VERSION = 1
# variance floor in raw units (1 cm standard deviation)
DEFAULT_FLOOR = 1e-4


class TrainingError(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def softplus(r):
    return np.maximum(r, 0.0) + np.log1p(np.exp(-np.abs(r)))


def _sigmoid(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


# --------------------------------------------------------------------------
# mlp
# --------------------------------------------------------------------------

_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "softplus": (softplus, lambda z, a: _sigmoid(z)),
}
_ACT_CODE = {"relu": 0, "tanh": 1, "softplus": 2}


class Mlp:
    """Fully connected net, rectifier (or smooth) hidden units, linear output.

    All parameters live in one flat buffer; ``weights`` and ``biases`` are
    views into it, laid out W1, b1, W2, b2, ... row-major.
    """

    def __init__(self, sizes, flat=None, activation: str = "relu"):
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        n = sum(a * b + b for a, b in zip(self.sizes, self.sizes[1:]))
        self.flat = np.zeros(n) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (n,):
            raise ValueError("parameter buffer does not match layer sizes")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameters")
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.sizes, self.sizes[1:]):
            self.weights.append(self.flat[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.flat[off:off + b])
            off += b

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "relu") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        net = cls(sizes, activation=activation)
        for w in net.weights:
            lim = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[:] = rng.uniform(-lim, lim, size=w.shape)
        return net

    def forward(self, x, keep=False):
        act = _ACT[self.activation][0]
        cache = [x]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if i == last:
                a = z
            else:
                a = act(z)
                if keep:
                    cache += [z, a]
        return (a, cache) if keep else a

    def backward(self, cache, grad_out) -> np.ndarray:
        """Flat gradient, laid out like ``flat``, given dLoss/dOutput."""
        dact = _ACT[self.activation][1]
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = cache[2 * i] if i > 0 else cache[0]
            grads[2 * i] = a_prev.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                z, a = cache[2 * i - 1], cache[2 * i]
                g = (g @ self.weights[i].T) * dact(z, a)
        return np.concatenate([gr.ravel() for gr in grads])

    def to_dict(self):
        return {
            "activation": self.activation,
            "shapes": [list(w.shape) for w in self.weights],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        sizes = [d["shapes"][0][0]] + [s[1] for s in d["shapes"]]
        parts = []
        for w, b in zip(d["weights"], d["biases"]):
            parts += [np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)]
        return cls(sizes, np.concatenate(parts), d["activation"])


# --------------------------------------------------------------------------
# predictor
# --------------------------------------------------------------------------


@dataclass
class GaussianPredictor:
    mean_net: Mlp
    var_net: Mlp
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    floor: float = DEFAULT_FLOOR
    seed: int = 0
    info: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.mean_net.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.mean_net.sizes[-1]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has {x.shape[-1]} features, predictor expects {self.input_dim}")
        return x

    def forward(self, x):
        """Mean and variance in raw target units; x is (d,) or (n, d)."""
        x = self._check(x)
        xs = (x - self.x_mean) / self.x_scale
        mu = self.y_mean + self.y_scale * self.mean_net.forward(xs)
        var = self.y_scale ** 2 * softplus(self.var_net.forward(xs)) + self.floor
        return mu, var

    def nll(self, x, y, weights=None) -> float:
        mu, var = self.forward(x)
        return gaussian_nll(np.asarray(y, dtype=np.float64), mu, var, weights)

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "kind": "gaussian-predictor",
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "floor": self.floor,
            "seed": self.seed,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_scale": self.y_scale.tolist(),
            "mean_net": self.mean_net.to_dict(),
            "var_net": self.var_net.to_dict(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported predictor format version {d.get('version')}")
        arr = lambda k: np.array(d[k], dtype=np.float64)  # noqa: E731
        return cls(Mlp.from_dict(d["mean_net"]), Mlp.from_dict(d["var_net"]), arr("x_mean"), arr("x_scale"),
                   arr("y_mean"), arr("y_scale"), float(d["floor"]), int(d["seed"]), d.get("info", {}))


def gaussian_nll(y, mu, var, weights=None) -> float:
    """Weighted mean over samples of sum_k (y-mu)^2/var + log var.

    Weights are normalised to mean 1, so duplicating every sample leaves the
    value unchanged.
    """
    y, mu, var = np.atleast_2d(y), np.atleast_2d(mu), np.atleast_2d(var)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(mu))):
        raise ValueError("non-finite values in nll")
    per = ((y - mu) ** 2 / var + np.log(var)).sum(axis=1)
    if weights is None:
        return float(per.mean())
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be >= 0 and not all zero")
    return float((w * per).sum() / w.sum())


def nll_gradients(pred: GaussianPredictor, x, y, weights=None):
    """Analytic gradients of ``pred.nll`` w.r.t. the mean and variance parameters.

    Returns two flat arrays laid out like ``mean_net.flat`` and ``var_net.flat``.
    """
    x, y = np.atleast_2d(pred._check(x)), np.atleast_2d(np.asarray(y, dtype=np.float64))
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    xs = (x - pred.x_mean) / pred.x_scale
    ys = (y - pred.y_mean) / pred.y_scale
    floor_std = pred.floor / pred.y_scale ** 2
    mu, mcache = pred.mean_net.forward(xs, keep=True)
    raw, vcache = pred.var_net.forward(xs, keep=True)
    var = softplus(raw) + floor_std
    r = ys - mu
    g_mu = -2.0 * r / var * w[:, None]
    g_raw = (1.0 / var - r * r / var ** 2) * _sigmoid(raw) * w[:, None]
    return pred.mean_net.backward(mcache, g_mu), pred.var_net.backward(vcache, g_raw)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    block: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    hidden: tuple[int, ...] = (150, 150)
    activation: str = "relu"
    floor: float = DEFAULT_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.block < 1 or self.batch_size < 1 or self.floor <= 0:
            raise ValueError("invalid training config")

    def schedule(self) -> list[tuple[str, int]]:
        """Alternating (mean, var) blocks, then a closing mean block.

        The closing block is carved out of the epoch budget, so 100 epochs in
        blocks of 25 run mean, var, mean, mean.
        """
        blocks = []
        final = min(self.block, self.epochs)
        left = self.epochs - final
        phase = "mean"
        while left > 0:
            n = min(self.block, left)
            blocks.append((phase, n))
            left -= n
            phase = "var" if phase == "mean" else "mean"
        blocks.append(("mean", final))
        return blocks


def _standardize(a, min_scale=1e-12, fill=1.0):
    mean = a.mean(axis=0)
    scale = a.std(axis=0)
    scale = np.where(scale > min_scale, scale, fill)
    return mean, scale


def _init_nets(sizes, cfg: TrainConfig, seed: int):
    rng = np.random.default_rng([seed, 1])
    return Mlp.init(sizes, rng, cfg.activation), Mlp.init(sizes, rng, cfg.activation)


def _train_once(xs, ys, w, floor_std, cfg: TrainConfig, seed: int, trace=None):
    rng = np.random.default_rng(seed)
    sizes = [xs.shape[1], *cfg.hidden, ys.shape[1]]
    mean_net, var_net = _init_nets(sizes, cfg, seed)
    nets = {"mean": mean_net, "var": var_net}
    adam = {k: [np.zeros_like(net.flat), np.zeros_like(net.flat), 0] for k, net in nets.items()}
    grad = np.zeros_like(nets["mean"].flat)
    size_arr = np.array(sizes, dtype=np.int64)
    act = _ACT_CODE[cfg.activation]
    n = xs.shape[0]
    for phase, n_epochs in cfg.schedule():
        if phase == "mean":
            var_all = softplus(nets["var"].forward(xs)) + floor_std
            target, aux = ys, np.ascontiguousarray(1.0 / var_all)
        else:
            target = np.ascontiguousarray((ys - nets["mean"].forward(xs)) ** 2)
            aux = target
        perms = np.stack([rng.permutation(n) for _ in range(n_epochs)])
        net, state = nets[phase], adam[phase]
        state[2] = _kernels.run_epochs(net.flat, grad, state[0], state[1], state[2], size_arr, act, xs, target,
                                       aux, w, perms, cfg.batch_size, 0 if phase == "mean" else 1,
                                       cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, floor_std)
        if trace is not None:
            trace(phase, nets["mean"], nets["var"])
    return nets["mean"], nets["var"]


def _std_nll(mean_net, var_net, xs, ys, w, floor_std):
    mu = mean_net.forward(xs)
    var = softplus(var_net.forward(xs)) + floor_std
    return gaussian_nll(ys, mu, var, w)


def train_alternating(x, y, weights=None, cfg: TrainConfig = TrainConfig(), trace=None) -> GaussianPredictor:
    """Fit mean and variance nets by alternating NLL minimisation.

    While one net trains the other is frozen.  Samples with zero weight are
    dropped.  If the final training NLL is not below the NLL at the initial
    weights, training is repeated once with a derived seed.  ``trace`` is
    called as ``trace(phase, mean_net, var_net)`` after every block.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    keep = w > 0
    x, y, w = x[keep], y[keep], w[keep]
    if len(x) < 2:
        raise ValueError("need at least 2 samples with positive weight")
    w = np.ascontiguousarray(w / w.mean())
    x_mean, x_scale = _standardize(x)
    # near-constant targets are scaled to the floor so their variance starts
    # close to it instead of O(1) in raw units
    root = math.sqrt(cfg.floor)
    y_mean, y_scale = _standardize(y, root, root)
    xs = np.ascontiguousarray((x - x_mean) / x_scale)
    ys = np.ascontiguousarray((y - y_mean) / y_scale)
    floor_std = np.ascontiguousarray(cfg.floor / y_scale ** 2)

    seed = cfg.seed
    for attempt in range(2):
        sizes = [xs.shape[1], *cfg.hidden, ys.shape[1]]
        initial = _std_nll(*_init_nets(sizes, cfg, seed), xs, ys, w, floor_std)
        mean_net, var_net = _train_once(xs, ys, w, floor_std, cfg, seed, trace)
        final = _std_nll(mean_net, var_net, xs, ys, w, floor_std)
        if not math.isfinite(final):
            raise TrainingError("training diverged (non-finite loss)")
        if final <= initial:
            break
        seed = derive_seed(cfg.seed, "retry")
    info = {"train_nll_initial": initial, "train_nll_final": final, "attempts": attempt + 1}
    return GaussianPredictor(mean_net, var_net, x_mean, x_scale, y_mean, y_scale, cfg.floor, seed, info)


def fit_default_variance(sq_dev, weights=None, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Per-property weighted mean of squared deviations, clamped below at ``floor``.

    ``sq_dev`` is (m, P), one row per unpredicted object occurrence.  With no
    rows (or zero total weight) every property gets the floor.
    """
    sq_dev = np.asarray(sq_dev, dtype=np.float64)
    if sq_dev.ndim != 2:
        raise ValueError("squared deviations must be a 2-D table")
    if sq_dev.shape[0] == 0:
        return np.full(sq_dev.shape[1], floor)
    w = np.ones(sq_dev.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return np.full(sq_dev.shape[1], floor)
    return np.maximum(w @ sq_dev / total, floor)
