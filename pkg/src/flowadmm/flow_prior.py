"""Velocity fields and the MMSE denoisers they induce.

Along the straight path ``x_t = t x1 + (1 - t) x0`` with ``x0 ~ N(0, I)`` the
posterior mean ``D_t(x_t) = E[x1 | x_t]`` and the velocity are tied by
``D_t(x) = x + (1 - t) v_t(x)``.  For Gaussian and Gaussian-mixture data the
posterior mean is available in closed form, which gives exact denoisers to
test everything else against.  ``MlpVelocity`` is a small trainable network
fitted with the flow-matching regression loss.

All priors act on tensors whose trailing axes equal ``prior.shape``; any
leading axes are treated as a batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError, ShapeError, TrainingDivergedError, UnsupportedError
from .tensor import read_f64, write_f64

__all__ = [
    "GaussianPrior",
    "GmmPrior",
    "MlpVelocity",
    "TrainResult",
    "denoiser_apply",
    "flow_matching_loss_and_grad",
    "gaussian_velocity_lipschitz",
    "sample_prior",
    "train_flow_matching",
    "velocity_apply",
]


def _check_t(t, allow_one=True):
    t = float(t)
    if not (0.0 <= t <= 1.0) or (not allow_one and t >= 1.0):
        hi = "1]" if allow_one else "1)"
        raise ParameterError(f"t must lie in [0, {hi}, got {t}")
    return t


def _event(x, shape):
    x = np.asarray(x, dtype=np.float64)
    n = len(shape)
    if x.shape[x.ndim - n:] != tuple(shape) or x.ndim < n:
        raise ShapeError(f"expected trailing shape {tuple(shape)}, got {x.shape}")
    return x


class GaussianPrior:
    """``N(mean, diag(var))``; ``var`` is a scalar (isotropic) or per-entry array.

    ``var = 0`` is allowed and gives a point mass, whose denoiser is constant.
    """

    kind = "gaussian"

    def __init__(self, mean, var):
        mean = np.asarray(mean, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise ParameterError("variances must be finite and >= 0")
        shape = np.broadcast_shapes(mean.shape, var.shape) or (1,)
        self.mean = np.broadcast_to(mean, shape).copy()
        self.var = np.broadcast_to(var, shape).copy() if var.ndim else float(var)
        self.shape = self.mean.shape

    @property
    def isotropic(self):
        return np.ndim(self.var) == 0 or bool(np.all(self.var == self.var.flat[0]))

    def shrink(self, t):
        """Per-entry Jacobian ``M_t = t var / (t^2 var + (1 - t)^2)`` of the denoiser."""
        t = _check_t(t)
        if t == 1.0:
            return np.ones_like(self.mean) if np.ndim(self.var) else 1.0
        return t * self.var / (t * t * self.var + (1.0 - t) ** 2)

    def denoise(self, t, x):
        t = _check_t(t)
        x = _event(x, self.shape)
        if t == 1.0:
            return x.copy()
        return self.mean + self.shrink(t) * (x - t * self.mean)

    def velocity(self, t, x):
        t = _check_t(t, allow_one=False)
        x = _event(x, self.shape)
        return (self.denoise(t, x) - x) / (1.0 - t)

    def velocity_jvp(self, t, x, w):
        t = _check_t(t, allow_one=False)
        return (self.shrink(t) - 1.0) / (1.0 - t) * w

    velocity_vjp = velocity_jvp

    def sample(self, rng, n=None):
        shape = self.shape if n is None else (int(n), *self.shape)
        return self.mean + np.sqrt(self.var) * rng.standard_normal(shape)


def gaussian_velocity_lipschitz(prior, t):
    """Spectral norm of the velocity Jacobian for a Gaussian prior.

    The Jacobian is diagonal with entries ``(M_t - 1) / (1 - t)``.
    """
    t = _check_t(t, allow_one=False)
    return float(np.max(np.abs((prior.shrink(t) - 1.0) / (1.0 - t))))


class GmmPrior:
    """Mixture of diagonal Gaussians ``sum_k w_k N(means[k], diag(vars[k]))``."""

    kind = "gmm"

    def __init__(self, weights, means, variances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        var = np.asarray(variances, dtype=np.float64)
        self.vars = np.broadcast_to(
            var.reshape(var.shape + (1,) * (self.means.ndim - var.ndim)), self.means.shape
        ).copy()
        k = self.weights.shape[0]
        if self.weights.ndim != 1 or self.means.shape[0] != k:
            raise ShapeError("weights and means disagree on the number of components")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ParameterError("mixture weights must be positive and sum to 1")
        if np.any(self.vars <= 0):
            raise ParameterError("component variances must be > 0")
        self.shape = self.means.shape[1:]
        self._log_w = np.log(self.weights)

    @property
    def n_components(self):
        return self.weights.shape[0]

    def _flat(self, x):
        x = _event(x, self.shape)
        batch = x.shape[: x.ndim - len(self.shape)]
        return x.reshape(batch + (-1,)), batch

    def responsibilities(self, t, x):
        """Posterior component probabilities given ``x_t = x``; shape ``batch + (K,)``."""
        t = _check_t(t)
        xf, batch = self._flat(x)
        mu = self.means.reshape(self.n_components, -1)
        s = t * t * self.vars.reshape(self.n_components, -1) + (1.0 - t) ** 2
        diff = xf[..., None, :] - t * mu
        logp = -0.5 * np.sum(diff * diff / s + np.log(2.0 * np.pi * s), axis=-1) + self._log_w
        return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))

    def denoise(self, t, x):
        t = _check_t(t)
        x = _event(x, self.shape)
        if t == 1.0:
            return x.copy()
        xf, batch = self._flat(x)
        mu = self.means.reshape(self.n_components, -1)
        var = self.vars.reshape(self.n_components, -1)
        resp = self.responsibilities(t, x)
        gain = t * var / (t * t * var + (1.0 - t) ** 2)
        post = mu + gain * (xf[..., None, :] - t * mu)
        out = np.einsum("...k,...kd->...d", resp, post)
        return out.reshape(x.shape)

    def velocity(self, t, x):
        t = _check_t(t, allow_one=False)
        x = _event(x, self.shape)
        return (self.denoise(t, x) - x) / (1.0 - t)

    def sample(self, rng, n=None):
        count = 1 if n is None else int(n)
        u = rng.uniform((count,))
        comp = np.searchsorted(np.cumsum(self.weights), u, side="right")
        comp = np.minimum(comp, self.n_components - 1)
        eps = rng.standard_normal((count, *self.shape))
        out = self.means[comp] + np.sqrt(self.vars[comp]) * eps
        return out[0] if n is None else out

    @classmethod
    def fit(cls, data, n_components, seed=0, reg_covar=1e-4):
        """Fit a diagonal mixture to ``data`` of shape ``(n, *event)`` by EM."""
        from sklearn.mixture import GaussianMixture

        data = np.asarray(data, dtype=np.float64)
        flat = data.reshape(data.shape[0], -1)
        gm = GaussianMixture(
            n_components=n_components,
            covariance_type="diag",
            reg_covar=reg_covar,
            random_state=seed,
            max_iter=200,
        ).fit(flat)
        weights = gm.weights_ / gm.weights_.sum()
        shape = data.shape[1:]
        return cls(
            weights,
            gm.means_.reshape((n_components, *shape)),
            gm.covariances_.reshape((n_components, *shape)),
        )


def _init_layer(rng, fan_out, fan_in):
    return rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)


@dataclass
class MlpVelocity:
    """Two-layer network ``v(x, t) = W2 tanh(W1 [x; t] + b1) + b2``.

    Time enters as one extra input coordinate.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    shape: tuple = field(default=None)
    activation: str = "tanh"

    kind = "mlp"
    PARAM_NAMES = ("W1", "b1", "W2", "b2")

    def __post_init__(self):
        if self.activation != "tanh":
            raise ParameterError(f"unsupported activation {self.activation!r}")
        if self.shape is None:
            self.shape = (self.dim,)
        self.shape = tuple(self.shape)
        if int(np.prod(self.shape)) != self.dim:
            raise ShapeError(f"event shape {self.shape} does not hold {self.dim} entries")
        for name in self.PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"parameter {name} is not finite")

    @classmethod
    def init(cls, dim, hidden, rng, shape=None, zero=False):
        if zero:
            return cls(np.zeros((hidden, dim + 1)), np.zeros(hidden),
                       np.zeros((dim, hidden)), np.zeros(dim), shape)
        return cls(_init_layer(rng, hidden, dim + 1), np.zeros(hidden),
                   _init_layer(rng, dim, hidden), np.zeros(dim), shape)

    @property
    def dim(self):
        return self.W2.shape[0]

    @property
    def hidden(self):
        return self.W2.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def replace(self, **params):
        kw = self.params()
        kw.update(params)
        return MlpVelocity(**kw, shape=self.shape, activation=self.activation)

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        return np.concatenate([x, tt[..., None]], axis=-1)

    def forward(self, x, t):
        """Raw network output on flat inputs ``x`` of shape ``(..., dim)``."""
        hid = np.tanh(self._inputs(x, t) @ self.W1.T + self.b1)
        return hid @ self.W2.T + self.b2

    def velocity(self, t, x):
        t = _check_t(t)
        x = _event(x, self.shape)
        batch = x.shape[: x.ndim - len(self.shape)]
        return self.forward(x.reshape(batch + (-1,)), t).reshape(x.shape)

    def denoise(self, t, x):
        t = _check_t(t)
        return _event(x, self.shape) + (1.0 - t) * self.velocity(t, x)

    def _hidden(self, t, x):
        xf = np.asarray(x, dtype=np.float64).reshape(-1)
        return np.tanh(self.W1 @ np.append(xf, t) + self.b1)

    def velocity_jvp(self, t, x, w):
        """``J_x v_t(x) @ w`` for a single (unbatched) ``x``."""
        h = self._hidden(t, x)
        dh = (1.0 - h * h) * (self.W1[:, :-1] @ np.ravel(w))
        return (self.W2 @ dh).reshape(np.shape(w))

    def velocity_vjp(self, t, x, w):
        """``J_x v_t(x)^T @ w`` for a single (unbatched) ``x``."""
        h = self._hidden(t, x)
        gz = (1.0 - h * h) * (self.W2.T @ np.ravel(w))
        return (self.W1[:, :-1].T @ gz).reshape(np.shape(w))

    def sample(self, rng, n=None):
        raise UnsupportedError("MlpVelocity defines a flow, not a sampler")

    # -- serialization ------------------------------------------------------
    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params().values()])

    def save(self, path):
        """Write parameters as an F64 tensor plus a JSON sidecar ``<path>.json``."""
        path = Path(path)
        write_f64(path, self.flat_params())
        meta = {"d": self.dim, "h": self.hidden, "activation": self.activation,
                "shape": list(self.shape)}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        d, h = int(meta["d"]), int(meta["h"])
        flat = read_f64(path)
        sizes = [h * (d + 1), h, d * h, d]
        if flat.size != sum(sizes):
            raise ShapeError(f"{path}: expected {sum(sizes)} parameters, found {flat.size}")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(h, d + 1), parts[1], parts[2].reshape(d, h), parts[3],
                   tuple(meta.get("shape", [d])), meta.get("activation", "tanh"))


def denoiser_apply(prior, t, xt):
    """Posterior-mean denoiser ``D_t(x_t)``."""
    return prior.denoise(t, xt)


def velocity_apply(prior, t, x):
    return prior.velocity(t, x)


def sample_prior(prior, rng, n=None):
    return prior.sample(rng, n)


def flow_matching_loss_and_grad(model, x0, x1, t):
    """Flow-matching regression loss and its exact parameter gradients.

    loss = mean over the batch of ``||v_t(x_t) - (x1 - x0)||^2`` with
    ``x_t = t x1 + (1 - t) x0``.  ``x0, x1`` have shape ``(B, dim)`` and ``t``
    shape ``(B,)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    b = x0.shape[0]
    if b == 0:
        raise ParameterError("empty batch")
    if x1.shape != x0.shape or t.shape != (b,):
        raise ShapeError("x0, x1 and t disagree on batch layout")
    if np.any((t < 0) | (t > 1)):
        raise ParameterError("t must lie in [0, 1]")

    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    inp = model._inputs(xt, t)
    hid = np.tanh(inp @ model.W1.T + model.b1)
    out = hid @ model.W2.T + model.b2
    err = out - (x1 - x0)
    loss = float(np.sum(err * err) / b)

    g_out = 2.0 * err / b
    g_z = (g_out @ model.W2) * (1.0 - hid * hid)
    grads = {
        "W2": g_out.T @ hid,
        "b2": g_out.sum(axis=0),
        "W1": g_z.T @ inp,
        "b1": g_z.sum(axis=0),
    }
    return loss, grads


@dataclass
class TrainResult:
    model: MlpVelocity
    losses: list
    eval_initial: float
    eval_final: float


def train_flow_matching(model, prior, steps, batch_size, learning_rate, rng, eval_size=4096):
    """Plain SGD on the flow-matching loss with ``x1`` drawn from an analytic prior.

    ``eval_initial`` / ``eval_final`` are losses on one fixed held-out batch,
    a lower-variance yardstick than the per-step curve.
    """
    if steps < 0 or batch_size < 1:
        raise ParameterError("steps must be >= 0 and batch_size >= 1")
    eval_rng = rng.fork(1)
    train_rng = rng.fork(2)

    def draw(r, n):
        x1 = prior.sample(r, n).reshape(n, -1)
        x0 = r.standard_normal(x1.shape)
        t = r.uniform((n,))
        return x0, x1, t

    ev = draw(eval_rng, eval_size)
    eval_initial, _ = flow_matching_loss_and_grad(model, *ev)
    losses = []
    for step in range(steps):
        loss, grads = flow_matching_loss_and_grad(model, *draw(train_rng, batch_size))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        losses.append(loss)
        try:
            model = model.replace(
                **{k: getattr(model, k) - learning_rate * g for k, g in grads.items()})
        except ParameterError as exc:
            raise TrainingDivergedError(f"parameters became non-finite at step {step}") from exc
    eval_final, _ = flow_matching_loss_and_grad(model, *ev)
    if not np.isfinite(eval_final):
        raise TrainingDivergedError("non-finite loss after training")
    return TrainResult(model, losses, eval_initial, eval_final)
