"""Mean renoise-denoise operator, its Monte Carlo estimate, and schedules.

``S_t(x) = E_eps[D_t(t x + (1 - t) eps)]`` averages the denoiser over fresh
noise; ``R_t = S_t - I`` is the residual correction.  For a Gaussian prior the
denoiser is affine and the expectation is exact:
``S_t(x) = mu + t M_t (x - mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ParameterError, UnsupportedError
from .flow_prior import GaussianPrior, _check_t
from .tensor import SeededRng

__all__ = [
    "MeanDenoiser",
    "SampleSchedule",
    "SpectralNormEstimate",
    "TimeSchedule",
    "jacobian_spectral_norm",
    "lemma1_bound",
    "mean_denoise_exact_gaussian",
    "mean_denoise_mc",
    "remark1_deviation",
    "residual",
    "fd_jacobian",
    "residual_lipschitz_gaussian",
    "sample_schedule_eval",
    "time_schedule_eval",
]


# -- schedules --------------------------------------------------------------

@dataclass(frozen=True)
class TimeSchedule:
    """Power law ``t_k = t_min + ((k + 1) / K)^gamma (t_max - t_min)``."""

    t_min: float
    t_max: float
    gamma: float
    K: int

    def __post_init__(self):
        if not (0.0 <= self.t_min <= self.t_max < 1.0):
            raise ParameterError(
                f"need 0 <= t_min <= t_max < 1, got t_min={self.t_min}, t_max={self.t_max}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")

    def __call__(self, k):
        return time_schedule_eval(self, k)

    def sequence(self):
        return np.array([self(k) for k in range(self.K)])


def time_schedule_eval(sched, k):
    if not 0 <= k < sched.K:
        raise ParameterError(f"k={k} outside [0, {sched.K})")
    if k == sched.K - 1:
        return float(sched.t_max)
    ratio = (k + 1) / sched.K
    return float(sched.t_min + ratio ** sched.gamma * (sched.t_max - sched.t_min))


@dataclass(frozen=True)
class SampleSchedule:
    """Per-iteration Monte Carlo sample counts.

    ``kind="constant"`` uses ``N`` everywhere.  ``kind="three_phase"`` returns
    ``N_e`` while ``k/K < s1``, ``N_m`` while ``s1 <= k/K < s2`` and ``N_l``
    afterwards; with ``s2 = 1`` the last phase never fires.
    """

    kind: str = "constant"
    N: int = 1
    N_e: int = 1
    N_m: int = 1
    N_l: int = 1
    s1: float = 0.5
    s2: float = 0.9

    def __post_init__(self):
        if self.kind == "constant":
            if self.N < 1:
                raise ParameterError("N must be >= 1")
        elif self.kind == "three_phase":
            if min(self.N_e, self.N_m, self.N_l) < 1:
                raise ParameterError("sample counts must be >= 1")
            if not 0.0 < self.s1 < self.s2 <= 1.0:
                raise ParameterError(f"need 0 < s1 < s2 <= 1, got s1={self.s1}, s2={self.s2}")
        else:
            raise ParameterError(f"unknown sample schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, n):
        return cls("constant", N=n)

    @classmethod
    def three_phase(cls, n_e, n_m, n_l, s1, s2):
        return cls("three_phase", N_e=n_e, N_m=n_m, N_l=n_l, s1=s1, s2=s2)

    def __call__(self, k, K):
        return sample_schedule_eval(self, k, K)

    def total(self, K):
        return sum(self(k, K) for k in range(K))

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "N": self.N}
        return {"kind": "three_phase", "N_e": self.N_e, "N_m": self.N_m, "N_l": self.N_l,
                "s1": self.s1, "s2": self.s2}


def sample_schedule_eval(sched, k, K):
    if not 0 <= k < K:
        raise ParameterError(f"k={k} outside [0, {K})")
    if sched.kind == "constant":
        return sched.N
    frac = k / K
    if frac < sched.s1:
        return sched.N_e
    if frac < sched.s2:
        return sched.N_m
    return sched.N_l


# -- the mean operator ------------------------------------------------------

def mean_denoise_exact_gaussian(prior, t, x):
    if not isinstance(prior, GaussianPrior):
        raise UnsupportedError("exact mean operator needs a GaussianPrior")
    t = _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    if t == 1.0:
        return x.copy()
    return prior.mean + t * prior.shrink(t) * (x - prior.mean)


def mean_denoise_mc(prior, t, x, N, rng):
    """Average of ``N`` denoiser calls on independently renoised copies of ``x``.

    Noise draws and the accumulation both run in sample-index order so a
    given ``(rng, N)`` always yields the same bits.
    """
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    t = _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    eps = rng.standard_normal((int(N), *x.shape))
    outs = prior.denoise(t, t * x + (1.0 - t) * eps)
    acc = np.zeros_like(x)
    for i in range(N):
        acc += outs[i] / N
    return acc


class MeanDenoiser:
    """Callable ``(t, x, N, rng) -> S_t(x)`` for a fixed prior and estimator.

    ``mode="exact_gaussian"`` ignores ``N`` and ``rng``.
    """

    def __init__(self, prior, mode="monte_carlo"):
        if mode not in ("exact_gaussian", "monte_carlo"):
            raise ParameterError(f"unknown estimator mode {mode!r}")
        if mode == "exact_gaussian" and not isinstance(prior, GaussianPrior):
            raise UnsupportedError("exact_gaussian mode requires a GaussianPrior")
        self.prior = prior
        self.mode = mode

    @property
    def exact(self):
        return self.mode == "exact_gaussian"

    def __call__(self, t, x, N=1, rng=None):
        if self.exact:
            return mean_denoise_exact_gaussian(self.prior, t, x)
        return mean_denoise_mc(self.prior, t, x, N, rng)


def residual(prior, t, x, mode="exact_gaussian", N=1, rng=None):
    """``R_t(x) = S_t(x) - x`` with the chosen estimator."""
    return MeanDenoiser(prior, mode)(t, x, N, rng) - np.asarray(x, dtype=np.float64)


def residual_lipschitz_gaussian(prior, t):
    """Exact Lipschitz constant of ``R_t`` for a Gaussian prior: ``max |t M_t - 1|``."""
    return float(np.max(np.abs(t * np.asarray(prior.shrink(t)) - 1.0)))


def lemma1_bound(t, L_v):
    """Lipschitz bound ``(1 - t)(1 + t L_v)`` on the residual operator."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    if L_v < 0:
        raise ParameterError(f"L_v must be >= 0, got {L_v}")
    return (1.0 - t) * (1.0 + t * L_v)


# -- Jacobian probe ---------------------------------------------------------

class SpectralNormEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool


def fd_jacobian(field, x, step, batched=False):
    """Dense Jacobian of ``field`` at ``x`` by central differences.

    With ``batched=True`` ``field`` maps a stack ``(n, *x.shape)`` to a stack
    and all ``2 x.size`` perturbed points go through one call.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    d = flat.size
    if batched:
        pert = step * np.eye(d)
        pts = np.concatenate([flat + pert, flat - pert]).reshape(2 * d, *x.shape)
        out = np.asarray(field(pts)).reshape(2 * d, -1)
        return ((out[:d] - out[d:]) / (2.0 * step)).T
    f0 = np.asarray(field(x))
    jac = np.empty((f0.size, d))
    for j in range(d):
        e = np.zeros_like(flat)
        e[j] = step
        plus = np.asarray(field((flat + e).reshape(x.shape))).ravel()
        minus = np.asarray(field((flat - e).reshape(x.shape))).ravel()
        jac[:, j] = (plus - minus) / (2.0 * step)
    return jac


def jacobian_spectral_norm(
    field: Callable,
    x,
    iters: int = 1000,
    tol: float = 1e-12,
    fd_step: Optional[float] = None,
    jvp: Optional[Callable] = None,
    vjp: Optional[Callable] = None,
    rng=None,
    batched: bool = False,
) -> SpectralNormEstimate:
    """Estimate ``||J field(x)||_2`` by power iteration on ``J^T J``.

    Each sweep does ``w~ = J w / ||J w||`` then ``w = J^T w~ / ||J^T w~||``.
    When ``jvp``/``vjp`` (callables of the direction only) are given they are
    used as is.  Otherwise the Jacobian is assembled once by central finite
    differences with step ``fd_step`` (default ``1e-5 (1 + ||x||_inf)``) and
    its transpose is read off the same matrix; ``batched`` is passed on to
    ``fd_jacobian``.

    Iteration stops once successive estimates differ by less than
    ``tol * estimate``; the result is flagged unconverged otherwise.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if jvp is None or vjp is None:
        step = fd_step if fd_step is not None else 1e-5 * (1.0 + float(np.max(np.abs(x))))
        jac = fd_jacobian(field, x, step, batched)
        jvp = lambda w: (jac @ np.ravel(w)).reshape(x.shape)  # noqa: E731
        vjp = lambda w: (jac.T @ np.ravel(w)).reshape(x.shape)  # noqa: E731
    if rng is None:
        rng = SeededRng(0x5EED)
    w = rng.standard_normal(x.shape)
    w /= np.linalg.norm(w)
    est = 0.0
    for it in range(1, iters + 1):
        jw = jvp(w)
        n_jw = np.linalg.norm(jw)
        if n_jw == 0.0:
            return SpectralNormEstimate(0.0, it, True)
        jtw = vjp(jw / n_jw)
        n_jtw = np.linalg.norm(jtw)
        w = jtw / n_jtw
        # ||J^T w~|| with w~ = Jw/||Jw|| is a Rayleigh-type lower bound on sigma_max
        new = float(n_jtw)
        if it > 1 and abs(new - est) <= tol * max(new, 1e-300):
            return SpectralNormEstimate(new, it, True)
        est = new
    return SpectralNormEstimate(est, iters, False)


class RemarkStats(NamedTuple):
    mean: float
    max: float
    deviations: np.ndarray


def remark1_deviation(prior, t, n_points, N, rng, mode="monte_carlo"):
    """Draw ``x ~ p1`` and measure ``||S_t(x) - x||`` at each draw.

    This is a measurement only; for non-degenerate priors the deviation is
    generally nonzero.
    """
    xs = prior.sample(rng.fork(0), n_points)
    est = MeanDenoiser(prior, mode)
    mc_rng = rng.fork(1)
    devs = np.array([np.linalg.norm(est(t, x, N, mc_rng) - x) for x in xs])
    return RemarkStats(float(devs.mean()), float(devs.max()), devs)
