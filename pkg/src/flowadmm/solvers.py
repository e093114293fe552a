"""FlowADMM, the PnP-Flow forward-backward baseline, and convergence checks.

FlowADMM replaces the regularizer prox in scaled-dual ADMM by the mean
renoise-denoise operator::

    x <- prox_{tau F_y}(z - u)
    z <- S_t(x + u)
    u <- u + x - z

starting from ``x = z = A^T y`` and ``u = 0``; the reconstruction is the
final ``z``.

For a Gaussian prior and a diagonalizable forward operator every step is
affine and diagonal in the operator's ``P`` basis, so the fixed-``t``
iteration splits into independent 2x2 linear maps on ``(z_i, u_i)``.  The
helpers at the bottom of this module exploit that to get exact spectral
radii and fixed points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import AssumptionError, DivergenceError, ParameterError, UnsupportedError
from .flow_prior import GaussianPrior
from .metrics import psnr
from .operators import DiagonalizableOp, FourierOp, prox_data_cg, prox_data_closed_form
from .renoise import MeanDenoiser, SampleSchedule, TimeSchedule
from .tensor import SeededRng, write_f64

__all__ = [
    "AdmmState",
    "IterRecord",
    "PnpFlowConfig",
    "Prop2Report",
    "RunTrace",
    "SolverConfig",
    "affine_admm_fixed_point",
    "affine_admm_spectral_radius",
    "flow_admm_run",
    "flow_admm_step",
    "geometric_rate",
    "pnp_flow_run",
    "prop1_tau_lower_bound",
    "prop2_schedule_check",
]

DIVERGENCE_FACTOR = 1e8


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    k: int = 0


@dataclass
class SolverConfig:
    """FlowADMM settings.

    ``times`` is a ``TimeSchedule``, an explicit sequence of length ``K``, or a
    single float for a constant schedule.
    """

    tau: float
    K: int
    times: Union[TimeSchedule, Sequence[float], float]
    samples: SampleSchedule = field(default_factory=lambda: SampleSchedule.constant(1))
    estimator: str = "monte_carlo"
    seed: int = 0
    snapshot_every: int = 0
    prox: str = "auto"
    cg_tol: float = 1e-10
    cg_max_iters: int = 1000

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        if self.prox not in ("auto", "closed_form", "cg"):
            raise ParameterError(f"unknown prox mode {self.prox!r}")
        self.time_sequence()

    def time_sequence(self):
        return _resolve_times(self.times, self.K)


@dataclass
class PnpFlowConfig:
    """PnP-Flow settings; the gradient step is ``lr * (1 - t_k)^alpha``."""

    lr: float
    K: int
    times: Union[TimeSchedule, Sequence[float], float]
    samples: SampleSchedule = field(default_factory=lambda: SampleSchedule.constant(1))
    alpha: float = 0.0
    estimator: str = "monte_carlo"
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        self.time_sequence()

    def time_sequence(self):
        return _resolve_times(self.times, self.K)

    def step_sizes(self):
        t = self.time_sequence()
        return self.lr * (1.0 - t) ** self.alpha


def _resolve_times(times, K):
    if isinstance(times, TimeSchedule):
        if times.K != K:
            raise ParameterError(f"time schedule has K={times.K}, solver has K={K}")
        return times.sequence()
    if np.ndim(times) == 0:
        seq = np.full(K, float(times))
    else:
        seq = np.asarray(times, dtype=np.float64)
        if seq.shape != (K,):
            raise ParameterError(f"time sequence must have length K={K}")
    if np.any((seq < 0) | (seq > 1)):
        raise ParameterError("times must lie in [0, 1]")
    return seq


@dataclass
class IterRecord:
    k: int
    t: float
    N: int
    primal_residual: float
    dz: float
    u_norm: float
    evals: int
    psnr: Optional[float] = None


CSV_FIELDS = ("k", "t_k", "N_k", "primal_residual", "dz", "u_norm", "psnr")


@dataclass
class RunTrace:
    """Per-iteration diagnostics.

    For FlowADMM ``primal_residual = ||x_{k+1} - z_{k+1}||``,
    ``dz = ||z_{k+1} - z_k||`` and ``u_norm = ||u_{k+1}||``.  For PnP-Flow
    they are ``||z_{k+1} - x_{k+1}||`` (gradient iterate vs. denoised),
    ``||x_{k+1} - x_k||`` and 0.
    """

    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def total_evals(self):
        return sum(r.evals for r in self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for r in self.records:
                writer.writerow([r.k, repr(r.t), r.N, repr(r.primal_residual), repr(r.dz),
                                 repr(r.u_norm), "" if r.psnr is None else repr(r.psnr)])

    def write_snapshots(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, state in self.snapshots:
            for name in ("x", "z", "u"):
                write_f64(directory / f"{name}_{k:05d}.f64", getattr(state, name))


def _make_prox(op, y, tau, mode, cg_tol=1e-10, cg_max_iters=1000):
    if mode == "auto":
        mode = "closed_form" if isinstance(op, DiagonalizableOp) else "cg"
    if mode == "closed_form":
        return lambda v: prox_data_closed_form(op, v, y, tau)
    return lambda v: prox_data_cg(op, v, y, tau, cg_tol, cg_max_iters).x


def flow_admm_step(state, prox, mean_denoise, t, N=1, rng=None):
    """One FlowADMM update of ``(x, z, u)``.

    ``prox(v)`` is the data prox; ``mean_denoise(t, w, N, rng)`` the (possibly
    Monte Carlo) mean renoise-denoise operator.
    """
    x = prox(state.z - state.u)
    z = mean_denoise(t, x + state.u, N, rng)
    u = state.u + x - z
    return AdmmState(x, z, u, state.k + 1)


def _guard(k, limit, *arrays):
    for a in arrays:
        n = float(np.linalg.norm(a))
        if not np.isfinite(n) or n > limit:
            raise DivergenceError(f"iterate diverged at iteration {k} (norm {n:.3e})",
                                  iteration=k, norm=n)


def _psnr(x, ref):
    if ref is None:
        return None
    return psnr(np.clip(x, 0.0, 1.0), ref)


def flow_admm_run(op, y, prior, cfg, ground_truth=None, mean_denoise=None):
    """Run FlowADMM for ``cfg.K`` iterations; returns ``(z_K, trace)``.

    ``mean_denoise`` overrides the estimator built from ``prior`` and
    ``cfg.estimator``.
    """
    y = np.asarray(y, dtype=np.float64)
    times = cfg.time_sequence()
    prox = _make_prox(op, y, cfg.tau, cfg.prox, cfg.cg_tol, cfg.cg_max_iters)
    if mean_denoise is None:
        mean_denoise = MeanDenoiser(prior, cfg.estimator)
    exact = getattr(mean_denoise, "exact", False)
    rng = SeededRng(cfg.seed, stream=1)

    init = op.adjoint(y)
    limit = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(init))
    state = AdmmState(init.copy(), init.copy(), np.zeros_like(init), 0)
    trace = RunTrace()
    for k in range(cfg.K):
        t = float(times[k])
        n = cfg.samples(k, cfg.K)
        new = flow_admm_step(state, prox, mean_denoise, t, n, rng)
        _guard(k, limit, new.x, new.z, new.u)
        trace.records.append(IterRecord(
            k=k, t=t, N=n,
            primal_residual=float(np.linalg.norm(new.x - new.z)),
            dz=float(np.linalg.norm(new.z - state.z)),
            u_norm=float(np.linalg.norm(new.u)),
            evals=0 if exact else n,
            psnr=_psnr(new.z, ground_truth),
        ))
        state = new
        if cfg.snapshot_every and (k + 1) % cfg.snapshot_every == 0:
            trace.snapshots.append((k + 1, state))
    return state.z, trace


def pnp_flow_run(op, y, prior, cfg, ground_truth=None, mean_denoise=None):
    """PnP-Flow: gradient step on ``1/2 ||Ax - y||^2`` then renoise-denoise.

    With ``N_k > 1`` the denoising is averaged over ``N_k`` noise draws.
    Returns ``(x_K, trace)``.
    """
    y = np.asarray(y, dtype=np.float64)
    times = cfg.time_sequence()
    steps = cfg.step_sizes()
    if mean_denoise is None:
        mean_denoise = MeanDenoiser(prior, cfg.estimator)
    exact = getattr(mean_denoise, "exact", False)
    rng = SeededRng(cfg.seed, stream=1)

    x = op.adjoint(y)
    limit = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(x))
    trace = RunTrace()
    for k in range(cfg.K):
        t = float(times[k])
        n = cfg.samples(k, cfg.K)
        z = x - steps[k] * op.adjoint(op.apply(x) - y)
        x_new = mean_denoise(t, z, n, rng)
        _guard(k, limit, z, x_new)
        trace.records.append(IterRecord(
            k=k, t=t, N=n,
            primal_residual=float(np.linalg.norm(z - x_new)),
            dz=float(np.linalg.norm(x_new - x)),
            u_norm=0.0,
            evals=0 if exact else n,
            psnr=_psnr(x_new, ground_truth),
        ))
        x = x_new
        if cfg.snapshot_every and (k + 1) % cfg.snapshot_every == 0:
            trace.snapshots.append((k + 1, AdmmState(x, z, np.zeros_like(x), k + 1)))
    return x, trace


# -- convergence theory -----------------------------------------------------

def prop1_tau_lower_bound(xi, mu_strong):
    """Strict lower bound ``xi / ((1 + xi - 2 xi^2) mu)`` on the data penalty.

    Raises ``AssumptionError`` when the averagedness result does not apply
    (``xi >= 1``, nonpositive denominator, or ``mu <= 0``).
    """
    if xi < 0:
        raise ParameterError(f"xi must be >= 0, got {xi}")
    if xi >= 1.0:
        raise AssumptionError(f"Prop. 1 hypotheses unmet: xi = {xi} >= 1")
    denom = 1.0 + xi - 2.0 * xi * xi
    if denom <= 0:
        raise AssumptionError("Prop. 1 hypotheses unmet: 1 + xi - 2 xi^2 <= 0")
    if not mu_strong > 0:
        raise AssumptionError(f"Prop. 1 hypotheses unmet: data term not strongly convex (mu={mu_strong})")
    return xi / (denom * mu_strong)


def _affine_coeffs(prior, op, tau, t):
    """Per-coefficient prox gain ``p`` and mean-operator slope ``s`` in the P basis."""
    if not isinstance(prior, GaussianPrior):
        raise UnsupportedError("affine analysis needs a GaussianPrior")
    if not isinstance(op, DiagonalizableOp):
        raise UnsupportedError("affine analysis needs a diagonalizable operator")
    if isinstance(op, FourierOp) and not prior.isotropic:
        raise UnsupportedError("prior covariance is not diagonal in the Fourier basis")
    p = 1.0 / (1.0 + tau * op.gram_diag)
    s = np.broadcast_to(t * np.asarray(prior.shrink(t)), p.shape)
    return p, s


def affine_admm_spectral_radius(prior, op, tau, t):
    """Spectral radius of the linear part of the fixed-``t`` map ``(z, u) -> (z', u')``.

    Per coefficient, with prox gain ``p = 1/(1 + tau |lam|^2)`` and mean
    slope ``s = t M_t``, the map is::

        [[s p,        s (1 - p)      ],
         [(1 - s) p,  (1 - s)(1 - p) ]]
    """
    p, s = _affine_coeffs(prior, op, tau, t)
    blocks = np.empty(p.shape + (2, 2))
    blocks[..., 0, 0] = s * p
    blocks[..., 0, 1] = s * (1.0 - p)
    blocks[..., 1, 0] = (1.0 - s) * p
    blocks[..., 1, 1] = (1.0 - s) * (1.0 - p)
    return float(np.max(np.abs(np.linalg.eigvals(blocks.reshape(-1, 2, 2)))))


def affine_admm_fixed_point(prior, op, y, tau, t):
    """Exact fixed point ``(z*, u*)`` of the fixed-``t`` FlowADMM map.

    Solves, per coefficient, ``x = z``, ``z = m + s (z + u - m)`` and
    ``x = p (z - u) + p tau b`` with ``b = Lam^H Q y`` and ``m = P mean``.
    """
    p, s = _affine_coeffs(prior, op, tau, t)
    b = op.lam_adjoint(op.Q(np.asarray(y, dtype=np.float64)))
    m = op.P(np.broadcast_to(prior.mean, op.in_shape))
    z = p * (tau * b * s + (1.0 - s) * m) / ((1.0 - p) * s + p * (1.0 - s))
    u = (p * tau * b - (1.0 - p) * z) / p
    return np.real(op.P_inv(z)), np.real(op.P_inv(u))


def geometric_rate(gaps, floor=1e-11):
    """Median one-step contraction ratio of a gap sequence, ignoring the
    first step and anything below ``floor * gaps[0]``."""
    gaps = np.asarray(gaps, dtype=np.float64)
    keep = gaps > floor * gaps[0]
    ratios = [gaps[i + 1] / gaps[i] for i in range(1, len(gaps) - 1) if keep[i + 1]]
    if not ratios:
        return 0.0
    return float(np.median(ratios))


@dataclass
class Prop2Report:
    gaps: np.ndarray
    terminal_gap: float
    z_star: np.ndarray
    u_star: np.ndarray
    z_final: np.ndarray
    u_final: np.ndarray
    times: np.ndarray


def prop2_schedule_check(prior, op, y, tau, t_max, c=0.3, r=0.9, K=400, times=None):
    """Run exact-estimator FlowADMM on ``t_k = t_max - c r^k`` (or ``times``)
    and compare with the fixed point of the ``t_max`` map.

    Report only: no pass/fail decision is made here.
    """
    if times is None:
        if not 0.0 < r < 1.0 and c != 0.0:
            raise ParameterError("r must lie in (0, 1) for a summable schedule")
        times = t_max - c * r ** np.arange(K)
    K = len(times)
    times = np.clip(np.asarray(times, dtype=np.float64), 0.0, t_max)
    z_star, u_star = affine_admm_fixed_point(prior, op, y, tau, t_max)
    y = np.asarray(y, dtype=np.float64)
    prox = _make_prox(op, y, tau, "auto")
    md = MeanDenoiser(prior, "exact_gaussian")
    init = op.adjoint(y)
    state = AdmmState(init.copy(), init.copy(), np.zeros_like(init))
    gaps = np.empty(K)
    for k in range(K):
        state = flow_admm_step(state, prox, md, float(times[k]))
        gaps[k] = np.linalg.norm(state.z - z_star)
    return Prop2Report(gaps, float(gaps[-1]), z_star, u_star, state.z, state.u, times)
