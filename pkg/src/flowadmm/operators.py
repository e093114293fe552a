"""Linear forward operators, their adjoints, and the data-term proximal map.

Every task operator is stored in factored form ``A = Q^H Lam P`` where ``P``
and ``Q`` are orthogonal (unitary for the Fourier case) and ``Lam`` is
diagonal, possibly rectangular.  The prox of ``mu/2 ||Ax - y||^2`` then
reduces to element-wise division in the ``P`` basis.  ``prox_data_cg`` solves
the same normal equations matrix-free and works for any ``LinearOp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ParameterError, ShapeError
from .tensor import SeededRng

__all__ = [
    "CGResult",
    "DiagonalizableOp",
    "FourierOp",
    "LinearOp",
    "PixelDiagonalOp",
    "SubsampleOp",
    "TaskOpSpec",
    "make_bernoulli_mask",
    "make_box_mask",
    "make_gaussian_blur",
    "make_identity",
    "make_op",
    "make_subsample",
    "gaussian_kernel",
    "prox_data_cg",
    "prox_data_closed_form",
]


class LinearOp:
    """Abstract linear map from ``in_shape`` to ``out_shape``."""

    in_shape: tuple
    out_shape: tuple

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def _check_in(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.in_shape:
            raise ShapeError(f"expected input shape {self.in_shape}, got {x.shape}")
        return x

    def _check_out(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.out_shape:
            raise ShapeError(f"expected measurement shape {self.out_shape}, got {y.shape}")
        return y


class DiagonalizableOp(LinearOp):
    """Operator ``A = Q^H Lam P``.

    Subclasses provide the transforms and the diagonal.  ``gram_diag`` holds
    the diagonal of ``Lam^H Lam`` on the coefficient grid of ``P``.
    """

    kind = "diagonalizable"
    gram_diag: np.ndarray

    def P(self, x):
        raise NotImplementedError

    def P_inv(self, c):
        raise NotImplementedError

    def Q(self, y):
        raise NotImplementedError

    def Q_inv(self, d):
        raise NotImplementedError

    def lam_apply(self, c):
        raise NotImplementedError

    def lam_adjoint(self, d):
        raise NotImplementedError

    def apply(self, x):
        return np.real(self.Q_inv(self.lam_apply(self.P(self._check_in(x)))))

    def adjoint(self, y):
        return np.real(self.P_inv(self.lam_adjoint(self.Q(self._check_out(y)))))

    @property
    def strong_convexity(self):
        """Smallest eigenvalue of ``A^T A``, i.e. the strong convexity of ``1/2 ||Ax - y||^2``."""
        return float(self.gram_diag.min())


class PixelDiagonalOp(DiagonalizableOp):
    """Diagonal operator in the pixel basis: identity and 0/1 masks.

    ``mask`` broadcasts against the input (one spatial mask shared by all
    channels).
    """

    def __init__(self, shape, mask, kind):
        self.in_shape = self.out_shape = tuple(shape)
        self.kind = kind
        self.mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), self.in_shape)
        self.gram_diag = self.mask ** 2

    def P(self, x):
        return x

    P_inv = Q = Q_inv = P

    def lam_apply(self, c):
        return self.mask * c

    lam_adjoint = lam_apply


class FourierOp(DiagonalizableOp):
    """Circular convolution, diagonalized by the unitary 2-D DFT per channel."""

    def __init__(self, shape, otf, kind="gaussian_blur", kernel=None):
        self.in_shape = self.out_shape = tuple(shape)
        if len(self.in_shape) < 2:
            raise ShapeError("convolution needs at least two spatial axes")
        self.kind = kind
        self.otf = np.asarray(otf, dtype=np.complex128)
        self.kernel = kernel
        self.gram_diag = np.broadcast_to(np.abs(self.otf) ** 2, self.in_shape)

    def P(self, x):
        return np.fft.fft2(x, norm="ortho")

    def P_inv(self, c):
        return np.fft.ifft2(c, norm="ortho")

    Q, Q_inv = P, P_inv

    def lam_apply(self, c):
        return self.otf * c

    def lam_adjoint(self, d):
        return np.conj(self.otf) * d


class SubsampleOp(DiagonalizableOp):
    """Keep one pixel every ``stride`` pixels per spatial axis, offset 0.

    ``Lam`` is the rectangular selection matrix; ``Lam^H`` is zero-filled
    upsampling.
    """

    kind = "subsample"

    def __init__(self, shape, stride):
        self.in_shape = tuple(shape)
        self.stride = stride
        *lead, h, w = self.in_shape
        self.out_shape = (*lead, h // stride, w // stride)
        keep = np.zeros((h, w))
        keep[::stride, ::stride] = 1.0
        self.gram_diag = np.broadcast_to(keep, self.in_shape)

    def P(self, x):
        return x

    P_inv = Q = Q_inv = P

    def lam_apply(self, c):
        s = self.stride
        return c[..., ::s, ::s]

    def lam_adjoint(self, d):
        s = self.stride
        out = np.zeros(self.in_shape, dtype=np.result_type(d, np.float64))
        out[..., ::s, ::s] = d
        return out


def _spatial(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) < 2 or any(d < 1 for d in shape):
        raise ShapeError(f"image operator needs (..., H, W) shape, got {shape}")
    return shape


def make_identity(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}")
    return PixelDiagonalOp(shape, 1.0, "identity")


def gaussian_kernel(kernel_size, sigma_blur):
    """L1-normalized isotropic Gaussian kernel of odd side ``kernel_size``."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and positive, got {kernel_size}")
    if not sigma_blur > 0:
        raise ParameterError(f"sigma_blur must be > 0, got {sigma_blur}")
    r = np.arange(kernel_size) - kernel_size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma_blur ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def make_gaussian_blur(shape, kernel_size, sigma_blur):
    shape = _spatial(shape)
    kernel = gaussian_kernel(kernel_size, sigma_blur)
    h, w = shape[-2:]
    c = kernel_size // 2
    # center tap at (0, 0); taps falling outside the image wrap around
    psf = np.zeros((h, w))
    ii, jj = np.meshgrid(np.arange(kernel_size) - c, np.arange(kernel_size) - c, indexing="ij")
    np.add.at(psf, (ii % h, jj % w), kernel)
    otf = np.fft.fft2(psf)
    return FourierOp(shape, otf, "gaussian_blur", kernel=kernel)


def make_subsample(shape, stride):
    shape = _spatial(shape)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    h, w = shape[-2:]
    if h % stride or w % stride:
        raise ParameterError(f"stride {stride} does not divide spatial size {h}x{w}")
    return SubsampleOp(shape, stride)


def box_mask(h, w, half_size):
    mask = np.ones((h, w))
    if half_size > 0:
        ci, cj = h // 2, w // 2
        mask[ci - half_size:ci + half_size, cj - half_size:cj + half_size] = 0.0
    return mask


def make_box_mask(shape, half_size):
    shape = _spatial(shape)
    h, w = shape[-2:]
    if half_size < 0 or 2 * half_size > min(h, w):
        raise ParameterError(f"box half_size {half_size} does not fit a {h}x{w} image")
    return PixelDiagonalOp(shape, box_mask(h, w, half_size), "box_mask")


def bernoulli_mask(h, w, missing_prob, mask_seed):
    u = SeededRng(mask_seed, stream=0xB0B).uniform((h, w))
    return (u >= missing_prob).astype(np.float64)


def make_bernoulli_mask(shape, missing_prob, mask_seed):
    shape = _spatial(shape)
    if not 0.0 <= missing_prob < 1.0:
        raise ParameterError(f"missing_prob must lie in [0, 1), got {missing_prob}")
    h, w = shape[-2:]
    return PixelDiagonalOp(shape, bernoulli_mask(h, w, missing_prob, mask_seed), "bernoulli_mask")


@dataclass(frozen=True)
class TaskOpSpec:
    """Serializable description of a task forward operator."""

    kind: str = "identity"
    kernel_size: int = 15
    sigma_blur: float = 1.0
    stride: int = 2
    half_size: int = 5
    missing_prob: float = 0.7
    mask_seed: int = 0

    KINDS = ("identity", "gaussian_blur", "subsample", "box_mask", "bernoulli_mask")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ParameterError(f"unknown operator kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "gaussian_blur" and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise ParameterError("kernel_size must be odd")
        if self.kind == "subsample" and self.stride < 1:
            raise ParameterError("stride must be >= 1")
        if self.kind == "bernoulli_mask" and not 0.0 <= self.missing_prob < 1.0:
            raise ParameterError("missing_prob must lie in [0, 1)")
        if self.kind == "box_mask" and self.half_size < 0:
            raise ParameterError("half_size must be >= 0")

    def build(self, shape):
        return make_op(self, shape)


def make_op(spec, shape):
    if spec.kind == "identity":
        return make_identity(shape)
    if spec.kind == "gaussian_blur":
        return make_gaussian_blur(shape, spec.kernel_size, spec.sigma_blur)
    if spec.kind == "subsample":
        return make_subsample(shape, spec.stride)
    if spec.kind == "box_mask":
        return make_box_mask(shape, spec.half_size)
    return make_bernoulli_mask(shape, spec.missing_prob, spec.mask_seed)


def prox_data_closed_form(op, v, y, mu):
    """Exact minimizer of ``1/2 ||x - v||^2 + mu/2 ||A x - y||^2``.

    In the ``P`` basis the normal equations are diagonal::

        z_i = ((P v)_i + mu * conj(lam_i) (Q y)_i) / (1 + mu |lam_i|^2)

    and the result is ``P^H z``.  For real spectra this is the usual
    ``(Pv + mu lam Qy) / (1 + mu lam^2)``.
    """
    if not mu > 0:
        raise ParameterError(f"mu must be > 0, got {mu}")
    v = op._check_in(v)
    y = op._check_out(y)
    num = op.P(v) + mu * op.lam_adjoint(op.Q(y))
    z = num / (1.0 + mu * op.gram_diag)
    return np.real(op.P_inv(z))


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def prox_data_cg(op, v, y, mu, tol=1e-10, max_iters=500):
    """Solve ``(I + mu A^T A) x = v + mu A^T y`` by conjugate gradients.

    Stops once ``||r|| <= tol * ||rhs||``; raises ``ConvergenceError`` if
    ``max_iters`` is exhausted first.
    """
    if not mu > 0:
        raise ParameterError(f"mu must be > 0, got {mu}")
    if not tol > 0:
        raise ParameterError(f"tol must be > 0, got {tol}")
    v = op._check_in(v)
    y = op._check_out(y)

    def normal(p):
        return p + mu * op.adjoint(op.apply(p))

    rhs = v + mu * op.adjoint(y)
    target = tol * np.linalg.norm(rhs)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rr = float(np.vdot(r, r))
    if np.sqrt(rr) <= target:
        return CGResult(x, 0, float(np.sqrt(rr)))
    p = r.copy()
    for it in range(1, max_iters + 1):
        Ap = normal(p)
        alpha = rr / float(np.vdot(p, Ap))
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(np.vdot(r, r))
        if np.sqrt(rr_new) <= target:
            return CGResult(x, it, float(np.sqrt(rr_new)))
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(rhs - normal(x)))
    raise ConvergenceError(
        f"CG did not reach relative residual {tol:g} in {max_iters} iterations "
        f"(final residual {res:.3e})",
        residual=res,
        iterations=max_iters,
    )
