"""Degradation tasks, a procedural image corpus, and the benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FlowAdmmError, ParameterError
from .metrics import psnr, ssim
from .operators import PixelDiagonalOp, TaskOpSpec
from .solvers import PnpFlowConfig, SolverConfig, flow_admm_run, pnp_flow_run
from .tensor import SeededRng

log = logging.getLogger(__name__)

__all__ = [
    "BenchReport",
    "MethodSpec",
    "TASKS",
    "TaskSpec",
    "degrade",
    "degraded_view",
    "paired_bootstrap_ci",
    "run_benchmark",
    "synthetic_images",
]


@dataclass(frozen=True)
class TaskSpec:
    """Forward operator plus additive Gaussian noise level and degradation seed."""

    name: str
    op: TaskOpSpec
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ParameterError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")

    def build(self, shape):
        return self.op.build(shape)


# Desk-scale (32x32) versions of the five benchmark tasks.  Spatial extents
# (kernel support, box half-size) shrink by the image-side ratio 32/128.
TASKS = {
    "denoising": TaskSpec("denoising", TaskOpSpec("identity"), 0.2),
    "deblurring": TaskSpec("deblurring", TaskOpSpec("gaussian_blur", kernel_size=15, sigma_blur=1.0), 0.05),
    "super-resolution": TaskSpec("super-resolution", TaskOpSpec("subsample", stride=2), 0.05),
    "random-inpainting": TaskSpec(
        "random-inpainting", TaskOpSpec("bernoulli_mask", missing_prob=0.7, mask_seed=1234), 0.01),
    "box-inpainting": TaskSpec("box-inpainting", TaskOpSpec("box_mask", half_size=5), 0.05),
}


def degrade(x, task, rng=None, op=None):
    """``y = A x + sigma * eps``.

    For masking operators the noise is applied to observed pixels only.
    """
    x = np.asarray(x, dtype=np.float64)
    if op is None:
        op = task.build(x.shape)
    if rng is None:
        rng = SeededRng(task.seed)
    y = op.apply(x)
    if task.noise_sigma > 0:
        noise = task.noise_sigma * rng.standard_normal(op.out_shape)
        if isinstance(op, PixelDiagonalOp):
            noise = op.apply(noise)
        y = y + noise
    return y


def degraded_view(op, y):
    """The measurement as an image: ``y`` itself when shapes agree, else ``A^T y``."""
    if tuple(op.out_shape) == tuple(op.in_shape):
        return np.asarray(y, dtype=np.float64)
    return op.adjoint(y)


def synthetic_images(n, size=32, seed=0):
    """Procedural grayscale images in [0, 1]: a smooth random field plus shapes."""
    images = np.empty((n, size, size))
    ii, jj = np.mgrid[0:size, 0:size]
    for idx in range(n):
        rng = SeededRng(seed, stream=idx)
        field_ = gaussian_filter(rng.standard_normal((size, size)), size / 8.0, mode="wrap")
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
        img = 0.5 + 0.12 * field_
        n_shapes = 1 + int(rng.integers(3, 1)[0])
        for _ in range(n_shapes):
            cy, cx, rad, level, kind = rng.uniform((5,))
            cy, cx = (0.2 + 0.6 * cy) * size, (0.2 + 0.6 * cx) * size
            rad = (0.1 + 0.15 * rad) * size
            level = 0.1 + 0.8 * level
            if kind < 0.5:
                region = (ii - cy) ** 2 + (jj - cx) ** 2 <= rad ** 2
            else:
                region = (np.abs(ii - cy) <= rad) & (np.abs(jj - cx) <= rad)
            img[region] = 0.7 * level + 0.3 * img[region]
        images[idx] = np.clip(img, 0.0, 1.0)
    return images


def paired_bootstrap_ci(deltas, n_resamples=10000, level=0.95, seed=0):
    """Percentile bootstrap CI for the mean of paired differences.

    Returns ``(mean, low, high)``.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = deltas.size
    if n == 0:
        raise ParameterError("no paired differences")
    rng = SeededRng(seed, stream=0xB007)
    idx = rng.integers(n, n_resamples * n).reshape(n_resamples, n)
    means = deltas[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(deltas.mean()), float(low), float(high)


@dataclass
class MethodSpec:
    """A named solver configuration: ``kind`` is ``"flowadmm"`` or ``"pnpflow"``."""

    name: str
    kind: str
    config: object

    def __post_init__(self):
        if self.kind == "flowadmm" and not isinstance(self.config, SolverConfig):
            raise ParameterError("flowadmm methods take a SolverConfig")
        if self.kind == "pnpflow" and not isinstance(self.config, PnpFlowConfig):
            raise ParameterError("pnpflow methods take a PnpFlowConfig")
        if self.kind not in ("flowadmm", "pnpflow"):
            raise ParameterError(f"unknown method kind {self.kind!r}")

    def run(self, op, y, prior, ground_truth=None):
        runner = flow_admm_run if self.kind == "flowadmm" else pnp_flow_run
        return runner(op, y, prior, self.config, ground_truth=ground_truth)


@dataclass
class BenchReport:
    task: str
    methods: list
    baseline: str
    rows: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    comparisons: list = field(default_factory=list)
    failures: int = 0

    def comparison(self, a, b):
        for c in self.comparisons:
            if c["a"] == a and c["b"] == b:
                return c
        raise KeyError((a, b))

    def summary(self):
        out = []
        for m in self.methods:
            lo = hi = None
            if m == self.baseline:
                lo = hi = 0.0
            else:
                try:
                    c = self.comparison(m, self.baseline)
                    lo, hi = c["ci_low"], c["ci_high"]
                except KeyError:
                    pass
            out.append({"task": self.task, "method": m,
                        "mean_psnr": self.means[m]["psnr"], "mean_ssim": self.means[m]["ssim"],
                        "ci_low": lo, "ci_high": hi})
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["image", "method", "psnr", "ssim", "status"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def to_json(self, path):
        payload = {"summary": self.summary(), "comparisons": self.comparisons,
                   "failures": self.failures}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def run_benchmark(images, task, methods, prior, baseline=None, n_resamples=10000, boot_seed=0):
    """Evaluate every method on every image with a shared (paired) degradation.

    The degraded measurement itself is scored as the pseudo-method
    ``"degraded"``.  Reconstructions are clipped to [0, 1] before scoring.
    Per-image solver failures are recorded and excluded pairwise.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ParameterError("benchmark needs at least two images")
    names = [m.name for m in methods]
    if len(set(names)) != len(names) or "degraded" in names:
        raise ParameterError("method names must be unique and not 'degraded'")
    op = task.build(images.shape[1:])
    all_names = ["degraded", *names]
    report = BenchReport(task.name, all_names, baseline or names[-1])
    scores = {m: [None] * len(images) for m in all_names}

    for i, x in enumerate(images):
        y = degrade(x, task, SeededRng(task.seed, stream=i), op=op)
        recon = {"degraded": degraded_view(op, y)}
        for m in methods:
            try:
                recon[m.name], _ = m.run(op, y, prior)
            except FlowAdmmError as exc:
                log.warning("method %s failed on image %d: %s", m.name, i, exc)
                report.failures += 1
                report.rows.append({"image": i, "method": m.name, "psnr": "", "ssim": "",
                                    "status": f"failed: {exc}"})
        for name in all_names:
            if name not in recon:
                continue
            img = np.clip(recon[name], 0.0, 1.0)
            p, s = psnr(img, x), ssim(img, x)
            scores[name][i] = (p, s)
            report.rows.append({"image": i, "method": name, "psnr": p, "ssim": s, "status": "ok"})

    report.rows.sort(key=lambda r: (r["image"], all_names.index(r["method"])))
    for name in all_names:
        ok = [v for v in scores[name] if v is not None]
        report.means[name] = {
            "psnr": float(np.mean([v[0] for v in ok])) if ok else float("nan"),
            "ssim": float(np.mean([v[1] for v in ok])) if ok else float("nan"),
        }
    for ia, a in enumerate(all_names):
        for b in all_names[ia + 1:]:
            pairs = [(sa[0], sb[0]) for sa, sb in zip(scores[a], scores[b])
                     if sa is not None and sb is not None]
            if not pairs:
                continue
            deltas = np.array([pa - pb for pa, pb in pairs])
            for first, second, d in ((a, b, deltas), (b, a, -deltas)):
                mean, lo, hi = paired_bootstrap_ci(d, n_resamples, seed=boot_seed)
                report.comparisons.append({"a": first, "b": second, "mean": mean,
                                           "ci_low": lo, "ci_high": hi, "n": len(d)})
    return report
