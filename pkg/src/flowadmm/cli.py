"""``flowadmm`` command line: degrade, solve, bench, probe-lipschitz, validate.

Every command takes ``--config <json>`` (optional, defaults otherwise),
``--seed N`` (overrides the config seed) and ``--out <dir>``.  Outputs
depend only on the config, the seed and the inputs, so reruns are
byte-identical.

Exit codes: 0 success, 1 a validate check failed, 2 config or IO error,
3 solver divergence, 4 benchmark finished with per-image failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import TaskSpec, degrade, degraded_view, run_benchmark, synthetic_images
from .config import load_config
from .errors import AssumptionError, ConfigError, DivergenceError, FlowAdmmError
from .flow_prior import GaussianPrior, GmmPrior, gaussian_velocity_lipschitz
from .metrics import psnr
from .operators import TaskOpSpec, prox_data_cg, prox_data_closed_form
from .renoise import (
    MeanDenoiser,
    jacobian_spectral_norm,
    lemma1_bound,
    mean_denoise_exact_gaussian,
    mean_denoise_mc,
    residual_lipschitz_gaussian,
)
from .solvers import (
    affine_admm_spectral_radius,
    flow_admm_run,
    pnp_flow_run,
    prop1_tau_lower_bound,
)
from .tensor import SeededRng, read_f64, read_pnm, write_f64, write_pnm

log = logging.getLogger("flowadmm")

EXIT_OK, EXIT_VALIDATE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4

MANIFEST_FORMAT = "flowadmm-degrade/1"


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _task_record(task):
    op = task.op
    return {"name": task.name, "kind": op.kind, "kernel_size": op.kernel_size,
            "sigma_blur": op.sigma_blur, "stride": op.stride, "half_size": op.half_size,
            "missing_prob": op.missing_prob, "mask_seed": op.mask_seed,
            "noise_sigma": task.noise_sigma, "seed": task.seed}


def _task_from_record(rec):
    op = TaskOpSpec(kind=rec["kind"], kernel_size=rec["kernel_size"], sigma_blur=rec["sigma_blur"],
                    stride=rec["stride"], half_size=rec["half_size"],
                    missing_prob=rec["missing_prob"], mask_seed=rec["mask_seed"])
    return TaskSpec(rec["name"], op, rec["noise_sigma"], rec["seed"])


def _read_image(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    try:
        if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
            return read_pnm(path)
        return read_f64(path)
    except OSError as exc:
        raise ConfigError(f"cannot read input {path}: {exc.strerror}") from exc


# -- degrade ----------------------------------------------------------------

def cmd_degrade(cfg, args):
    out = _out_dir(args)
    task = cfg.task_spec()
    if args.input is not None:
        images = [_read_image(p) for p in args.input]
        source = {"inputs": [str(p) for p in args.input]}
    else:
        n = args.synthetic if args.synthetic is not None else cfg["data.images"]
        images = list(synthetic_images(n, cfg["data.size"], cfg["data.seed"]))
        source = {"synthetic": n, "size": cfg["data.size"], "data_seed": cfg["data.seed"]}
    shape = images[0].shape
    if any(img.shape != shape for img in images):
        raise ConfigError("all inputs must share one shape")
    try:
        op = task.build(shape)
    except FlowAdmmError as exc:
        raise ConfigError(f"task {task.name!r} does not fit images of shape {shape}: {exc}") from exc

    entries = []
    for i, x in enumerate(images):
        y = degrade(x, task, SeededRng(task.seed, stream=i), op=op)
        names = {"x": f"x_{i:03d}.f64", "y": f"y_{i:03d}.f64", "preview": f"y_{i:03d}.pgm"}
        write_f64(out / names["x"], x)
        write_f64(out / names["y"], y)
        write_pnm(out / names["preview"], degraded_view(op, y))
        entries.append({"index": i, **names, "noise_stream": i})
    manifest = {"format": MANIFEST_FORMAT, "task": _task_record(task), "shape": list(shape),
                "measurement_shape": list(op.out_shape), "source": source, "images": entries}
    _dump_json(out / "manifest.json", manifest)
    print(f"wrote {len(entries)} measurements for task {task.name} "
          f"(noise sigma {task.noise_sigma}) to {out}")
    return EXIT_OK


# -- solve ------------------------------------------------------------------

def _load_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: unrecognized manifest format {manifest.get('format')!r}")
    return manifest


def cmd_solve(cfg, args):
    out = _out_dir(args)
    src = Path(args.input[0]) if args.input else out
    manifest = _load_manifest(src)
    task = _task_from_record(manifest["task"])
    shape = tuple(manifest["shape"])
    op = task.build(shape)
    if tuple(op.out_shape) != tuple(manifest["measurement_shape"]):
        raise ConfigError(f"manifest measurement shape {manifest['measurement_shape']} does not "
                          f"match operator output {op.out_shape}")
    prior = cfg.build_prior(shape)
    method = cfg.method()

    results = []
    for entry in manifest["images"]:
        y = _read_image(src / entry["y"])
        if y.shape != tuple(op.out_shape):
            raise ConfigError(f"{entry['y']}: shape {y.shape} does not match operator output "
                              f"{op.out_shape}")
        truth = None
        if entry.get("x") and (src / entry["x"]).exists():
            truth = _read_image(src / entry["x"])
            if truth.shape != shape:
                raise ConfigError(f"{entry['x']}: shape {truth.shape} does not match {shape}")
        recon, trace = method.run(op, y, prior, ground_truth=truth)
        i = entry["index"]
        write_f64(out / f"recon_{i:03d}.f64", recon)
        write_pnm(out / f"recon_{i:03d}.pgm", recon)
        trace.to_csv(out / f"trace_{i:03d}.csv")
        if trace.snapshots:
            trace.write_snapshots(out / f"snapshots_{i:03d}")
        results.append({"index": i, "iterations": len(trace), "denoiser_evals": trace.total_evals,
                        "final_psnr": None if truth is None else psnr(np.clip(recon, 0, 1), truth)})
    summary = {"solver": method.kind, "task": task.name, "seed": cfg.seed, "images": results,
               "iterations": results[0]["iterations"] if results else 0,
               "denoiser_evals": sum(r["denoiser_evals"] for r in results)}
    scored = [r["final_psnr"] for r in results if r["final_psnr"] is not None]
    if scored:
        summary["final_psnr"] = float(np.mean(scored))
    _dump_json(out / "summary.json", summary)
    msg = f"solved {len(results)} images with {method.kind}"
    if scored:
        msg += f"; mean PSNR {summary['final_psnr']:.2f} dB"
    print(msg)
    return EXIT_OK


# -- bench ------------------------------------------------------------------

def cmd_bench(cfg, args):
    out = _out_dir(args)
    images = synthetic_images(cfg["data.images"], cfg["data.size"], cfg["data.seed"])
    task = cfg.task_spec()
    methods = cfg.methods()
    prior = cfg.build_prior(images.shape[1:])
    report = run_benchmark(images, task, methods, prior, baseline=cfg["bench.baseline"],
                           n_resamples=cfg["bench.resamples"], boot_seed=cfg["bench.boot_seed"])
    report.to_csv(out / "bench.csv")
    report.to_json(out / "bench.json")
    for row in report.summary():
        ci = "" if row["ci_low"] is None else f"  CI vs {report.baseline} [{row['ci_low']:+.3f}, {row['ci_high']:+.3f}]"
        print(f"{row['method']:>12s}  PSNR {row['mean_psnr']:7.3f}  SSIM {row['mean_ssim']:.4f}{ci}")
    if report.failures:
        print(f"{report.failures} per-image failures recorded", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# -- probe-lipschitz --------------------------------------------------------

def _late_iterates(cfg, prior, shape):
    """Late-stage ``z`` iterates: from a snapshot directory or a fresh run."""
    n = cfg["probe.points"]
    if cfg["probe.snapshots"] is not None:
        files = sorted(Path(cfg["probe.snapshots"]).glob("z_*.f64"))
        if not files:
            raise ConfigError(f"no z_*.f64 snapshots in {cfg['probe.snapshots']}")
        return [read_f64(f) for f in files[-n:]]
    task = cfg.task_spec()
    x = synthetic_images(1, shape[0], cfg["data.seed"])[0]
    op = task.build(shape)
    y = degrade(x, task, SeededRng(task.seed, stream=0), op=op)
    run_cfg = cfg.with_overrides({"solver.snapshot_every": 1})
    runner = flow_admm_run if run_cfg["solver.kind"] == "flowadmm" else pnp_flow_run
    solver_cfg = run_cfg.solver_config() if runner is flow_admm_run else run_cfg.pnp_config()
    _, trace = runner(op, y, prior, solver_cfg)
    return [state.z for _, state in trace.snapshots[-n:]]


def _velocity_norm(prior, t, x, iters, rng):
    """``||J_x v_t(x)||_2`` with the cheapest exact-enough Jacobian access."""
    if isinstance(prior, GmmPrior):
        return jacobian_spectral_norm(lambda p: prior.velocity(t, p), x, iters=iters,
                                      rng=rng, batched=True).value
    return jacobian_spectral_norm(
        lambda p: prior.velocity(t, p), x, iters=iters, rng=rng,
        jvp=lambda w: prior.velocity_jvp(t, x, w), vjp=lambda w: prior.velocity_vjp(t, x, w),
    ).value


def cmd_probe_lipschitz(cfg, args):
    out = _out_dir(args)
    prior = cfg.build_prior()
    shape = cfg.shape
    iterates = _late_iterates(cfg, prior, shape)
    rng = SeededRng(cfg.seed, stream=0x9B0BE)
    rows = []
    for j, t in enumerate(cfg["probe.t_grid"]):
        t = float(t)
        t_rng = rng.fork(j)
        for z in iterates:
            if t >= 1.0:
                rows.append((t, 0.0))
                continue
            z_tilde = t * z + (1.0 - t) * t_rng.standard_normal(z.shape)
            L = _velocity_norm(prior, t, z_tilde, cfg["probe.iters"], t_rng)
            rows.append((t, (1.0 - t) * L))
    with open(out / "probe.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "estimate"])
        writer.writerows([(repr(t), repr(e)) for t, e in rows])
    with open(out / "probe_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "n", "median", "mean", "max"])
        for t in dict.fromkeys(t for t, _ in rows):
            vals = np.array([e for s, e in rows if s == t])
            writer.writerow([repr(t), vals.size, repr(float(np.median(vals))),
                             repr(float(vals.mean())), repr(float(vals.max()))])
            print(f"t={t:.3f}  median (1-t)L_v = {np.median(vals):.6f}")
    return EXIT_OK


# -- validate ---------------------------------------------------------------

def _check_adjoint(op, rng):
    x = rng.standard_normal(op.in_shape)
    y = rng.standard_normal(op.out_shape)
    lhs = float(np.vdot(op.apply(x), y))
    rhs = float(np.vdot(x, op.adjoint(y)))
    err = abs(lhs - rhs) / max(1.0, abs(lhs))
    return err <= 1e-10, f"relative mismatch {err:.2e}"


def _check_prox(op, tau, rng):
    v = rng.standard_normal(op.in_shape)
    y = rng.standard_normal(op.out_shape)
    closed = prox_data_closed_form(op, v, y, tau)
    iterative = prox_data_cg(op, v, y, tau, tol=1e-12, max_iters=2000).x
    diff = float(np.max(np.abs(closed - iterative)))
    grad = closed - v + tau * op.adjoint(op.apply(closed) - y)
    gnorm = float(np.linalg.norm(grad))
    return diff <= 1e-6 and gnorm <= 1e-8, f"closed vs CG {diff:.2e}, optimality gradient {gnorm:.2e}"


def _check_schedule(cfg):
    times = cfg.time_schedule().sequence()
    ok = (np.all(np.diff(times) >= 0) and times[0] >= cfg["schedule.t_min"]
          and times[-1] == cfg["schedule.t_max"])
    return bool(ok), f"t from {times[0]:.4f} to {times[-1]:.4f} over K={times.size}"


def _check_budget(cfg):
    cfg_s = cfg.solver_config()
    total = cfg_s.samples.total(cfg_s.K)
    per_iter = [cfg_s.samples(k, cfg_s.K) for k in range(cfg_s.K)]
    return total == sum(per_iter) and min(per_iter) >= 1, f"{total} denoiser evaluations"


def _check_identity_at_one(prior, shape, rng):
    x = rng.standard_normal(shape)
    err = float(np.max(np.abs(prior.denoise(1.0, x) - x)))
    return err == 0.0, f"max |D_1(x) - x| = {err:.1e}"


def _check_mc_vs_exact(prior, t, rng):
    x = prior.sample(rng.fork(0))
    n = 1024
    mc = mean_denoise_mc(prior, t, x, n, rng.fork(1))
    exact = mean_denoise_exact_gaussian(prior, t, x)
    # per-entry standard error of the mean of D_t(t x + (1-t) eps)
    se = np.sqrt(np.broadcast_to(prior.shrink(t), x.shape) ** 2 * (1.0 - t) ** 2 / n)
    z = float(np.max(np.abs(mc - exact) / se))
    return z <= 5.0 + np.sqrt(2.0 * np.log(x.size)), f"max standardized error {z:.2f}"


def _check_lemma1(prior, times):
    worst = -np.inf
    for t in np.unique(times):
        if t >= 1.0:
            continue
        worst = max(worst, residual_lipschitz_gaussian(prior, t)
                    - lemma1_bound(t, gaussian_velocity_lipschitz(prior, t)))
    return worst <= 1e-10, f"max (Lip R_t - bound) = {worst:.2e}"


def _check_prop1(prior, op, tau, t):
    xi = lemma1_bound(t, gaussian_velocity_lipschitz(prior, t))
    try:
        bound = prop1_tau_lower_bound(xi, op.strong_convexity)
    except AssumptionError as exc:
        return None, str(exc)
    if tau <= bound:
        return None, f"tau = {tau} not above the bound {bound:.4g}; no guarantee to check"
    radius = affine_admm_spectral_radius(prior, op, tau, t)
    return radius < 1.0, f"tau = {tau} > {bound:.4g}, spectral radius {radius:.6f}"


def _check_determinism(cfg, prior, shape):
    small = cfg.with_overrides({"solver.K": 5, "pnp.K": 5})
    task = small.task_spec()
    x = synthetic_images(1, shape[0], small["data.seed"])[0]
    op = task.build(shape)
    y = degrade(x, task, SeededRng(task.seed, stream=0), op=op)
    method = small.method()
    a, _ = method.run(op, y, prior)
    b, _ = method.run(op, y, prior)
    return a.tobytes() == b.tobytes(), "two 5-iteration runs compared bytewise"


def cmd_validate(cfg, args):
    shape = cfg.shape
    op = cfg.task_spec().build(shape)
    prior = cfg.build_prior(shape)
    tau = float(cfg["solver.tau"])
    t_max = float(cfg["schedule.t_max"])
    rng = SeededRng(cfg.seed, stream=0xC4EC)
    is_gauss = isinstance(prior, GaussianPrior)

    checks = [
        (f"adjoint[{op.kind}]", lambda: _check_adjoint(op, rng.fork(0))),
        ("prox.closed_form_vs_cg", lambda: _check_prox(op, tau, rng.fork(1))),
        ("schedule.times", lambda: _check_schedule(cfg)),
        ("schedule.budget", lambda: _check_budget(cfg)),
        ("denoiser.identity_at_t1", lambda: _check_identity_at_one(prior, shape, rng.fork(2))),
        ("mean_operator.mc_vs_exact",
         (lambda: _check_mc_vs_exact(prior, t_max, rng.fork(3))) if is_gauss
         else (lambda: (None, "needs a Gaussian prior"))),
        ("residual.lipschitz_bound",
         (lambda: _check_lemma1(prior, cfg.time_schedule().sequence())) if is_gauss
         else (lambda: (None, "closed-form L_v needs a Gaussian prior"))),
    ]
    if cfg["validate.prop1"]:
        checks.append(("prop1.averagedness",
                       (lambda: _check_prop1(prior, op, tau, t_max)) if is_gauss
                       else (lambda: (None, "Prop. 1 hypotheses unmet: L_v unknown for this prior"))))
    checks.append(("solver.determinism", lambda: _check_determinism(cfg, prior, shape)))

    failed = 0
    lines = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except FlowAdmmError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        failed += status == "FAIL"
        lines.append(f"{name:<28s} {status:<4s}  {detail}")
    print("\n".join(lines))
    if args.out is not None:
        (_out_dir(args) / "validate.txt").write_text("\n".join(lines) + "\n")
    return EXIT_VALIDATE if failed else EXIT_OK


# -- entry point ------------------------------------------------------------

COMMANDS = {
    "degrade": cmd_degrade,
    "solve": cmd_solve,
    "bench": cmd_bench,
    "probe-lipschitz": cmd_probe_lipschitz,
    "validate": cmd_validate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="flowadmm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="flat dotted-key JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--input", nargs="+", default=None,
                        help="degrade: image files (.f64/.pgm/.ppm); solve: directory holding manifest.json")
    parser.add_argument("--synthetic", type=int, default=None,
                        help="degrade: number of synthetic images to generate")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command != "validate":
        args.out = "."
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"flowadmm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"flowadmm: diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FlowAdmmError as exc:
        print(f"flowadmm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
