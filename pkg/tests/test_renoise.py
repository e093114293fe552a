import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowadmm.errors import ParameterError, UnsupportedError
from flowadmm.flow_prior import GaussianPrior, MlpVelocity, gaussian_velocity_lipschitz
from flowadmm.renoise import (
    MeanDenoiser,
    SampleSchedule,
    TimeSchedule,
    fd_jacobian,
    jacobian_spectral_norm,
    lemma1_bound,
    mean_denoise_exact_gaussian,
    mean_denoise_mc,
    remark1_deviation,
    residual,
    residual_lipschitz_gaussian,
    sample_schedule_eval,
    time_schedule_eval,
)
from flowadmm.tensor import SeededRng

STD = GaussianPrior(0.0, 1.0)


# -- schedules --------------------------------------------------------------

def test_time_schedule_examples():
    s = TimeSchedule(0.5, 0.95, 1.0, 100)
    assert time_schedule_eval(s, 99) == 0.95
    assert time_schedule_eval(s, 49) == pytest.approx(0.725, abs=1e-15)
    with pytest.raises(ParameterError):
        time_schedule_eval(s, 100)
    with pytest.raises(ParameterError):
        s(-1)


def test_time_schedule_gamma_ordering():
    lin = TimeSchedule(0.2, 0.9, 1.0, 50).sequence()
    quad = TimeSchedule(0.2, 0.9, 2.0, 50).sequence()
    assert np.all(quad[:-1] <= lin[:-1]) and quad[-1] == lin[-1] == 0.9


@pytest.mark.parametrize("kwargs", [dict(t_min=0.6, t_max=0.5), dict(t_max=1.0), dict(gamma=0.0),
                                    dict(K=0), dict(t_min=-0.1)])
def test_time_schedule_validation(kwargs):
    base = dict(t_min=0.1, t_max=0.9, gamma=1.0, K=10)
    base.update(kwargs)
    with pytest.raises(ParameterError):
        TimeSchedule(**base)


@given(st.floats(0.0, 0.98), st.floats(0.0, 0.98), st.floats(0.1, 5.0), st.integers(1, 200))
def test_time_schedule_monotone(a, b, gamma, K):
    s = TimeSchedule(min(a, b), max(a, b), gamma, K).sequence()
    assert np.all(np.diff(s) >= 0) and s[-1] == max(a, b)
    assert np.all(s >= min(a, b))


def test_three_phase_examples():
    s = SampleSchedule.three_phase(1, 1, 41, 0.5, 0.9)
    assert (s(10, 100), s(60, 100), s(95, 100)) == (1, 1, 41)
    assert s.total(100) == 500
    assert s(49, 100) == 1 and s(50, 100) == 1 and s(89, 100) == 1 and s(90, 100) == 41


def test_three_phase_boundaries_half_open():
    s = SampleSchedule.three_phase(2, 3, 4, 0.5, 0.9)
    assert s(49, 100) == 2 and s(50, 100) == 3 and s(89, 100) == 3 and s(90, 100) == 4
    never = SampleSchedule.three_phase(2, 3, 4, 0.5, 1.0)
    assert [never(k, 10) for k in range(10)] == [2] * 5 + [3] * 5


def test_constant_schedule():
    s = SampleSchedule.constant(5)
    assert all(sample_schedule_eval(s, k, 7) == 5 for k in range(7))
    assert s.to_dict() == {"kind": "constant", "N": 5}


@pytest.mark.parametrize("args", [("constant", 0), ("three_phase", 1, 0, 1, 0.5, 0.9),
                                  ("three_phase", 1, 1, 1, 0.9, 0.5), ("three_phase", 1, 1, 1, 0.0, 0.5),
                                  ("ramp", 1)])
def test_sample_schedule_validation(args):
    with pytest.raises(ParameterError):
        if args[0] == "constant":
            SampleSchedule.constant(args[1])
        elif args[0] == "three_phase":
            SampleSchedule.three_phase(*args[1:])
        else:
            SampleSchedule(args[0], N=args[1])


@given(st.integers(1, 5), st.integers(0, 5), st.integers(0, 50), st.floats(0.05, 0.5),
       st.floats(0.05, 0.5), st.integers(1, 300))
def test_three_phase_monotone_when_counts_increase(ne, dm, dl, s1, ds, K):
    s = SampleSchedule.three_phase(ne, ne + dm, ne + dm + dl, s1, min(1.0, s1 + ds))
    counts = [s(k, K) for k in range(K)]
    assert np.all(np.diff(counts) >= 0) and s.total(K) == sum(counts)


# -- mean operator ----------------------------------------------------------

def test_exact_gaussian_examples():
    assert mean_denoise_exact_gaussian(STD, 0.5, np.array([1.0]))[0] == pytest.approx(0.5, abs=1e-15)
    p = GaussianPrior(np.array([0.3, -1.0]), np.array([0.5, 2.0]))
    x = np.array([1.0, 2.0])
    assert np.array_equal(mean_denoise_exact_gaussian(p, 1.0, x), x)
    assert np.allclose(mean_denoise_exact_gaussian(p, 0.0, x), p.mean)
    with pytest.raises(UnsupportedError):
        mean_denoise_exact_gaussian(MlpVelocity.init(2, 3, SeededRng(0)), 0.5, x)


def test_exact_gaussian_vs_large_monte_carlo():
    mc = mean_denoise_mc(STD, 0.5, np.array([1.0]), 1_000_000, SeededRng(3))
    # single-draw sd is (1 - t) M_t = 0.5
    assert abs(mc[0] - 0.5) <= 5 * 0.5 / 1000


def test_mc_point_mass_and_t1(rng):
    pm = GaussianPrior(np.array([2.0, -1.0]), 0.0)
    x = rng.standard_normal(2)
    for t in (0.0, 0.4, 0.9):
        for n in (1, 7):
            assert np.allclose(mean_denoise_mc(pm, t, x, n, rng), pm.mean, atol=1e-15)
    g = GaussianPrior(np.zeros(2), 1.0)
    assert np.array_equal(mean_denoise_mc(g, 1.0, x, 5, rng), x)


def test_mc_deterministic_and_index_ordered():
    g = GaussianPrior(np.zeros(3), np.array([0.2, 1.0, 3.0]))
    x = np.array([0.5, -1.0, 2.0])
    a = mean_denoise_mc(g, 0.6, x, 9, SeededRng(4))
    b = mean_denoise_mc(g, 0.6, x, 9, SeededRng(4))
    assert a.tobytes() == b.tobytes()
    # oracle: draw the same noise block, accumulate sequentially
    eps = SeededRng(4).standard_normal((9, 3))
    acc = np.zeros(3)
    for i in range(9):
        acc += g.denoise(0.6, 0.6 * x + 0.4 * eps[i]) / 9
    assert a.tobytes() == acc.tobytes()
    with pytest.raises(ParameterError):
        mean_denoise_mc(g, 0.6, x, 0, SeededRng(4))


def test_mc_within_standard_error():
    g = GaussianPrior(np.zeros(16), 1.0)
    x = SeededRng(5).standard_normal(16)
    for t in (0.2, 0.5, 0.9):
        se = (1 - t) * g.shrink(t) / np.sqrt(4096)
        err = mean_denoise_mc(g, t, x, 4096, SeededRng(6)) - mean_denoise_exact_gaussian(g, t, x)
        assert np.max(np.abs(err)) <= 5 * se


def test_unbiasedness_by_averaging():
    g = GaussianPrior(np.zeros(4), 1.0)
    x = np.array([1.0, -1.0, 0.5, 2.0])
    r = SeededRng(7)
    est = np.mean([mean_denoise_mc(g, 0.4, x, 1, r) for _ in range(4096)], axis=0)
    se = 0.6 * g.shrink(0.4) / np.sqrt(4096)
    assert np.max(np.abs(est - mean_denoise_exact_gaussian(g, 0.4, x))) <= 5 * se


def test_variance_scaling():
    g = GaussianPrior(np.zeros(8), 1.0)
    x = np.ones(8)
    r = SeededRng(8)
    sd = {n: np.std([mean_denoise_mc(g, 0.5, x, n, r) for _ in range(200)]) for n in (16, 64)}
    assert 0.4 <= sd[64] / sd[16] <= 0.6


def test_mean_denoiser_modes():
    g = GaussianPrior(np.zeros(2), 1.0)
    assert MeanDenoiser(g, "exact_gaussian").exact
    assert not MeanDenoiser(g).exact
    with pytest.raises(UnsupportedError):
        MeanDenoiser(MlpVelocity.init(2, 3, SeededRng(0)), "exact_gaussian")
    with pytest.raises(ParameterError):
        MeanDenoiser(g, "quasi")


def test_residual_examples():
    p = GaussianPrior(np.array([0.3, -0.2]), np.array([0.5, 1.5]))
    assert np.array_equal(residual(p, 1.0, np.array([4.0, 5.0])), np.zeros(2))
    assert np.allclose(residual(p, 0.6, p.mean), 0.0, atol=1e-15)
    assert residual(STD, 0.5, np.array([1.0]))[0] == pytest.approx(-0.5, abs=1e-15)


# -- Lipschitz constants ------------------------------------------------------

def test_lemma1_examples():
    assert lemma1_bound(1.0, 7.0) == 0.0
    assert lemma1_bound(0.0, 7.0) == 1.0
    assert lemma1_bound(0.5, 1.0) == 0.75
    with pytest.raises(ParameterError):
        lemma1_bound(1.2, 1.0)
    with pytest.raises(ParameterError):
        lemma1_bound(0.5, -1.0)


def test_residual_lipschitz_bound_on_grid():
    p = GaussianPrior(np.zeros(5), np.array([0.01, 0.2, 1.0, 4.0, 50.0]))
    for t in np.arange(1, 10) * 0.1:
        exact = residual_lipschitz_gaussian(p, t)
        J = np.stack([residual(p, t, e) - residual(p, t, np.zeros(5)) for e in np.eye(5)], axis=1)
        assert exact == pytest.approx(np.linalg.norm(J, 2), abs=1e-12)
        assert exact <= lemma1_bound(t, gaussian_velocity_lipschitz(p, t)) + 1e-10


def test_power_iteration_diagonal():
    est = jacobian_spectral_norm(lambda x: np.array([3.0, 1.0]) * x, np.zeros(2))
    assert est.converged and est.value == pytest.approx(3.0, abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_power_iteration_vs_svd(seed):
    M = SeededRng(100 + seed).standard_normal((5, 5))
    est = jacobian_spectral_norm(lambda x: M @ x, np.zeros(5))
    assert est.value == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], abs=1e-6)
    # matrix-free path with exact products
    est2 = jacobian_spectral_norm(None, np.zeros(5), jvp=lambda w: M @ w, vjp=lambda w: M.T @ w)
    assert est2.value == pytest.approx(est.value, abs=1e-8)


def test_power_iteration_gaussian_velocity():
    p = GaussianPrior(np.zeros((3, 3)), np.linspace(0.1, 5.0, 9).reshape(3, 3))
    x = SeededRng(9).standard_normal((3, 3))
    for t in (0.2, 0.5, 0.8):
        ref = gaussian_velocity_lipschitz(p, t)
        fd = jacobian_spectral_norm(lambda z: p.velocity(t, z), x)
        an = jacobian_spectral_norm(lambda z: p.velocity(t, z), x,
                                    jvp=lambda w: p.velocity_jvp(t, x, w),
                                    vjp=lambda w: p.velocity_vjp(t, x, w))
        assert fd.value == pytest.approx(ref, abs=1e-6)
        assert an.value == pytest.approx(ref, abs=1e-10)


def test_power_iteration_zero_map_and_unconverged():
    est = jacobian_spectral_norm(lambda x: 0 * x, np.ones(3))
    assert est.value == 0.0 and est.converged
    M = np.diag([1.0, 0.999999])
    slow = jacobian_spectral_norm(lambda x: M @ x, np.zeros(2), iters=2, tol=1e-15)
    assert not slow.converged and slow.iterations == 2
    with pytest.raises(ParameterError):
        jacobian_spectral_norm(lambda x: x, np.zeros(2), iters=0)


def test_fd_jacobian_batched_matches_loop(gmm2d):
    x = np.array([0.3, -0.7])
    f = lambda z: gmm2d.velocity(0.6, z)  # noqa: E731
    loop = fd_jacobian(f, x, 1e-6)
    batch = fd_jacobian(f, x, 1e-6, batched=True)
    assert np.allclose(loop, batch, atol=1e-12)
    # batched path for an MLP velocity on a 2x2 event shape
    m = MlpVelocity.init(4, 6, SeededRng(2), shape=(2, 2))
    z = SeededRng(3).standard_normal((2, 2))
    J = fd_jacobian(lambda p: m.velocity(0.3, p), z, 1e-6, batched=True)
    exact = np.stack([m.velocity_jvp(0.3, z, e.reshape(2, 2)).ravel() for e in np.eye(4)], axis=1)
    assert np.allclose(J, exact, atol=1e-8)


# -- mean-operator deviation on data points ---------------------------------

def test_remark1_point_mass_is_exact():
    pm = GaussianPrior(np.array([1.0, 2.0]), 0.0)
    stats = remark1_deviation(pm, 0.6, 20, 4, SeededRng(1))
    assert stats.max == 0.0


def test_remark1_t1_is_exact():
    stats = remark1_deviation(GaussianPrior(np.zeros(3), 1.0), 1.0, 10, 3, SeededRng(1))
    # averaging N copies of x can round in the last bit
    assert stats.max <= 1e-15


def test_remark1_gaussian_closed_form():
    p = GaussianPrior(np.zeros(1), 1.0)
    t = 0.9
    stats = remark1_deviation(p, t, 16, 1, SeededRng(2), mode="exact_gaussian")
    xs = p.sample(SeededRng(2).fork(0), 16)
    expected = abs(t * p.shrink(t) - 1.0) * np.abs(xs[:, 0] - p.mean[0])
    assert np.allclose(stats.deviations, expected, atol=1e-14)
    assert stats.mean > 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 2**31))
def test_mc_residual_lipschitz_with_common_noise(t, seed):
    """With shared noise draws the MC residual obeys the residual Lipschitz bound exactly."""
    p = GaussianPrior(np.zeros(4), np.array([0.1, 0.5, 2.0, 8.0]))
    r = SeededRng(seed)
    a, b = r.standard_normal(4), r.standard_normal(4)
    ra = residual(p, t, a, "monte_carlo", 8, SeededRng(seed, 1))
    rb = residual(p, t, b, "monte_carlo", 8, SeededRng(seed, 1))
    bound = lemma1_bound(t, gaussian_velocity_lipschitz(p, t))
    assert np.linalg.norm(ra - rb) <= bound * np.linalg.norm(a - b) * (1 + 1e-9) + 1e-12
