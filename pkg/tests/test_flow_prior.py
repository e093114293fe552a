import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowadmm.errors import ParameterError, ShapeError, TrainingDivergedError, UnsupportedError
from flowadmm.flow_prior import (
    GaussianPrior,
    GmmPrior,
    MlpVelocity,
    denoiser_apply,
    flow_matching_loss_and_grad,
    gaussian_velocity_lipschitz,
    sample_prior,
    train_flow_matching,
    velocity_apply,
)
from flowadmm.tensor import SeededRng


def _posterior_mean_quadrature(weights, means, variances, t, xt):
    """E[x1 | x_t] for a scalar mixture by the trapezoid rule on [-10, 10]."""
    grid = np.linspace(-10.0, 10.0, 100001)
    prior = sum(w * np.exp(-(grid - m) ** 2 / (2 * v)) / np.sqrt(2 * np.pi * v)
                for w, m, v in zip(weights, means, variances))
    like = np.exp(-(xt - t * grid) ** 2 / (2 * (1 - t) ** 2))
    post = prior * like
    return np.trapezoid(grid * post, grid) / np.trapezoid(post, grid)


# -- Gaussian ---------------------------------------------------------------

def test_gaussian_denoiser_example():
    p = GaussianPrior(0.0, 1.0)
    assert denoiser_apply(p, 0.5, np.array([2.0]))[0] == pytest.approx(2.0, abs=1e-15)
    assert _posterior_mean_quadrature([1.0], [0.0], [1.0], 0.5, 2.0) == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("t", [0.1, 0.4, 0.75, 0.95])
def test_gaussian_denoiser_vs_quadrature(t):
    p = GaussianPrior(0.3, 0.6)
    for xt in (-1.0, 0.2, 1.7):
        ref = _posterior_mean_quadrature([1.0], [0.3], [0.6], t, xt)
        assert denoiser_apply(p, t, np.array([xt]))[0] == pytest.approx(ref, abs=1e-6)


def test_gaussian_limits(gauss_prior, rng):
    x = rng.standard_normal((4, 4))
    assert np.array_equal(gauss_prior.denoise(1.0, x), x)
    assert np.allclose(gauss_prior.denoise(0.0, x), gauss_prior.mean, atol=1e-15)
    assert velocity_apply(GaussianPrior(0.0, 1.0), 0.0, np.array([3.0]))[0] == -3.0
    with pytest.raises(ParameterError):
        gauss_prior.velocity(1.0, x)
    with pytest.raises(ParameterError):
        gauss_prior.denoise(1.5, x)


def test_gaussian_point_mass(rng):
    p = GaussianPrior(5.0, 0.0)
    assert np.all(sample_prior(p, rng, 10) == 5.0)
    assert p.denoise(0.7, np.array([-3.0]))[0] == 5.0


def test_gaussian_sample_mean(rng):
    p = GaussianPrior(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
    s = p.sample(rng, 100000)
    assert np.all(np.abs(s.mean(axis=0) - p.mean) <= 3 * np.sqrt(p.var / 100000))


def test_gaussian_rejects_negative_variance():
    with pytest.raises(ParameterError):
        GaussianPrior(0.0, -1.0)


def test_gaussian_velocity_lipschitz_closed_form():
    p = GaussianPrior(0.0, 1.0)
    for t in (0.2, 0.5, 0.8):
        m = t / (t * t + (1 - t) ** 2)
        assert gaussian_velocity_lipschitz(p, t) == pytest.approx(abs(m - 1) / (1 - t), rel=1e-14)


@settings(max_examples=50)
@given(st.floats(0.0, 0.999), st.floats(-1.0, 2.0), st.integers(0, 2**31))
def test_gaussian_denoiser_affine(t, alpha, seed):
    p = GaussianPrior(np.array([0.1, -0.4, 2.0]), np.array([0.3, 1.0, 4.0]))
    r = SeededRng(seed)
    x, y = r.standard_normal(3), r.standard_normal(3)
    lhs = p.denoise(t, alpha * x + (1 - alpha) * y)
    rhs = alpha * p.denoise(t, x) + (1 - alpha) * p.denoise(t, y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(lhs)))


# -- GMM --------------------------------------------------------------------

def test_gmm_validation():
    with pytest.raises(ParameterError):
        GmmPrior([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ParameterError):
        GmmPrior([0.5, 0.5], [[0.0], [1.0]], [1.0, 0.0])
    with pytest.raises(ShapeError):
        GmmPrior([1.0], [[0.0], [1.0]], [1.0, 1.0])


@pytest.mark.parametrize("t", [0.05, 0.3, 0.6, 0.9])
def test_gmm_denoiser_vs_quadrature(t):
    w, m, v = [0.3, 0.5, 0.2], [-2.0, 0.5, 3.0], [0.4, 0.1, 1.2]
    p = GmmPrior(w, np.array(m)[:, None], np.array(v)[:, None])
    # queries chosen so the posterior sits well inside the quadrature window
    for xt in (-2.0, -0.5, 0.4, 1.5, 2.5):
        ref = _posterior_mean_quadrature(w, m, v, t, xt)
        assert p.denoise(t, np.array([xt]))[0] == pytest.approx(ref, abs=1e-6)


def test_gmm_single_component_equals_gaussian(rng):
    mean, var = rng.standard_normal((3, 3)), 0.1 + rng.uniform((3, 3))
    g = GaussianPrior(mean, var)
    m = GmmPrior([1.0], mean[None], var[None])
    x = rng.standard_normal((5, 3, 3))
    for t in (0.0, 0.3, 0.8):
        assert np.allclose(m.denoise(t, x), g.denoise(t, x), atol=1e-12)
        assert np.allclose(m.velocity(t, x), g.velocity(t, x), atol=1e-12)


def test_gmm_responsibilities_sum_to_one(gmm2d, rng):
    x = 3 * rng.standard_normal((200, 2))
    for t in (0.0, 0.2, 0.7, 0.99, 1.0):
        r = gmm2d.responsibilities(t, x)
        assert r.shape == (200, 2)
        assert np.max(np.abs(r.sum(axis=-1) - 1.0)) <= 1e-12


def test_gmm_identity_at_one(gmm2d, rng):
    x = rng.standard_normal((7, 2))
    assert np.array_equal(gmm2d.denoise(1.0, x), x)


def test_gmm_sample_frequencies(gmm2d):
    r = SeededRng(21)
    u = r.fork(0).uniform((100000,))
    comp = np.searchsorted(np.cumsum(gmm2d.weights), u, side="right")
    assert abs(np.mean(comp == 0) - 0.4) <= 0.02
    s = gmm2d.sample(SeededRng(22), 100000)
    # nearest-mean assignment is a conservative proxy for the component label
    d = np.linalg.norm(s[:, None, :] - gmm2d.means[None], axis=-1)
    assert abs(np.mean(np.argmin(d, axis=1) == 0) - 0.4) <= 0.02


def test_gmm_fit_recovers_components():
    r = SeededRng(30)
    a = np.array([-3.0, 1.0]) + 0.3 * r.standard_normal((600, 2))
    b = np.array([2.0, -1.0]) + 0.5 * r.standard_normal((400, 2))
    fit = GmmPrior.fit(np.concatenate([a, b]), 2, seed=0)
    order = np.argsort(fit.means[:, 0])
    assert np.allclose(fit.weights[order], [0.6, 0.4], atol=0.02)
    assert np.allclose(fit.means[order], [[-3.0, 1.0], [2.0, -1.0]], atol=0.1)
    again = GmmPrior.fit(np.concatenate([a, b]), 2, seed=0)
    assert np.array_equal(fit.means, again.means)


def test_sample_mlp_unsupported(rng):
    with pytest.raises(UnsupportedError):
        sample_prior(MlpVelocity.init(2, 4, rng), rng)


# -- identities across prior kinds -------------------------------------------

@pytest.mark.parametrize("kind", ["gauss", "gmm", "mlp"])
def test_denoiser_velocity_identity(kind, gmm2d):
    r = SeededRng(40)
    prior = {"gauss": GaussianPrior(np.array([0.2, -0.1]), np.array([0.5, 2.0])),
             "gmm": gmm2d, "mlp": MlpVelocity.init(2, 8, r)}[kind]
    x = r.standard_normal((6, 2))
    for t in (0.0, 0.25, 0.5, 0.9):
        lhs = x + (1 - t) * velocity_apply(prior, t, x)
        assert np.max(np.abs(lhs - denoiser_apply(prior, t, x))) <= 1e-12


# -- MLP --------------------------------------------------------------------

def test_mlp_shapes_and_validation(rng):
    m = MlpVelocity.init(4, 6, rng, shape=(2, 2))
    assert m.velocity(0.3, np.zeros((2, 2))).shape == (2, 2)
    assert m.velocity(0.3, np.zeros((5, 2, 2))).shape == (5, 2, 2)
    assert np.array_equal(m.denoise(1.0, np.ones((2, 2))), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        MlpVelocity.init(4, 6, rng, shape=(3, 2))
    with pytest.raises(ParameterError):
        m.replace(b1=np.full(6, np.nan))
    with pytest.raises(ParameterError):
        MlpVelocity(m.W1, m.b1, m.W2, m.b2, activation="relu")


def test_mlp_jvp_vjp_match_finite_differences(rng):
    m = MlpVelocity.init(3, 10, rng)
    x, w = rng.standard_normal(3), rng.standard_normal(3)
    h = 1e-6
    fd = (m.velocity(0.4, x + h * w) - m.velocity(0.4, x - h * w)) / (2 * h)
    assert np.allclose(m.velocity_jvp(0.4, x, w), fd, atol=1e-8)
    J = np.stack([m.velocity_jvp(0.4, x, e) for e in np.eye(3)], axis=1)
    assert np.allclose(m.velocity_vjp(0.4, x, w), J.T @ w, atol=1e-12)


def test_mlp_save_load(tmp_path, rng):
    m = MlpVelocity.init(4, 5, rng, shape=(2, 2))
    m.save(tmp_path / "net.f64")
    meta = json.loads((tmp_path / "net.f64.json").read_text())
    assert meta == {"d": 4, "h": 5, "activation": "tanh", "shape": [2, 2]}
    back = MlpVelocity.load(tmp_path / "net.f64")
    for name in MlpVelocity.PARAM_NAMES:
        assert np.array_equal(getattr(back, name), getattr(m, name))
    assert back.shape == (2, 2)


def test_loss_zero_network():
    m = MlpVelocity.init(2, 4, None, zero=True)
    x = np.ones((3, 2))
    loss, grads = flow_matching_loss_and_grad(m, x, x, np.array([0.1, 0.5, 0.9]))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_loss_gradients_vs_finite_differences(rng):
    m = MlpVelocity.init(3, 7, rng)
    m = m.replace(b1=rng.standard_normal(7) * 0.3, b2=rng.standard_normal(3) * 0.3)
    x0, x1, t = rng.standard_normal((9, 3)), rng.standard_normal((9, 3)), rng.uniform((9,))
    _, grads = flow_matching_loss_and_grad(m, x0, x1, t)
    h = 1e-5
    for name, value in m.params().items():
        flat = value.ravel()
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fu = flow_matching_loss_and_grad(m.replace(**{name: up.reshape(value.shape)}), x0, x1, t)[0]
            fd_ = flow_matching_loss_and_grad(m.replace(**{name: dn.reshape(value.shape)}), x0, x1, t)[0]
            fd = (fu - fd_) / (2 * h)
            an = grads[name].ravel()[i]
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6)


def test_loss_duplicate_batch_invariance(rng):
    m = MlpVelocity.init(2, 5, rng)
    x0, x1, t = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.uniform((4,))
    l1, g1 = flow_matching_loss_and_grad(m, x0, x1, t)
    l2, g2 = flow_matching_loss_and_grad(m, np.repeat(x0, 2, 0), np.repeat(x1, 2, 0), np.repeat(t, 2))
    assert l2 == pytest.approx(l1, rel=1e-13)
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_loss_input_errors(rng):
    m = MlpVelocity.init(2, 3, rng)
    with pytest.raises(ParameterError):
        flow_matching_loss_and_grad(m, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ShapeError):
        flow_matching_loss_and_grad(m, np.zeros((2, 2)), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ParameterError):
        flow_matching_loss_and_grad(m, np.zeros((1, 2)), np.zeros((1, 2)), np.array([1.5]))


def test_training_zero_lr_constant_curve(gmm2d):
    m = MlpVelocity.init(2, 8, SeededRng(1))
    res = train_flow_matching(m, gmm2d, 20, 64, 0.0, SeededRng(2), eval_size=256)
    assert res.eval_initial == res.eval_final
    assert np.array_equal(res.model.W1, m.W1)


def test_training_reproducible_and_improves(gmm2d):
    runs = [train_flow_matching(MlpVelocity.init(2, 8, SeededRng(1)), gmm2d, 300, 64, 0.05,
                                SeededRng(2), eval_size=512) for _ in range(2)]
    assert runs[0].losses == runs[1].losses
    assert runs[0].eval_final < runs[0].eval_initial


@pytest.mark.filterwarnings("ignore:overflow")
def test_training_divergence(gmm2d):
    with pytest.raises(TrainingDivergedError):
        train_flow_matching(MlpVelocity.init(2, 8, SeededRng(1)), gmm2d, 200, 64, 1e6, SeededRng(2),
                            eval_size=64)
