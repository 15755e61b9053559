import itertools

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from gnplab.attacks import (AttackConfig, GradientTransform, attack, dim_transform, fgsm, gaussian_kernel,
                            gnp_gradient, ifgsm, mifgsm, project_clip, run_attack, tim_smooth)
from gnplab.errors import ConfigError, NumericError

from conftest import CountingGrad, LinearLoss, QuadraticLoss, random_psd, small_cnn, small_mlp


def _nolabels(x):
    return np.zeros(len(x), dtype=np.int64)


# -- FGSM ---------------------------------------------------------------------


def test_fgsm_eps_zero_is_identity(rng):
    m = small_cnn()
    x = rng.random((4, 1, 6, 6))
    np.testing.assert_array_equal(fgsm(m, x, np.zeros(4, dtype=int), 0.0).perturbed, x)


def test_fgsm_positive_linear_model(rng):
    lin = LinearLoss(rng.uniform(0.1, 1.0, (1, 3, 3)))
    x = rng.random((5, 1, 3, 3))
    np.testing.assert_array_equal(fgsm(lin, x, _nolabels(x), 0.1).perturbed, np.clip(x + 0.1, 0, 1))


@pytest.mark.parametrize("d", [3, 6, 10])
def test_fgsm_linear_optimal_over_corners(d, rng):
    w = rng.standard_normal((1, 1, d))
    lin = LinearLoss(w)
    x = rng.uniform(0.2, 0.8, (1, 1, 1, d))
    eps = 8 / 255
    best = max(lin.per_sample_loss(x + eps * np.array(s).reshape(x.shape))[0]
               for s in itertools.product((-1.0, 1.0), repeat=d))
    got = lin.per_sample_loss(fgsm(lin, x, _nolabels(x), eps).perturbed)[0]
    assert got == best


def test_fgsm_negative_epsilon():
    with pytest.raises(ConfigError):
        fgsm(small_mlp(), np.zeros((1, 1, 3, 3)), np.array([0]), -0.1)


def test_fgsm_invariant_to_positive_loss_scaling(rng):
    w = rng.standard_normal((1, 3, 3))
    x = rng.random((3, 1, 3, 3))
    a = fgsm(LinearLoss(w), x, _nolabels(x), 0.05).perturbed
    b = fgsm(LinearLoss(7.5 * w), x, _nolabels(x), 0.05).perturbed
    np.testing.assert_array_equal(a, b)


# -- iterative attacks and reductions --------------------------------------------


def test_ifgsm_single_step_is_fgsm(rng):
    m = small_cnn(1)
    x, y = rng.random((6, 1, 6, 6)), rng.integers(0, 3, 6)
    cfg = AttackConfig("ifgsm", epsilon=8 / 255, steps=1)
    np.testing.assert_array_equal(ifgsm(m, x, y, cfg).perturbed, fgsm(m, x, y, 8 / 255).perturbed)
    np.testing.assert_array_equal(attack(m, x, y, cfg).perturbed, fgsm(m, x, y, 8 / 255).perturbed)


def test_ifgsm_linear_reaches_fgsm_corner(rng):
    lin = LinearLoss(rng.standard_normal((1, 3, 3)))
    x = rng.uniform(0.1, 0.9, (2, 1, 3, 3))
    out = ifgsm(lin, x, _nolabels(x), AttackConfig("ifgsm", epsilon=0.05, steps=10)).perturbed
    np.testing.assert_allclose(out, fgsm(lin, x, _nolabels(x), 0.05).perturbed, atol=1e-15)


def test_mifgsm_mu_zero_step_signs_match_ifgsm(rng):
    m = small_cnn(2)
    x, y = rng.random((5, 1, 6, 6)), rng.integers(0, 3, 5)
    a = attack(m, x, y, AttackConfig("mifgsm", momentum=0.0, steps=10), trace=True)
    b = attack(m, x, y, AttackConfig("ifgsm", steps=10))
    np.testing.assert_array_equal(a.perturbed, b.perturbed)
    np.testing.assert_array_equal(mifgsm(m, x, y, AttackConfig("mifgsm", momentum=0.0, steps=10)).perturbed,
                                  b.perturbed)


def test_mifgsm_first_step_is_sign_of_gradient(rng):
    m = small_cnn(3)
    x, y = rng.random((3, 1, 6, 6)), rng.integers(0, 3, 3)
    for mu in (0.0, 1.0, 5.0):
        a = attack(m, x, y, AttackConfig("mifgsm", momentum=mu, steps=1, epsilon=0.03))
        np.testing.assert_array_equal(a.perturbed, fgsm(m, x, y, 0.03).perturbed)


def test_mifgsm_constant_gradient_matches_mu_zero(rng):
    lin = LinearLoss(rng.standard_normal((1, 3, 3)))
    x = rng.uniform(0.2, 0.8, (2, 1, 3, 3))
    a = attack(lin, x, _nolabels(x), AttackConfig("mifgsm", momentum=1.0, steps=7))
    b = attack(lin, x, _nolabels(x), AttackConfig("mifgsm", momentum=0.0, steps=7))
    np.testing.assert_array_equal(a.perturbed, b.perturbed)


def test_empty_pipeline_is_bare_ifgsm(rng):
    m = small_cnn(4)
    x, y = rng.random((5, 1, 6, 6)), rng.integers(0, 3, 5)
    cfg = AttackConfig("ifgsm", steps=8)
    got = run_attack(GradientTransform(), cfg, m, x, y).perturbed
    np.testing.assert_array_equal(got, ifgsm(m, x, y, cfg).perturbed)


def test_gnp_beta_zero_pipeline_is_ifgsm(rng):
    m = small_cnn(5)
    x, y = rng.random((5, 1, 6, 6)), rng.integers(0, 3, 5)
    cfg = AttackConfig("ifgsm", steps=8)
    got = attack(m, x, y, replace(cfg, gnp=True, gnp_beta=0.0)).perturbed
    np.testing.assert_array_equal(got, ifgsm(m, x, y, cfg).perturbed)


# -- GNP ----------------------------------------------------------------------


def test_gnp_beta_zero_bit_identical(rng):
    m = small_cnn(6)
    x, y = rng.random((4, 1, 6, 6)), rng.integers(0, 3, 4)
    plain = m.loss_and_input_gradient(x, y, reduction="sum").input_grad
    np.testing.assert_array_equal(gnp_gradient(m, x, y, 0.01, 0.0), plain)


@pytest.mark.parametrize("r", [1e-3, 1e-2])
@pytest.mark.parametrize("beta", [0.4, 0.8, 1.6])
def test_gnp_quadratic_exact(r, beta, rng):
    d = 16
    a = random_psd(rng, d)
    x = rng.standard_normal((3, 1, 4, 4))
    g = x.reshape(3, d) @ a
    # gradient of 1/2 x'Ax - lam ||Ax|| is Ax - lam A(Ax)/||Ax||
    expected = g - beta * r * (g @ a) / np.linalg.norm(g, axis=1, keepdims=True)
    got = gnp_gradient(QuadraticLoss(a), x, _nolabels(x), r, beta).reshape(3, d)
    assert np.max(np.abs(got - expected)) / np.max(np.abs(expected)) < 1e-10


def test_gnp_identity_quadratic_closed_form(rng):
    x = rng.standard_normal((2, 1, 2, 2))
    got = gnp_gradient(QuadraticLoss(np.eye(4)), x, _nolabels(x), 0.01, 0.8)
    n = np.linalg.norm(x.reshape(2, -1), axis=1).reshape(2, 1, 1, 1)
    np.testing.assert_allclose(got, x - 0.008 * x / n, rtol=1e-13)


def _penalised_gradient_by_nested_fd(model, x, y, lam, h_in=1e-5, h_out=1e-4):
    def loss(z):
        return model.per_sample_loss(z, y)[0]

    def grad_norm(z):
        flat = z.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            e = np.zeros(flat.size)
            e[i] = h_in
            g[i] = (loss((flat + e).reshape(z.shape)) - loss((flat - e).reshape(z.shape))) / (2 * h_in)
        return np.linalg.norm(g)

    def objective(z):
        return loss(z) - lam * grad_norm(z)

    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        e = np.zeros(flat.size)
        e[i] = h_out
        out[i] = (objective((flat + e).reshape(x.shape)) - objective((flat - e).reshape(x.shape))) / (2 * h_out)
    return out.reshape(x.shape)


def test_gnp_matches_nested_finite_differences_on_mlp(rng):
    m = small_mlp(8)
    x = rng.random((1, 1, 3, 3))
    y = np.array([1])
    got = gnp_gradient(m, x, y, 0.01, 0.8)
    want = _penalised_gradient_by_nested_fd(m, x, y, 0.008)
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 0.05


def test_gnp_two_gradient_evaluations(rng):
    counter = CountingGrad(small_cnn(7))
    x, y = rng.random((3, 1, 6, 6)), rng.integers(0, 3, 3)
    gnp_gradient(counter, x, y, 0.01, 0.8)
    assert counter.calls == 2
    counter.calls = 0
    run_attack(GradientTransform("gnp"), AttackConfig(steps=5), counter, x, y)
    assert counter.calls == 10
    counter.calls = 0
    run_attack(GradientTransform("plain"), AttackConfig(steps=5), counter, x, y)
    assert counter.calls == 5


def test_gnp_probe_is_not_clipped():
    seen = []

    def grad(x, y):
        seen.append(x.copy())
        return np.ones_like(x)

    x = np.ones((1, 1, 2, 2))
    gnp_gradient(grad, x, _nolabels(x), 0.5, 0.8)
    assert seen[1].max() > 1.0


def test_gnp_zero_gradient_falls_back(rng):
    x = rng.random((2, 1, 2, 2))
    g, flags = gnp_gradient(LinearLoss(np.zeros((1, 2, 2))), x, None, 0.01, 0.8, return_flags=True)
    assert flags.tolist() == [True, True]
    np.testing.assert_array_equal(g, 0.0)
    adv = run_attack(GradientTransform("gnp"), AttackConfig(steps=3), LinearLoss(np.zeros((1, 2, 2))), x, _nolabels(x))
    assert adv.fallback_count.tolist() == [3, 3]


def test_gnp_batch_equals_single(rng):
    m = small_cnn(9)
    x, y = rng.random((4, 1, 6, 6)), rng.integers(0, 3, 4)
    batch = gnp_gradient(m, x, y, 0.01, 0.8)
    for i in range(4):
        np.testing.assert_allclose(gnp_gradient(m, x[i:i + 1], y[i:i + 1], 0.01, 0.8)[0], batch[i],
                                   rtol=1e-12, atol=1e-15)


def test_gnp_invalid_parameters():
    with pytest.raises(ConfigError):
        gnp_gradient(LinearLoss(np.ones(1)), np.zeros((1, 1, 1, 1)), None, 0.0, 0.8)
    with pytest.raises(ConfigError):
        gnp_gradient(LinearLoss(np.ones(1)), np.zeros((1, 1, 1, 1)), None, 0.01, -1.0)


# -- DIM / TIM / projection -----------------------------------------------------


def test_dim_identity_cases(rng):
    x = rng.random((5, 2, 10, 10))
    np.testing.assert_array_equal(dim_transform(x, 0.0, 1), x)
    np.testing.assert_array_equal(dim_transform(x, 1.0, 1, resize_low=1.0, resize_high=1.0), x)
    np.testing.assert_array_equal(dim_transform(x, 0.7, 3), dim_transform(x, 0.7, 3))
    out = dim_transform(x, 1.0, 4)
    assert out.shape == x.shape and not np.array_equal(out, x)


def test_dim_invalid_bounds(rng):
    with pytest.raises(ConfigError):
        dim_transform(rng.random((1, 1, 8, 8)), 0.5, 0, resize_low=0.9, resize_high=0.5)
    with pytest.raises(ConfigError):
        dim_transform(rng.random((1, 1, 8, 8)), 1.5, 0)


def test_dim_backprop_is_adjoint(rng):
    # DIM runs inside the engine via its adjoint; check the engine gradient through it
    m = small_cnn(10, shape=(1, 8, 8))
    x, y = rng.random((3, 1, 8, 8)), rng.integers(0, 3, 3)
    cfg = AttackConfig(steps=2, dim_probability=1.0)
    a = attack(m, x, y, cfg)
    b = attack(m, x, y, cfg, workers=3, chunk_size=1)
    np.testing.assert_array_equal(a.perturbed, b.perturbed)
    assert a.check_constraints(cfg.epsilon).all()


def test_tim_kernel_properties(rng):
    for w in (1, 3, 7, 15):
        assert abs(gaussian_kernel(w).sum() - 1.0) < 1e-12
    g = rng.standard_normal((2, 3, 9, 9))
    np.testing.assert_array_equal(tim_smooth(g, 1), g)
    const = np.full((1, 2, 12, 12), 2.5)
    out = tim_smooth(const, 7)
    np.testing.assert_allclose(out[:, :, 3:-3, 3:-3], 2.5, rtol=1e-12)
    assert out.shape == const.shape
    with pytest.raises(ConfigError):
        tim_smooth(g, 4)


def test_project_clip_examples():
    x = np.full((1, 1, 2, 2), 0.5)
    inside = x + 0.01
    np.testing.assert_array_equal(project_clip(inside, x, 0.03), inside)
    eps = 0.03
    np.testing.assert_allclose(project_clip(x + 2 * eps, x, eps), x + eps, rtol=0, atol=0)
    hi = np.full((1, 1, 1, 1), 0.999)
    assert project_clip(hi + 8 / 255, hi, 8 / 255).max() <= 1.0


# -- engine -----------------------------------------------------------------------


ALL_CONFIGS = [
    AttackConfig("fgsm"),
    AttackConfig("ifgsm", steps=5),
    AttackConfig("mifgsm", steps=5),
    AttackConfig("ifgsm", steps=5, gnp=True),
    AttackConfig("mifgsm", steps=5, gnp=True),
    AttackConfig("ifgsm", steps=5, dim_probability=0.5, gnp=True),
    AttackConfig("ifgsm", steps=5, tim_kernel=3, gnp=True),
]


@pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=lambda c: c.attack_id)
def test_engine_worker_and_chunk_invariance(cfg, rng):
    m = small_cnn(11)
    x, y = rng.random((7, 1, 6, 6)), rng.integers(0, 3, 7)
    a = attack(m, x, y, cfg)
    b = attack(m, x, y, cfg, workers=4, chunk_size=2)
    c = np.concatenate([attack(m, x[i:i + 1], y[i:i + 1], cfg).perturbed for i in range(7)])
    np.testing.assert_array_equal(a.perturbed, b.perturbed)
    if cfg.dim_probability == 0:
        np.testing.assert_array_equal(a.perturbed, c)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.sampled_from([4 / 255, 8 / 255, 16 / 255]),
       idx=st.integers(0, len(ALL_CONFIGS) - 1))
def test_constraints_hold(seed, eps, idx):
    r = np.random.default_rng(seed)
    m = small_cnn(seed % 5)
    x = r.choice([0.0, 1.0, 0.5, 0.999, 0.001], size=(3, 1, 6, 6))
    adv = attack(m, x, r.integers(0, 3, 3), replace(ALL_CONFIGS[idx], epsilon=eps, seed=seed))
    assert adv.check_constraints(eps).all()


def test_trace_and_nan_iteration(rng):
    m = small_cnn(12)
    x, y = rng.random((2, 1, 6, 6)), rng.integers(0, 3, 2)
    adv = attack(m, x, y, AttackConfig(steps=3), trace=True)
    assert [t["iteration"] for t in adv.trace] == [0, 1, 2]

    def bad(z, labels):
        return np.full_like(z, np.nan)

    with pytest.raises(NumericError, match="iteration 0"):
        run_attack(GradientTransform(), AttackConfig(steps=2), bad, x, y)


@pytest.mark.parametrize("kw", [
    {"attack": "pgd"}, {"epsilon": -0.1}, {"steps": 0}, {"momentum": -1.0}, {"gnp": True, "gnp_r": 0.0},
    {"gnp_beta": -0.5}, {"dim_probability": 2.0}, {"tim_kernel": 4},
])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


def test_attack_ids_and_lambda():
    assert AttackConfig("mifgsm", gnp=True, dim_probability=0.5, tim_kernel=7).attack_id == "MI-FGSM+DIM+TIM+GNP"
    assert AttackConfig(gnp_r=0.01, gnp_beta=0.8).gnp_lambda == pytest.approx(0.008)
    assert AttackConfig("fgsm").alpha == AttackConfig("fgsm").epsilon
    assert AttackConfig(epsilon=0.1, steps=4).alpha == pytest.approx(0.025)
