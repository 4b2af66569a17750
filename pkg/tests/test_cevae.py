import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from vigor.cevae import (CevaeConfig, CevaeModel, TrainingDivergedError, _batches, bce, estimate_ate,
                         kl_diag_gaussian, posterior, train)
from vigor.data import SyntheticSpec, generate_synthetic, split
from vigor.neural import flatten, flatten_grads, unflatten
from vigor.validation import spearman


def small_data(n=200, d=4, seed=1):
    return generate_synthetic(SyntheticSpec(n=max(n, 100), d=d, seed=seed)).subset(np.arange(n))


def mc_kl(mu, log_var, rng, samples=100_000):
    """E_q[log q(z) - log p(z)] per row, averaged, by sampling."""
    total = 0.0
    for m, lv in zip(np.atleast_2d(mu), np.atleast_2d(log_var)):
        std = np.exp(0.5 * lv)
        z = m + std * rng.standard_normal((samples, m.size))
        log_q = -0.5 * np.sum(((z - m) / std) ** 2 + lv + math.log(2 * math.pi), axis=1)
        log_p = -0.5 * np.sum(z ** 2 + math.log(2 * math.pi), axis=1)
        total += np.mean(log_q - log_p)
    return total / np.atleast_2d(mu).shape[0]


def test_kl_trivial_cases():
    assert kl_diag_gaussian(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0
    assert kl_diag_gaussian([[1.0]], [[0.0]]) == 0.5


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(1, 3))
    log_var = rng.normal(scale=0.5, size=(1, 3))
    exact = kl_diag_gaussian(mu, log_var)
    assert abs(mc_kl(mu, log_var, rng) - exact) / exact < 0.02


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_diag_gaussian(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-3, 3))
@example(mu=[0.0], lv=2.892439853319805e-21)
def test_kl_non_negative(mu, lv):
    assert kl_diag_gaussian([mu], [[lv] * len(mu)]) >= 0.0


def test_bce_units():
    assert abs(bce([1.0], [0.5]) - math.log(2)) < 1e-12
    assert bce([1.0], [1.0]) <= 1e-6
    with pytest.raises(ValueError, match="0 and 1"):
        bce([2.0], [0.5])


def test_bce_matches_direct_sum():
    rng = np.random.default_rng(7)
    y = (rng.uniform(size=50) < 0.5).astype(float)
    p = rng.uniform(0.01, 0.99, size=50)
    total = 0.0
    for yi, pi in zip(y, p):
        total -= math.log(pi) if yi == 1 else math.log(1 - pi)
    assert abs(bce(y, p) - total / 50) < 1e-12


def test_config_invariants():
    with pytest.raises(ValueError):
        CevaeConfig(latent_dim=0)
    with pytest.raises(ValueError):
        CevaeConfig(kl_weight=-1)
    with pytest.raises(ValueError):
        CevaeConfig(batch_size=1)


def test_architecture_widths():
    base = CevaeModel(CevaeConfig(latent_dim=5, hidden_dim=128), 6)
    aug = CevaeModel(CevaeConfig(latent_dim=5, hidden_dim=128, augmented=True), 6)
    assert base.encoder_in == 8 and aug.encoder_in == 9
    assert base.mu_head.out_dim == base.logvar_head.out_dim == 5
    assert base.t_decoder.layers[0].in_dim == 11 and base.y_decoder.layers[0].in_dim == 12


def test_forced_half_decoders_give_minus_two_ln2():
    data = small_data(32)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8, kl_weight=0.0), 4)
    for dec in (model.t_decoder, model.y_decoder):
        last = dec.layers[-1]
        last.weight.value[...] = 0.0
        last.bias.value[...] = 0.0
    report = model.elbo_step(data)
    assert abs(report.elbo + 2 * math.log(2)) < 1e-12


@pytest.mark.parametrize("augmented", [False, True])
def test_end_to_end_gradient(augmented):
    data = small_data(64)
    data = data.with_u_hat(data.u_star + 0.3)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=16, augmented=augmented), 4)
    x, t, y, u = model._arrays(data)
    noise = np.random.default_rng(5).standard_normal((1, 64, 2))
    model.zero_grad()
    model.objective(x, t, y, u, noise, training=True, backward=True)
    params = model.parameters()
    analytic = flatten_grads(params)
    theta = flatten(params)
    numeric = np.zeros_like(theta)
    h = 1e-5
    for i in range(theta.size):
        for sign in (1, -1):
            shifted = theta.copy()
            shifted[i] += sign * h
            unflatten(params, shifted)
            numeric[i] -= sign * model.objective(x, t, y, u, noise, training=True).elbo / (2 * h)
    unflatten(params, theta)
    rel = np.abs(numeric - analytic) / np.maximum(np.abs(numeric) + np.abs(analytic), 1e-8)
    assert rel.max() < 1e-4


def test_report_decomposition_and_bounds():
    data = small_data(120)
    model = CevaeModel(CevaeConfig(latent_dim=3, hidden_dim=16, epochs=3, batch_size=32, kl_weight=0.7), 4)
    result = train(model, data, data)
    for entry in result.trace:
        r = entry.eval
        assert abs(r.elbo - (r.recon_t + r.recon_y - r.kl_weight * r.kl)) < 1e-12
        assert r.kl >= 0 and r.elbo <= r.recon_t + r.recon_y
        assert r.mc_samples == 10


def test_steps_equal_epochs_when_batch_covers_data():
    data = small_data(64)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8, epochs=7, batch_size=64), 4)
    assert train(model, data).steps == 7


def test_steps_count_ceil():
    data = small_data(130)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8, epochs=3, batch_size=32), 4)
    # 130 rows: 4 full batches plus a 2-row remainder
    assert train(model, data).steps == 3 * 5


def test_single_leftover_row_is_folded():
    perm = np.arange(65)
    batches = _batches(65, 32, perm)
    assert [b.size for b in batches] == [32, 33]


def test_training_is_bitwise_reproducible(tmp_path):
    data = small_data(150)
    runs = []
    for _ in range(2):
        model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=16, epochs=4, batch_size=32, seed=3), 4)
        train(model, data)
        runs.append(flatten(model.parameters()).tobytes())
    assert runs[0] == runs[1]


def test_checkpoint_roundtrip(tmp_path):
    data = small_data(150)
    data = data.with_u_hat(data.u_star)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=16, epochs=3, batch_size=32, augmented=True), 4)
    train(model, data)
    path = tmp_path / "model.npz"
    model.save(path)
    loaded = CevaeModel.load(path)
    assert abs(loaded.elbo_step(data).elbo - model.elbo_step(data).elbo) < 1e-12
    assert loaded.adam.t == model.adam.t


def test_posterior_shape_and_identical_rows():
    data = small_data(100)
    idx = np.r_[np.arange(100), 5]
    data = data.subset(idx)
    model = CevaeModel(CevaeConfig(latent_dim=3, hidden_dim=16, epochs=2, batch_size=32), 4)
    train(model, data)
    post = posterior(model, data)
    assert post.mu.shape == (101, 3) and post.log_var.shape == (101, 3)
    np.testing.assert_array_equal(post.mu[5], post.mu[100])
    assert np.all(np.isfinite(post.mu)) and np.all(post.var > 0)


def test_ate_zero_when_outcome_ignores_treatment():
    data = small_data(80)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8), 4)
    t_column = 2 + 4  # outcome decoder input is [z, x, t]
    model.y_decoder.layers[0].weight.value[:, t_column] = 0.0
    assert estimate_ate(model, data) == 0.0


def test_constant_candidate_matches_baseline_exactly():
    data = small_data(160)
    cfg = dict(latent_dim=2, hidden_dim=16, epochs=5, batch_size=32, seed=2)
    base = CevaeModel(CevaeConfig(**cfg), 4)
    aug = CevaeModel(CevaeConfig(augmented=True, **cfg), 4)
    train(base, data)
    train(aug, data.with_u_hat(np.full(data.n, 3.0)))
    assert abs(base.elbo_step(data).elbo - aug.elbo_step(data.with_u_hat(np.full(data.n, 3.0))).elbo) < 0.005


def test_nan_aborts_with_location():
    data = small_data(64)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8, epochs=2, batch_size=32), 4)
    model.mu_head.bias.value[...] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(model, data)


def test_augmented_requires_candidate():
    data = small_data(64)
    model = CevaeModel(CevaeConfig(latent_dim=2, hidden_dim=8, augmented=True), 4)
    model.fit_u_scaling(np.arange(3.0))
    with pytest.raises(ValueError, match="u_hat"):
        model.elbo_step(data)


@pytest.mark.slow
def test_training_improves_eval_elbo_and_recovers_confounder():
    gains, best_rho = [], []
    for seed in range(5):
        data = generate_synthetic(SyntheticSpec(n=2000, d=6, seed=seed))
        tr, ev = split(data, 0.2, seed)
        model = CevaeModel(CevaeConfig(seed=seed), 6)
        result = train(model, tr, tr)
        gains.append(result.trace[-1].eval.elbo - result.trace[0].eval.elbo)
        mu = posterior(model, ev).mu
        best_rho.append(max(abs(spearman(mu[:, j], ev.u_star).r) for j in range(mu.shape[1])))
    assert np.mean(gains) > 0
    assert max(best_rho) > 0.3
