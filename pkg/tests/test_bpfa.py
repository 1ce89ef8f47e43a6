"""Sampler conditionals against independent oracles, plus model bookkeeping."""

import numpy as np
import pytest
from scipy import integrate, stats

from bpfa_mri import bpfa
from bpfa_mri.bpfa import (
    BPFAState,
    HyperParams,
    SparseCodes,
    gibbs_sweep,
    init_state,
    log_joint,
    reconstruct_patches,
    sample_codes,
    sample_dictionary,
    sample_noise_precision,
    sample_pi,
    sample_prior_atom_counts,
    sample_weight_precisions,
)
from bpfa_mri.core import ConfigError, PatchConfig


def make_state(K, pi, ge, gs, seed=0, **hp):
    hp = HyperParams(K=max(K, 6), gamma0=hp.pop("gamma0", 1.0), g0=1.0, h0=1.0, **hp)
    if K < 6:
        hp = HyperParams(K=K, gamma0=min(hp.gamma0, K / 2), g0=1.0, h0=1.0)
    return BPFAState(hp=hp, pi=np.full(K, pi), gamma_eps=ge, gamma_s=np.full(K, gs), seed=seed)


def z_posterior_quadrature(x, d, pi, ge, gs):
    """P(z=1 | x) by integrating the weight s out numerically (real case)."""
    def lik(s):
        r = x - d * s
        return np.exp(-0.5 * ge * r @ r) * np.exp(-0.5 * gs * s * s) * np.sqrt(gs / (2 * np.pi))
    p1, _ = integrate.quad(lik, -50, 50, epsabs=1e-13, limit=200)
    p0 = np.exp(-0.5 * ge * x @ x)
    return pi * p1 / (pi * p1 + (1 - pi) * p0)


def z_posterior_quadrature_complex(x, d, pi, ge, gs):
    """Circular complex version: integrate over Re(s), Im(s)."""
    def lik(b, a):
        s = a + 1j * b
        r = x - d * s
        return np.exp(-ge * np.vdot(r, r).real) * np.exp(-gs * abs(s) ** 2) * gs / np.pi
    p1, _ = integrate.dblquad(lik, -12, 12, -12, 12, epsabs=1e-12)
    p0 = np.exp(-ge * np.vdot(x, x).real)
    return pi * p1 / (pi * p1 + (1 - pi) * p0)


def toy_codes(x, d, pi, ge, gs, n, seed=0, cplx=False):
    X = np.repeat(np.asarray(x)[:, None], n, axis=1)
    D = np.asarray(d)[:, None]
    dtype = complex if cplx else float
    codes = SparseCodes(np.zeros((1, n), bool), np.zeros((1, n), dtype))
    state = make_state(1, pi, ge, gs, seed)
    return sample_codes(X.astype(dtype), D.astype(dtype), codes, state)


def test_z_posterior_matches_quadrature():
    x, d = np.array([2.0, 0.0]), np.array([1.0, 0.0])
    oracle = z_posterior_quadrature(x, d, 0.5, 1.0, 1.0)
    codes = toy_codes(x, d, 0.5, 1.0, 1.0, 100_000)
    assert abs(codes.Z.mean() - oracle) < 0.01


@pytest.mark.parametrize("x,d,pi,ge,gs", [
    ([0.3, -0.2], [0.6, 0.8], 0.3, 4.0, 0.5),
    ([1.0, 1.0], [1.0, 1.0], 0.05, 2.0, 3.0),
])
def test_z_posterior_other_settings(x, d, pi, ge, gs):
    x, d = np.array(x), np.array(d)
    oracle = z_posterior_quadrature(x, d, pi, ge, gs)
    codes = toy_codes(x, d, pi, ge, gs, 100_000, seed=3)
    assert abs(codes.Z.mean() - oracle) < 0.01


def test_s_conditional_moments():
    # given z = 1: s ~ N(dtr / (gs/ge + dtd), 1 / (gs + ge dtd))
    x, d, ge, gs = np.array([2.0, 0.0]), np.array([1.0, 0.0]), 1.0, 1.0
    codes = toy_codes(x, d, 0.5, ge, gs, 100_000)
    s_on = codes.S[0][codes.Z[0]]
    s_off = codes.S[0][~codes.Z[0]]
    assert abs(s_on.mean() - 1.0) < 0.02
    assert abs(s_on.var() - 0.5) < 0.02
    # given z = 0 the weight is a prior draw
    assert abs(s_off.mean()) < 0.03 and abs(s_off.var() - 1.0) < 0.04


def test_complex_z_posterior_matches_quadrature():
    x = np.array([1.0 + 0.5j, -0.2j])
    d = np.array([0.8, 0.6j])
    oracle = z_posterior_quadrature_complex(x, d, 0.4, 1.5, 1.0)
    codes = toy_codes(x, d, 0.4, 1.5, 1.0, 100_000, seed=1, cplx=True)
    assert abs(codes.Z.mean() - oracle) < 0.01


def test_pi_extremes():
    x, d = np.array([2.0, 0.0]), np.array([1.0, 0.0])
    assert not toy_codes(x, d, 0.0, 1.0, 1.0, 1000).Z.any()
    assert toy_codes(x, d, 1.0, 1.0, 1.0, 1000).Z.all()


def test_noise_precision_moments():
    n_draws = 100_000
    P, N = 2, 5
    rng = np.random.default_rng(0)
    X = rng.standard_normal((P, N))
    D = np.zeros((P, 1))
    codes = SparseCodes(np.zeros((1, N), bool), np.zeros((1, N)))
    state = make_state(1, 0.1, 1.0, 1.0)
    state.hp = HyperParams(K=1, gamma0=0.5, g0=2.0, h0=3.0)
    shape = 2.0 + 0.5 * P * N
    rate = 3.0 + 0.5 * np.sum(X ** 2)
    draws = np.empty(n_draws)
    for t in range(n_draws):
        state.sweep = t
        draws[t] = sample_noise_precision(X, D, codes, state)
    assert abs(draws.mean() / (shape / rate) - 1) < 0.02
    assert abs(draws.var() / (shape / rate**2) - 1) < 0.02


def test_noise_precision_moments_complex():
    # complex residuals keep the real-mode counts: Gamma(g0 + P N / 2, h0 + sum |r|^2 / 2)
    P, N = 2, 5
    rng = np.random.default_rng(4)
    X = rng.standard_normal((P, N)) + 1j * rng.standard_normal((P, N))
    codes = SparseCodes(np.zeros((1, N), bool), np.zeros((1, N), complex))
    state = make_state(1, 0.1, 1.0, 1.0)
    state.hp = HyperParams(K=1, gamma0=0.5, g0=2.0, h0=3.0)
    shape, rate = 2.0 + P * N / 2, 3.0 + np.sum(np.abs(X) ** 2) / 2
    draws = np.empty(50_000)
    for t in range(draws.size):
        state.sweep = t
        draws[t] = sample_noise_precision(X, np.zeros((P, 1), complex), codes, state)
    assert abs(draws.mean() / (shape / rate) - 1) < 0.02
    assert abs(draws.var() / (shape / rate**2) - 1) < 0.03


def test_weight_precision_moments():
    K, N = 100_000, 4
    Z = np.zeros((K, N), bool)
    Z[:, :3] = True
    S = np.tile([0.5, -1.0, 2.0, 9.0], (K, 1))
    state = make_state(K, 0.1, 1.0, 1.0)
    draws = sample_weight_precisions(SparseCodes(Z, S), state)
    shape = 1.0 + 1.5
    rate = 1.0 + 0.5 * (0.25 + 1.0 + 4.0)  # the inactive weight 9.0 is ignored
    assert abs(draws.mean() / (shape / rate) - 1) < 0.02
    assert abs(draws.var() / (shape / rate**2) - 1) < 0.02


def test_pi_moments():
    K, N = 100_000, 10
    Z = np.zeros((K, N), bool)
    Z[:, :3] = True
    state = make_state(K, 0.1, 1.0, 1.0)
    a = state.hp.a0 + 3
    b = state.hp.b0 + N - 3
    draws = sample_pi(SparseCodes(Z, np.zeros((K, N))), state)
    mean, var = stats.beta.stats(a, b, moments="mv")
    assert abs(draws.mean() / mean - 1) < 0.02
    assert abs(draws.var() / var - 1) < 0.02


def test_noise_precision_concentrates():
    sigma = 0.3
    rng = np.random.default_rng(1)
    X = sigma * rng.standard_normal((4, 10_000))
    D = np.zeros((4, 1))
    codes = SparseCodes(np.zeros((1, 10_000), bool), np.zeros((1, 10_000)))
    state = make_state(1, 0.1, 1.0, 1.0)
    state.hp = HyperParams(K=1, gamma0=0.5, g0=1e-6, h0=1e-6)
    draws = []
    for t in range(1000):
        state.sweep = t
        draws.append(sample_noise_precision(X, D, codes, state))
    assert np.all(np.abs(np.array(draws) * sigma**2 - 1) < 0.05)


def test_noise_precision_zero_residual_bookkeeping():
    P, N = 3, 7
    state = make_state(1, 0.1, 1.0, 1.0)
    state.hp = HyperParams(K=1, gamma0=0.5, g0=2.0, h0=4.0)
    X = np.zeros((P, N))
    draws = []
    for t in range(20_000):
        state.sweep = t
        draws.append(sample_noise_precision(X, np.zeros((P, 1)), SparseCodes(np.zeros((1, N), bool), np.zeros((1, N))), state))
    assert abs(np.mean(draws) / ((2.0 + P * N / 2) / 4.0) - 1) < 0.02


def test_prior_atoms_per_patch():
    counts = sample_prior_atom_counts(HyperParams(), 100_000, seed=0)
    assert abs(counts.mean() - 5.0) < 0.5
    # marginally Binomial(K, gamma/K)
    assert abs(counts.var() - 108 * (5 / 108) * (103 / 108)) < 0.3


def test_hyperparams_validation_and_resolve():
    hp = HyperParams()
    assert hp.a0 == pytest.approx(5 / 108) and hp.b0 == pytest.approx(103 / 108)
    r = hp.resolve(1000, 0.04)
    assert r.g0 == pytest.approx(0.5 * 1000 * 0.1)
    assert r.h0 == pytest.approx(r.g0 * 0.04 / 8)
    assert HyperParams(g0=2.0, h0=3.0).resolve(10, 1.0).g0 == 2.0
    with pytest.raises(ConfigError):
        HyperParams(gamma0=200)
    with pytest.raises(ConfigError):
        HyperParams(e0=0)
    with pytest.raises(ConfigError):
        BPFAState(hp=HyperParams(), pi=np.zeros(3), gamma_eps=1.0, gamma_s=np.ones(3), seed=0)


def test_init_state():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((36, 400))
    D, codes, state = init_state(X, HyperParams(), seed=5)
    U = np.linalg.svd(X, full_matrices=False)[0]
    np.testing.assert_allclose(D[:, :36], U[:, :36])
    assert D.shape == (36, 108)
    assert not codes.Z.any()
    assert np.all(state.pi == 0.1)
    assert state.gamma_eps == pytest.approx(state.hp.g0 / state.hp.h0)
    assert np.all(state.gamma_s == 1.0)
    # remaining atoms are prior draws with E|d|^2 = 1
    assert abs(np.mean(np.sum(D[:, 36:] ** 2, axis=0)) - 1) < 0.2


def test_dictionary_conditional_moments():
    """Compare the draw's mean and covariance with a dense posterior computation."""
    rng = np.random.default_rng(3)
    P, K, N = 3, 2, 6
    alpha = rng.standard_normal((K, N))
    X = rng.standard_normal((P, N))
    state = make_state(K, 0.5, 2.0, 1.0)
    codes = SparseCodes(np.ones((K, N), bool), alpha)
    # each row of D: precision ge*alpha alpha^T + P I, mean ge * X alpha^T M^-1
    M = state.gamma_eps * alpha @ alpha.T + P * np.eye(K)
    mean = state.gamma_eps * X @ alpha.T @ np.linalg.inv(M)
    draws = []
    for t in range(20_000):
        state.sweep = t
        draws.append(sample_dictionary(X, codes, state))
    draws = np.array(draws)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.01)
    cov = np.cov(draws[:, 0, :].T)
    np.testing.assert_allclose(cov, np.linalg.inv(M), atol=0.01)


def test_dictionary_sparse_and_dense_paths_agree():
    rng = np.random.default_rng(4)
    P, K, N = 4, 6, 300
    Z = rng.random((K, N)) < 0.05
    S = rng.standard_normal((K, N))
    X = rng.standard_normal((P, N))
    state = make_state(K, 0.5, 2.0, 1.0)
    D1 = sample_dictionary(X, SparseCodes(Z, S), state)
    old = bpfa._SPARSE_DENSITY
    try:
        bpfa._SPARSE_DENSITY = 0.0
        D2 = sample_dictionary(X, SparseCodes(Z, S), state)
    finally:
        bpfa._SPARSE_DENSITY = old
    np.testing.assert_allclose(D1, D2, atol=1e-10)


def test_rank_one_convergence():
    rng = np.random.default_rng(5)
    d = rng.standard_normal(16)
    d /= np.linalg.norm(d)
    X = np.outer(d, rng.uniform(1.0, 3.0, 400) * rng.choice([-1, 1], 400))
    D, codes, state = init_state(X, HyperParams(K=8, gamma0=2.0, g0=1e-6, h0=1e-6), seed=0)
    for _ in range(50):
        D, codes, state, _ = gibbs_sweep(X, D, codes, state, PatchConfig(4))
    err = np.linalg.norm(X - reconstruct_patches(D, codes)) / np.linalg.norm(X)
    assert err < 0.05


def test_patch_subset_reproduces_draws():
    """Patch i consumes its own counter block, so a prefix of patches gives
    the same codes whether or not the remaining patches are present."""
    rng = np.random.default_rng(6)
    X = rng.standard_normal((9, 300))
    D, codes, state = init_state(X, HyperParams(K=12, gamma0=3.0), seed=1)
    full = sample_codes(X, D, codes, state)
    part = sample_codes(X[:, :120], D, SparseCodes(codes.Z[:, :120], codes.S[:, :120]), state)
    np.testing.assert_array_equal(full.Z[:, :120], part.Z)
    np.testing.assert_array_equal(full.S[:, :120], part.S)


def test_sweep_is_deterministic():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((9, 100))
    out = []
    for _ in range(2):
        D, codes, state = init_state(X, HyperParams(K=12, gamma0=3.0), seed=9)
        for _ in range(3):
            D, codes, state, xb = gibbs_sweep(X, D, codes, state, PatchConfig(3))
        out.append((D, codes.Z, codes.S, xb, state.gamma_eps))
    for a, b in zip(*out):
        np.testing.assert_array_equal(a, b)


def test_complex_sweep_runs_and_real_reduces():
    rng = np.random.default_rng(8)
    img = rng.standard_normal((8, 8))
    X = np.vstack([img.ravel()] * 4)
    D, codes, state = init_state(X, HyperParams(K=6, gamma0=2.0), seed=0)
    D, codes, state, xb = gibbs_sweep(X, D, codes, state, PatchConfig(2))
    assert not np.iscomplexobj(D) and not np.iscomplexobj(xb)
    Xc = X * np.exp(0.3j)
    D, codes, state = init_state(Xc, HyperParams(K=6, gamma0=2.0), seed=0)
    D, codes, state, xb = gibbs_sweep(Xc, D, codes, state, PatchConfig(2))
    D, codes, state, xb = gibbs_sweep(Xc, D, codes, state, PatchConfig(2))
    assert np.iscomplexobj(D) and np.iscomplexobj(xb) and np.all(np.isfinite(xb))


def _log_joint_setup(seed=0):
    rng = np.random.default_rng(seed)
    P, K, N = 4, 3, 20
    D = rng.standard_normal((P, K))
    Z = rng.random((K, N)) < 0.5
    S = rng.standard_normal((K, N))
    X = D @ (S * Z)
    state = make_state(K, 0.3, 2.0, 1.5)
    state.pi = np.array([0.2, 0.5, 0.7])
    return X, D, SparseCodes(Z, S), state


def test_log_joint_noise_precision_derivative():
    X, D, codes, state = _log_joint_setup()
    P, N = X.shape
    hp = state.hp
    g1, g2 = 2.0, 5.0
    state.gamma_eps = g1
    a = log_joint(X, D, codes, state)
    state.gamma_eps = g2
    b = log_joint(X, D, codes, state)
    expect = (P * N / 2) * np.log(g2 / g1) + (hp.g0 - 1) * np.log(g2 / g1) - hp.h0 * (g2 - g1)
    assert b - a == pytest.approx(expect, rel=1e-12)


def test_log_joint_permutation_invariant():
    X, D, codes, state = _log_joint_setup(1)
    perm = np.random.default_rng(0).permutation(X.shape[1])
    a = log_joint(X, D, codes, state)
    b = log_joint(X[:, perm], D, SparseCodes(codes.Z[:, perm], codes.S[:, perm]), state)
    assert a == pytest.approx(b, rel=1e-12)


def test_log_joint_matches_scipy_densities():
    X, D, codes, state = _log_joint_setup(2)
    rng = np.random.default_rng(3)
    X = X + 0.1 * rng.standard_normal(X.shape)
    hp = state.hp

    def full(st):
        R = X - D @ codes.alpha
        ge, gs = st.gamma_eps, st.gamma_s
        lp = stats.norm.logpdf(R, scale=ge**-0.5).sum()
        lp += sum(stats.norm.logpdf(codes.S[k], scale=gs[k]**-0.5).sum() for k in range(len(gs)))
        lp += stats.norm.logpdf(D, scale=D.shape[0]**-0.5).sum()
        lp += sum(stats.bernoulli.logpmf(codes.Z[k], st.pi[k]).sum() for k in range(len(gs)))
        lp += stats.beta.logpdf(st.pi, hp.a0, hp.b0).sum()
        lp += stats.gamma.logpdf(ge, hp.g0, scale=1 / hp.h0)
        lp += stats.gamma.logpdf(gs, hp.e0, scale=1 / hp.f0).sum()
        return lp

    a1, b1 = log_joint(X, D, codes, state), full(state)
    state.gamma_eps, state.gamma_s, state.pi = 7.0, np.array([0.5, 2.0, 3.0]), np.array([0.1, 0.4, 0.9])
    a2, b2 = log_joint(X, D, codes, state), full(state)
    # equal up to a state-independent constant
    assert a2 - a1 == pytest.approx(b2 - b1, rel=1e-10)


def test_log_joint_rejects_bad_precision():
    X, D, codes, state = _log_joint_setup()
    state.gamma_eps = 0.0
    with pytest.raises(ConfigError):
        log_joint(X, D, codes, state)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.standard_normal((9, 64))
    D, codes, state = init_state(X, HyperParams(K=12, gamma0=3.0), seed=4)
    D, codes, state, _ = gibbs_sweep(X, D, codes, state, PatchConfig(3))
    bpfa.save_checkpoint(tmp_path, D, codes, state)
    D2, codes2, state2 = bpfa.load_checkpoint(tmp_path)
    np.testing.assert_array_equal(D, D2)
    np.testing.assert_array_equal(codes.Z, codes2.Z)
    np.testing.assert_array_equal(codes.S, codes2.S)
    assert state2.sweep == state.sweep and state2.hp == state.hp and state2.gamma_eps == state.gamma_eps


def test_denoise_reduces_noise():
    from bpfa_mri.phantoms import add_noise, make_phantom
    from bpfa_mri.metrics import psnr
    clean = make_phantom(32)
    noisy = add_noise(clean, 20.0, seed=1)
    den, diag = bpfa.denoise(noisy, sweeps=30, seed=0, patch=PatchConfig(4))
    assert psnr(den, clean) > psnr(noisy, clean) + 3
    assert 10 < diag["noise_std"] < 30
