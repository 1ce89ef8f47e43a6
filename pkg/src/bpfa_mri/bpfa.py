"""Beta process factor analysis (BPFA) on image patches, fitted by Gibbs sampling.

Model, for patch ``i`` of ``N`` (columns of the ``P x N`` matrix ``X``)::

    d_k     ~ N(0, I / P)                        k = 1..K
    pi_k    ~ Beta(c*gamma0/K, c*(1 - gamma0/K))
    g_eps   ~ Gamma(g0, h0),  g_s[k] ~ Gamma(e0, f0)      (shape, rate)
    s_ik    ~ N(0, 1 / g_s[k]),  z_ik ~ Bernoulli(pi_k)
    x_i     = D (s_i * z_i) + N(0, I / g_eps)

Real arrays use real Gaussians. Complex arrays use circular complex Gaussians
with the same precisions (``E|v|^2 = 1/precision``) and conjugated inner
products; the conditionals below are derived for that density.
"""

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import linalg, sparse
from scipy.special import expit, gammaln, betaln

from .core import ConfigError, PatchConfig, aggregate_patches, check_image, extract_patches
from .io import load_array, save_array, write_json
from .rng import standard_normal, stream

log = logging.getLogger(__name__)

# Dictionary step switches to sparse products below this density of active codes.
_SPARSE_DENSITY = 0.15


@dataclass(frozen=True)
class HyperParams:
    """Prior settings.

    ``g0``/``h0`` left as ``None`` are resolved from the data at
    initialisation: ``g0 = 0.5 * N * prior_strength`` for ``N`` pixels and
    ``h0 = g0 * v / prior_snr`` with ``v`` the variance of the initial image,
    giving a prior noise variance of ``v / prior_snr``.
    """

    K: int = 108
    c: float = 1.0
    gamma0: float = 5.0
    e0: float = 1.0
    f0: float = 1.0
    g0: float | None = None
    h0: float | None = None
    prior_strength: float = 0.1
    prior_snr: float = 8.0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be positive, got {self.K}")
        if not 0 < self.gamma0 < self.K:
            raise ConfigError(f"gamma0 must lie in (0, K), got {self.gamma0}")
        for name in ("c", "e0", "f0", "prior_strength", "prior_snr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("g0", "h0"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")

    @property
    def a0(self) -> float:
        return self.c * self.gamma0 / self.K

    @property
    def b0(self) -> float:
        return self.c * (1.0 - self.gamma0 / self.K)

    def resolve(self, n_pixels: int, variance: float) -> "HyperParams":
        """Fill in data-dependent ``g0``/``h0``."""
        g0 = self.g0 if self.g0 is not None else 0.5 * n_pixels * self.prior_strength
        if self.h0 is not None:
            h0 = self.h0
        else:
            h0 = g0 * max(float(variance), 1e-12) / self.prior_snr
        return replace(self, g0=float(g0), h0=float(h0))


@dataclass
class SparseCodes:
    """Binary supports ``Z`` and weights ``S``, both ``K x N``."""

    Z: np.ndarray
    S: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return self.S * self.Z

    def copy(self) -> "SparseCodes":
        return SparseCodes(self.Z.copy(), self.S.copy())


@dataclass
class BPFAState:
    """Everything besides the dictionary and codes that a sweep updates."""

    hp: HyperParams
    pi: np.ndarray
    gamma_eps: float
    gamma_s: np.ndarray
    seed: int
    sweep: int = 0

    def __post_init__(self):
        if self.hp.g0 is None or self.hp.h0 is None:
            raise ConfigError("BPFAState needs resolved hyperparameters (call HyperParams.resolve)")


def _complex(*arrays) -> bool:
    return any(np.iscomplexobj(a) for a in arrays)


def _alpha_matrix(alpha: np.ndarray):
    density = np.count_nonzero(alpha) / max(alpha.size, 1)
    if density < _SPARSE_DENSITY:
        return sparse.csr_matrix(alpha)
    return alpha


def reconstruct_patches(D: np.ndarray, codes: SparseCodes) -> np.ndarray:
    """``D @ alpha`` using a sparse product when most codes are inactive."""
    a = _alpha_matrix(codes.alpha)
    if sparse.issparse(a):
        return np.asarray((a.T @ D.T).T)
    return D @ a


def init_state(X: np.ndarray, hp: HyperParams | None = None, seed: int = 0):
    """Initial dictionary, codes and state for patch matrix ``X``.

    The first ``min(P, K)`` atoms are the leading left singular vectors of
    ``X`` (36 for 6x6 patches); the rest are prior draws. All ``z`` start at
    zero, ``pi`` at 0.1, ``gamma_eps`` at its prior mean ``g0/h0`` and
    ``gamma_s`` at ``e0/f0``; ``S`` is drawn from its prior.
    """
    hp = hp or HyperParams()
    X = np.asarray(X)
    if X.ndim != 2:
        raise ConfigError(f"patch matrix must be 2-D, got shape {X.shape}")
    P, N = X.shape
    K = hp.K
    cplx = _complex(X)
    gen = stream(seed, 0, "init")

    hp = hp.resolve(N, float(np.var(X)))
    D = standard_normal(gen, (P, K), cplx) / np.sqrt(P)
    if np.any(X):
        U, _, _ = np.linalg.svd(X, full_matrices=False)
        n_svd = min(P, K, U.shape[1])
        D[:, :n_svd] = U[:, :n_svd]

    gamma_s = np.full(K, hp.e0 / hp.f0)
    S = standard_normal(gen, (K, N), cplx) / np.sqrt(gamma_s)[:, None]
    Z = np.zeros((K, N), dtype=bool)
    state = BPFAState(
        hp=hp,
        pi=np.full(K, 0.1),
        gamma_eps=hp.g0 / hp.h0,
        gamma_s=gamma_s,
        seed=int(seed),
    )
    return D, SparseCodes(Z, S), state


def sample_dictionary(X: np.ndarray, codes: SparseCodes, state: BPFAState) -> np.ndarray:
    """Draw ``D`` from its Gaussian conditional.

    Each row of ``D`` has precision ``M = g_eps * alpha alpha^H + P I_K`` and
    mean ``X alpha^H (alpha alpha^H + (P/g_eps) I_K)^{-1}``. One Cholesky
    factor ``M = L L^H`` serves both the solve and the correlated noise
    ``E = Xi L^{-1}``.
    """
    P, N = X.shape
    K = codes.Z.shape[0]
    ge = state.gamma_eps
    cplx = _complex(X, codes.S)
    a = _alpha_matrix(codes.alpha)
    if sparse.issparse(a):
        G = (a @ a.conj().T).toarray()
        aXh = np.asarray(a @ X.conj().T)
    else:
        G = a @ a.conj().T
        aXh = a @ X.conj().T
    M = ge * G + P * np.eye(K)
    L = linalg.cholesky(M, lower=True)
    mean_h = linalg.cho_solve((L, True), ge * aXh)
    mean = mean_h.conj().T

    gen = stream(state.seed, state.sweep, "dictionary")
    xi = standard_normal(gen, (P, K), cplx)
    E = linalg.solve_triangular(L, xi.T, trans="T", lower=True).T
    D = mean + E
    if not cplx:
        D = np.real(D)
    return D


def _logit(pi):
    with np.errstate(divide="ignore"):
        return np.log(pi) - np.log1p(-pi)


def sample_codes(X: np.ndarray, D: np.ndarray, codes: SparseCodes, state: BPFAState) -> SparseCodes:
    """One pass of block sampling ``(z_ik, s_ik)`` for k = 1..K in order.

    Patches are conditionally independent, so each atom's update runs over
    all patches at once while the residual ``X - D alpha`` is kept current.
    Patch ``i`` reads its uniforms and normals from counter block ``i`` of the
    sweep's streams.
    """
    P, N = X.shape
    K = D.shape[1]
    cplx = _complex(X, D, codes.S)
    ge = float(state.gamma_eps)
    gs = np.asarray(state.gamma_s, dtype=np.float64)

    Z = codes.Z.copy()
    S = codes.S.astype(np.complex128 if cplx else np.float64, copy=True)
    R = X - reconstruct_patches(D, codes)
    if cplx:
        R = R.astype(np.complex128)

    U = np.ascontiguousarray(stream(state.seed, state.sweep, "codes_u").random((N, K)).T)
    W = np.ascontiguousarray(standard_normal(stream(state.seed, state.sweep, "codes_s"), (N, K), cplx).T)

    dtd = np.sum(np.abs(D) ** 2, axis=0)
    log_prior = _logit(np.asarray(state.pi, dtype=np.float64))
    # real: det term exponent -1/2 and quadratic term /2; circular complex: -1 and 1
    half = 1.0 if cplx else 0.5

    for k in range(K):
        d = D[:, k]
        old = S[k] * Z[k]
        dtr = d.conj() @ R
        if np.any(old):
            dtr = dtr + dtd[k] * old
        denom = gs[k] / ge + dtd[k]
        quad = np.abs(dtr) ** 2 if cplx else dtr * dtr
        with np.errstate(invalid="ignore"):
            lo = log_prior[k] - half * np.log1p(ge / gs[k] * dtd[k]) + half * ge * quad / denom
        z = U[k] < expit(lo)
        var = 1.0 / (gs[k] + ge * z * dtd[k])
        s = np.where(z, dtr / denom, 0.0) + np.sqrt(var) * W[k]
        Z[k] = z
        S[k] = s
        delta = np.where(z, s, 0.0) - old
        idx = np.flatnonzero(delta)
        if idx.size == 0:
            continue
        if idx.size * 4 < N:
            R[:, idx] -= np.outer(d, delta[idx])
        else:
            R -= np.outer(d, delta)
    return SparseCodes(Z, S)


def sample_noise_precision(X: np.ndarray, D: np.ndarray, codes: SparseCodes, state: BPFAState,
                           residual: np.ndarray | None = None) -> float:
    """``g_eps ~ Gamma(g0 + P N / 2, h0 + sum |X - D alpha|^2 / 2)`` (shape, rate).

    Complex data keep the same counts, with ``|.|`` the complex magnitude.
    """
    P, N = X.shape
    if residual is None:
        residual = X - reconstruct_patches(D, codes)
    sse = float(np.sum(np.abs(residual) ** 2))
    shape = state.hp.g0 + 0.5 * P * N
    rate = state.hp.h0 + 0.5 * sse
    gen = stream(state.seed, state.sweep, "noise_precision")
    return float(gen.gamma(shape, 1.0 / rate))


def sample_weight_precisions(codes: SparseCodes, state: BPFAState) -> np.ndarray:
    """``g_s[k] ~ Gamma(e0 + n_k / 2, f0 + sum_i z_ik |s_ik|^2 / 2)``."""
    hp = state.hp
    used = codes.Z.sum(axis=1)
    ss = np.sum(np.where(codes.Z, np.abs(codes.S) ** 2, 0.0), axis=1)
    gen = stream(state.seed, state.sweep, "weight_precision")
    return gen.gamma(hp.e0 + 0.5 * used, 1.0 / (hp.f0 + 0.5 * ss))


def sample_pi(codes: SparseCodes, state: BPFAState) -> np.ndarray:
    """``pi_k ~ Beta(a0 + n_k, b0 + N - n_k)``."""
    hp = state.hp
    N = codes.Z.shape[1]
    used = codes.Z.sum(axis=1)
    gen = stream(state.seed, state.sweep, "pi")
    return gen.beta(hp.a0 + used, hp.b0 + N - used)


def gibbs_sweep(X: np.ndarray, D: np.ndarray, codes: SparseCodes, state: BPFAState,
                patch: PatchConfig = PatchConfig()):
    """One sweep: dictionary, codes, noise precision, weight precisions, pi.

    The dictionary draw is skipped while every code is inactive (only right
    after :func:`init_state`): with ``alpha = 0`` the conditional is the prior
    and the draw would discard the SVD initialisation before any code has
    seen it.

    Returns ``(D, codes, state, x_bpfa)`` where ``x_bpfa`` averages the patch
    approximations ``D alpha_i`` over their overlaps.
    """
    state.sweep += 1
    if np.any(codes.Z):
        D = sample_dictionary(X, codes, state)
    codes = sample_codes(X, D, codes, state)
    approx = reconstruct_patches(D, codes)
    state.gamma_eps = sample_noise_precision(X, D, codes, state, residual=X - approx)
    state.gamma_s = sample_weight_precisions(codes, state)
    state.pi = sample_pi(codes, state)
    x_bpfa = aggregate_patches(approx, patch)
    if not _complex(X):
        x_bpfa = np.real(x_bpfa)
    return D, codes, state, x_bpfa


def atoms_per_patch(codes: SparseCodes) -> np.ndarray:
    return codes.Z.sum(axis=0)


def sample_prior_atom_counts(hp: HyperParams, n_patches: int, seed: int = 0,
                             shared_pi: bool = False) -> np.ndarray:
    """Atoms per patch drawn from the prior: ``pi ~ Beta(a0, b0)``, ``z ~ Bernoulli(pi)``.

    By default each patch gets its own ``pi`` draw, so the counts are i.i.d.
    from the marginal prior (mean ``gamma0``). ``shared_pi=True`` draws ``pi``
    once, as within a single model, which makes the mean itself random.
    """
    gen = stream(seed, 0, "pi")
    rows = 1 if shared_pi else n_patches
    pi = gen.beta(hp.a0, hp.b0, size=(rows, hp.K))
    counts = np.empty(n_patches, dtype=np.int64)
    step = 4096
    for start in range(0, n_patches, step):
        stop = min(start + step, n_patches)
        p = pi if shared_pi else pi[start:stop]
        counts[start:stop] = (gen.random((stop - start, hp.K)) < p).sum(axis=1)
    return counts


def diagnostics(D: np.ndarray, codes: SparseCodes, state: BPFAState) -> dict:
    """Summary of a fitted model, ordered by decreasing ``pi``."""
    order = np.argsort(-state.pi, kind="stable")
    per_patch = atoms_per_patch(codes)
    K = D.shape[1]
    return {
        "noise_std": float(1.0 / np.sqrt(state.gamma_eps)),
        "gamma_eps": float(state.gamma_eps),
        "pi_sorted": state.pi[order].copy(),
        "order": order,
        "dictionary": D[:, order].copy(),
        "atoms_per_patch": per_patch,
        "histogram": np.bincount(per_patch, minlength=K + 1),
        "atoms_in_use": int(np.count_nonzero(codes.Z.any(axis=1))),
        "atoms_pi_above_001": int(np.count_nonzero(state.pi > 0.01)),
        "sweeps": state.sweep,
    }


def denoise(img: np.ndarray, hp: HyperParams | None = None, sweeps: int = 100, seed: int = 0,
            patch: PatchConfig = PatchConfig(), scale: float = 255.0, callback=None):
    """Denoise an image with BPFA alone (no k-space constraint).

    The sampler sees ``img / scale``; the returned image and the learned
    noise standard deviation (``diagnostics["noise_std"]``) are in the
    units of ``img``. The default prior on the noise precision is
    non-informative (``g0 = h0 = 1e-6``), so the noise level is learned.
    """
    if sweeps < 1:
        raise ConfigError(f"sweeps must be at least 1, got {sweeps}")
    img = check_image(img)
    hp = hp or HyperParams(g0=1e-6, h0=1e-6)
    X = extract_patches(img / scale, patch)
    D, codes, state = init_state(X, hp, seed)
    x_bpfa = img
    for t in range(sweeps):
        D, codes, state, x_bpfa = gibbs_sweep(X, D, codes, state, patch)
        if callback is not None:
            callback(t, x_bpfa * scale, state, codes)
        log.debug("sweep %d noise std %.3f", state.sweep, scale / np.sqrt(state.gamma_eps))
    diag = diagnostics(D, codes, state)
    diag["noise_std"] *= scale
    return x_bpfa * scale, diag


def log_joint(X: np.ndarray, D: np.ndarray, codes: SparseCodes, state: BPFAState) -> float:
    """Log joint density of patches and all BPFA variables, up to a constant.

    Terms that depend only on ``P``, ``N``, ``K`` and fixed hyperparameters
    are dropped, so only differences between states are meaningful.
    """
    hp = state.hp
    ge = float(state.gamma_eps)
    gs = np.asarray(state.gamma_s, dtype=np.float64)
    if ge <= 0 or np.any(gs <= 0):
        raise ConfigError("precisions must be strictly positive")
    P, N = X.shape
    cplx = _complex(X, D, codes.S)
    w = 1.0 if cplx else 0.5

    R = X - reconstruct_patches(D, codes)
    lp = w * P * N * np.log(ge) - w * ge * float(np.sum(np.abs(R) ** 2))
    s2 = np.abs(codes.S) ** 2
    lp += w * N * float(np.sum(np.log(gs))) - w * float(np.sum(gs[:, None] * s2))
    lp += -w * P * float(np.sum(np.abs(D) ** 2))

    pi = np.asarray(state.pi, dtype=np.float64)
    n_used = codes.Z.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lpi = np.log(pi)
        l1pi = np.log1p(-pi)
        bern = np.where(n_used > 0, n_used * lpi, 0.0) + np.where(N - n_used > 0, (N - n_used) * l1pi, 0.0)
        beta_prior = (hp.a0 - 1.0) * lpi + (hp.b0 - 1.0) * l1pi - betaln(hp.a0, hp.b0)
    lp += float(np.sum(bern)) + float(np.sum(beta_prior))
    lp += (hp.g0 - 1.0) * np.log(ge) - hp.h0 * ge + hp.g0 * np.log(hp.h0) - gammaln(hp.g0)
    lp += float(np.sum((hp.e0 - 1.0) * np.log(gs) - hp.f0 * gs))
    return float(lp)


def save_checkpoint(directory, D: np.ndarray, codes: SparseCodes, state: BPFAState) -> Path:
    """Write the sampler state as binary arrays plus ``checkpoint.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_array(directory / "dictionary.bin", D, description="dictionary, one atom per column")
    save_array(directory / "z.bin", codes.Z.astype(np.float64), description="binary supports, K x N")
    save_array(directory / "s.bin", codes.S, description="weights, K x N")
    save_array(directory / "pi.bin", state.pi, description="atom probabilities")
    save_array(directory / "gamma_s.bin", state.gamma_s, description="weight precisions")
    K = D.shape[1]
    write_json(directory / "checkpoint.json", {
        "K": K,
        "P": D.shape[0],
        "sweep": state.sweep,
        "seed": state.seed,
        "gamma_eps": float(state.gamma_eps),
        "hyperparams": asdict(state.hp),
    })
    return directory


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`: returns ``(D, codes, state)``."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / "checkpoint.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read checkpoint in {directory}: {exc}") from exc
    D, _ = load_array(directory / "dictionary.bin")
    Z, _ = load_array(directory / "z.bin")
    S, _ = load_array(directory / "s.bin")
    pi, _ = load_array(directory / "pi.bin")
    gamma_s, _ = load_array(directory / "gamma_s.bin")
    if D.shape != (meta["P"], meta["K"]):
        raise ConfigError(f"dictionary shape {D.shape} does not match checkpoint header")
    state = BPFAState(hp=HyperParams(**meta["hyperparams"]), pi=pi, gamma_eps=float(meta["gamma_eps"]),
                      gamma_s=gamma_s, seed=int(meta["seed"]), sweep=int(meta["sweep"]))
    return D, SparseCodes(Z.astype(bool), S), state
