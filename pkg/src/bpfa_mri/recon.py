"""Closed-form Fourier-domain image update and the outer reconstruction loop.

Each outer iteration runs, in order: TV shrinkage (skipped when
``lambda_g = 0``), one BPFA Gibbs sweep on the patches of the current image,
the k-space image update, and the scaled dual update.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bpfa
from .core import ConfigError, PatchConfig, extract_patches, fft2, ifft2, laplacian_eigenvalues, psi_transpose_apply
from .metrics import psnr
from .sampling import KSpaceData, hermitian_fill, mirror, zero_fill
from .tv import TVState, dual_update, primal_residual, shrink_update, tv_value

log = logging.getLogger(__name__)

OUTPUTS = ("x", "x_bpfa")
MODES = ("real", "complex")


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction settings. Defaults are the published configuration.

    ``lam = math.inf`` fixes the measured k-space values exactly.
    ``scale`` is the pixel value mapped to 1.0 before dictionary learning;
    the regularisation constants refer to that normalised image.
    ``use_dictionary = False`` removes the BPFA term (TV-only).
    ``output`` picks which image is reported: ``"x"`` (k-space consistent)
    or ``"x_bpfa"`` (the dictionary's denoised proposal).
    """

    lam: float = math.inf
    lambda_g: float = 10.0
    rho: float = 1000.0
    iterations: int = 1000
    hp: bpfa.HyperParams = field(default_factory=bpfa.HyperParams)
    patch_side: int = 6
    seed: int = 0
    mode: str = "real"
    output: str = "x"
    use_dictionary: bool = True
    scale: float = 255.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive or infinity, got {self.lam}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.lambda_g < 0:
            raise ConfigError(f"lambda_g must be non-negative, got {self.lambda_g}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.output not in OUTPUTS:
            raise ConfigError(f"output must be one of {OUTPUTS}, got {self.output!r}")
        if not self.use_dictionary and self.lambda_g == 0:
            raise ConfigError("at least one of the dictionary and TV terms must be enabled")

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.patch_side)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = "infinity" if math.isinf(self.lam) else self.lam
        del d["lam"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)} | {"lambda"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "lambda" in d:
            d["lam"] = parse_lambda(d.pop("lambda"))
        if "hp" in d:
            hp = d["hp"]
            if isinstance(hp, dict):
                hp_known = {f.name for f in fields(bpfa.HyperParams)}
                bad = set(hp) - hp_known
                if bad:
                    raise ConfigError(f"unknown hyperparameter keys: {sorted(bad)}")
                d["hp"] = bpfa.HyperParams(**hp)
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ReconConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(json.loads(text))


def parse_lambda(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        value = float(value)
    value = float(value)
    if not value > 0:
        raise ConfigError(f"lambda must be positive or infinity, got {value}")
    return value


def denoised_output_select(cfg: ReconConfig) -> str:
    """Name of the image a run reports: ``"x"`` or ``"x_bpfa"``."""
    return cfg.output


def p3_solve(y: KSpaceData, x_bpfa, st: TVState | None, gamma_eps: float, cfg: ReconConfig,
             eigenvalues: np.ndarray | None = None, return_kspace: bool = False):
    """Minimise the quadratic image sub-problem coefficient-wise in k-space.

    ``theta_i = [rho F(Psi^T(beta - u))_i + g P F(x_bpfa)_i + lam y_i]
    / [rho Lambda_ii + g P + lam 1{i measured}]``

    With ``lam = inf`` measured coefficients are set to ``y`` and the rest
    use the formula without the data terms. ``st=None`` or ``lambda_g = 0``
    drops the TV terms; ``gamma_eps = 0`` or ``x_bpfa=None`` drops the
    dictionary term.

    In real mode the image is constrained to be real. A real image has a
    conjugate-symmetric spectrum, so each measurement also fixes its mirror
    coefficient; the data terms are built from :func:`hermitian_fill`, which
    makes the inverse transform real up to round-off (then discarded).
    """
    n = y.side
    real = cfg.mode == "real"
    P = cfg.patch_side ** 2
    use_tv = st is not None and st.lambda_g > 0
    use_dict = x_bpfa is not None and gamma_eps > 0
    if use_dict and np.shape(x_bpfa) != (n, n):
        raise ConfigError(f"x_bpfa shape {np.shape(x_bpfa)} does not match k-space side {n}")
    if use_tv and st.beta.shape[:2] != (n, n):
        raise ConfigError(f"TV state side {st.beta.shape[0]} does not match k-space side {n}")

    num = np.zeros((n, n), dtype=np.complex128)
    den = np.zeros((n, n))
    if use_tv:
        if eigenvalues is None:
            eigenvalues = laplacian_eigenvalues(n).eigenvalues
        num += st.rho * fft2(psi_transpose_apply(st.beta - st.u))
        den += st.rho * eigenvalues
    if use_dict:
        num += (gamma_eps * P) * fft2(x_bpfa)
        den += gamma_eps * P

    if real:
        values, weight = hermitian_fill(y)
    else:
        values, weight = y.grid(), y.mask.unshifted().astype(np.float64)

    if math.isinf(cfg.lam):
        measured = weight > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            theta = np.where(measured, 0.0, num / np.where(den > 0, den, 1.0))
        if np.any((den == 0) & ~measured):
            raise ConfigError("k-space update is undetermined at unmeasured locations")
        direct = y.mask.unshifted()
        if real:
            mirrored = mirror(direct) & ~direct
            theta[mirrored] = np.conj(mirror(y.grid()))[mirrored]
        theta[direct] = y.grid()[direct]
    else:
        num += cfg.lam * weight * values
        den += cfg.lam * weight
        if np.any(den == 0):
            raise ConfigError("k-space update is undetermined where the denominator vanishes")
        theta = num / den

    x = ifft2(theta, real=real)
    if return_kspace:
        return x, theta
    return x


@dataclass
class ReconResult:
    x: np.ndarray
    x_bpfa: np.ndarray | None
    kspace: np.ndarray
    log: list
    diagnostics: dict | None
    config: ReconConfig
    model: tuple | None = None  # (D, codes, state) of the last sweep

    @property
    def image(self) -> np.ndarray:
        """The reported image, per :func:`denoised_output_select`."""
        if denoised_output_select(self.config) == "x_bpfa" and self.x_bpfa is not None:
            return self.x_bpfa
        return self.x


LOG_FIELDS = (
    "iter", "psnr", "psnr_bpfa", "gamma_eps", "noise_std", "tv_value", "primal_residual",
    "primal_residual_rms", "atoms_in_use", "atoms_pi_above_001", "log_joint", "kspace_max_dev",
)


class IterationLog(list):
    """One dict per completed iteration; optionally mirrored to a CSV file."""

    def __init__(self, path=None):
        super().__init__()
        self.path = Path(path) if path is not None else None

    def flush(self) -> None:
        if self.path is not None:
            write_log_csv(self.path, self)


def write_log_csv(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for rec in records:
            w.writerow({k: _fmt(rec.get(k)) for k in LOG_FIELDS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def initial_image(y: KSpaceData, cfg: ReconConfig) -> np.ndarray:
    """Zero-filled start; the real-valued variant in real mode."""
    if cfg.mode == "real":
        return zero_fill(y, hermitian=True)
    return zero_fill(y)


def reconstruct(y: KSpaceData, cfg: ReconConfig = ReconConfig(), ground_truth=None,
                log_path=None, callback=None) -> ReconResult:
    """Run the full alternating reconstruction for ``cfg.iterations`` iterations."""
    n = y.side
    if cfg.patch_side > n:
        raise ConfigError(f"patch_side {cfg.patch_side} exceeds image side {n}")
    if ground_truth is not None and np.shape(ground_truth) != (n, n):
        raise ConfigError(f"ground truth shape {np.shape(ground_truth)} does not match side {n}")
    real = cfg.mode == "real"
    patch = cfg.patch
    eig = laplacian_eigenvalues(n).eigenvalues
    direct = y.mask.unshifted()
    y_grid = y.grid()

    # TV and the image update run in pixel units; on an image scaled by s the
    # shrinkage threshold lambda_g / rho becomes s * lambda_g / rho and every
    # other term of the k-space update is unchanged.
    scale = cfg.scale
    x = initial_image(y, cfg)
    tv = TVState.from_image(x, cfg.rho, cfg.lambda_g * scale) if cfg.lambda_g > 0 else None
    if cfg.use_dictionary:
        D, codes, state = bpfa.init_state(extract_patches(x / scale, patch), cfg.hp, cfg.seed)
    x_bpfa = None
    records = IterationLog(log_path)
    theta = fft2(x)
    sqrt_n = math.sqrt(n * n)

    try:
        for it in range(1, cfg.iterations + 1):
            if tv is not None:
                tv.beta = shrink_update(x, tv)
            gamma_eps = 0.0
            lj = None
            if cfg.use_dictionary:
                X = extract_patches(x / scale, patch)
                D, codes, state, x_bpfa = bpfa.gibbs_sweep(X, D, codes, state, patch)
                x_bpfa = x_bpfa * scale
                gamma_eps = state.gamma_eps
                lj = bpfa.log_joint(X, D, codes, state)
            x, theta = p3_solve(y, x_bpfa, tv, gamma_eps, cfg, eigenvalues=eig, return_kspace=True)
            if tv is not None:
                tv.u = dual_update(x, tv)

            rec = {
                "iter": it,
                "tv_value": tv_value(x),
                "kspace_max_dev": float(np.max(np.abs(theta[direct] - y_grid[direct]), initial=0.0)),
                "log_joint": lj,
            }
            if tv is not None:
                pr = primal_residual(x, tv)
                rec["primal_residual"] = pr
                rec["primal_residual_rms"] = pr / sqrt_n
            if cfg.use_dictionary:
                rec["gamma_eps"] = float(state.gamma_eps)
                rec["noise_std"] = float(scale / math.sqrt(state.gamma_eps))
                rec["atoms_in_use"] = int(np.count_nonzero(codes.Z.any(axis=1)))
                rec["atoms_pi_above_001"] = int(np.count_nonzero(state.pi > 0.01))
            if ground_truth is not None:
                rec["psnr"] = psnr(x, ground_truth)
                if x_bpfa is not None:
                    rec["psnr_bpfa"] = psnr(x_bpfa, ground_truth)
            records.append(rec)
            if callback is not None:
                callback(it, x, x_bpfa, rec)
            log.debug("iter %d %s", it, rec)
    finally:
        records.flush()

    diag = model = None
    if cfg.use_dictionary:
        diag = bpfa.diagnostics(D, codes, state)
        diag["noise_std"] *= scale
        model = (D, codes, state)
    if real and x_bpfa is not None:
        x_bpfa = np.real(x_bpfa)
    return ReconResult(x=x, x_bpfa=x_bpfa, kspace=theta, log=list(records), diagnostics=diag, config=cfg,
                       model=model)
