"""Image-domain operators shared by every stage of the reconstruction.

Images are plain square 2-D numpy arrays. A float64 array is a *real mode*
image and a complex128 array is a *complex mode* image; the mode travels with
the dtype rather than with a wrapper object. Pixel ``i`` is the row-major flat
index ``i = row * n + col``.

Conventions frozen here:

* The 2-D Fourier transform is unitary (``norm="ortho"``) with the DC
  coefficient at ``[0, 0]``.
* Patches are ``p x p`` windows whose upper-left corner is pixel ``i``,
  wrapped periodically, vectorised row-major. There is one patch per pixel.
* The finite-difference operator uses periodic boundaries. At pixel ``(r, c)``
  the vertical difference is ``x[r, c] - x[r-1, c]`` and the horizontal one is
  ``x[r, c] - x[r, c+1]``. Coefficients are stored with shape ``(n, n, 2)``,
  so ``beta.ravel()`` interleaves (vertical, horizontal) per pixel.
"""

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid sizes, rates or other configuration values."""


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry. Stride is fixed at 1 and boundaries always wrap."""

    patch_side: int = 6

    def __post_init__(self):
        if int(self.patch_side) < 1:
            raise ConfigError(f"patch_side must be positive, got {self.patch_side}")

    @property
    def size(self) -> int:
        """Number of pixels per patch (``P``)."""
        return self.patch_side * self.patch_side


def check_image(img, name="image") -> np.ndarray:
    """Return ``img`` as a square float64/complex128 array or raise."""
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ConfigError(f"{name} must be a square 2-D array, got shape {img.shape}")
    if img.shape[0] < 2:
        raise ConfigError(f"{name} side must be at least 2")
    if np.iscomplexobj(img):
        return img.astype(np.complex128, copy=False)
    return img.astype(np.float64, copy=False)


def is_complex(img) -> bool:
    return np.iscomplexobj(img)


def fft2(img: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT; DC at ``[0, 0]``."""
    return np.fft.fft2(img, norm="ortho")


def ifft2(theta: np.ndarray, real: bool = False) -> np.ndarray:
    """Unitary inverse 2-D DFT.

    With ``real=True`` the imaginary part is dropped, which is how real-mode
    images suppress round-off drift after a trip through k-space.
    """
    out = np.fft.ifft2(theta, norm="ortho")
    if real:
        return np.ascontiguousarray(out.real)
    return out


def extract_patches(img: np.ndarray, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Stack every wrapped patch of ``img`` as a column of a ``P x N`` matrix.

    Row ``a * p + b`` of the result holds pixel ``(r + a, c + b) mod n`` for the
    patch anchored at ``(r, c)``; column ``r * n + c`` is that patch.
    """
    img = check_image(img)
    n = img.shape[0]
    p = cfg.patch_side
    if p > n:
        raise ConfigError(f"patch_side {p} exceeds image side {n}")
    X = np.empty((p * p, n * n), dtype=img.dtype)
    for a in range(p):
        for b in range(p):
            X[a * p + b] = np.roll(img, (-a, -b), axis=(0, 1)).ravel()
    return X


def aggregate_patches(cols: np.ndarray, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Average overlapping patch columns back into an image: ``(1/P) sum_i R_i^T c_i``.

    Inverse of :func:`extract_patches` on its range. The summation order is
    fixed (row-major over in-patch offsets), so results are reproducible.
    """
    cols = np.asarray(cols)
    p = cfg.patch_side
    P = p * p
    if cols.ndim != 2 or cols.shape[0] != P:
        raise ConfigError(f"expected {P} rows of patch data, got shape {cols.shape}")
    N = cols.shape[1]
    n = int(round(np.sqrt(N)))
    if n * n != N:
        raise ConfigError(f"number of patches {N} is not a perfect square")
    if p > n:
        raise ConfigError(f"patch_side {p} exceeds image side {n}")
    out = np.zeros((n, n), dtype=np.result_type(cols.dtype, np.float64))
    for a in range(p):
        for b in range(p):
            out += np.roll(cols[a * p + b].reshape(n, n), (a, b), axis=(0, 1))
    out /= P
    return out


def psi_apply(img: np.ndarray) -> np.ndarray:
    """Forward differences with periodic boundary, shape ``(n, n, 2)``."""
    img = np.asarray(img)
    beta = np.empty(img.shape + (2,), dtype=np.result_type(img.dtype, np.float64))
    beta[..., 0] = img - np.roll(img, 1, axis=0)
    beta[..., 1] = img - np.roll(img, -1, axis=1)
    return beta


def psi_transpose_apply(beta: np.ndarray, side: int | None = None) -> np.ndarray:
    """Adjoint of :func:`psi_apply`.

    ``beta`` may be given as ``(n, n, 2)`` or as the flat length-``2N`` vector
    (then ``side`` may be passed to validate the length).
    """
    beta = np.asarray(beta)
    if beta.ndim == 1:
        if side is None:
            side = int(round(np.sqrt(beta.size / 2)))
        if beta.size != 2 * side * side:
            raise ConfigError(f"TV coefficient vector has length {beta.size}, expected {2 * side * side}")
        beta = beta.reshape(side, side, 2)
    elif beta.ndim != 3 or beta.shape[2] != 2 or beta.shape[0] != beta.shape[1]:
        raise ConfigError(f"TV coefficients must have shape (n, n, 2), got {beta.shape}")
    elif side is not None and beta.shape[0] != side:
        raise ConfigError(f"TV coefficients have side {beta.shape[0]}, expected {side}")
    bv = beta[..., 0]
    bh = beta[..., 1]
    return bv - np.roll(bv, -1, axis=0) + bh - np.roll(bh, 1, axis=1)


@dataclass(frozen=True)
class DifferenceOperator:
    """Eigenvalues of ``Psi^T Psi`` on the unshifted DFT grid."""

    side: int
    eigenvalues: np.ndarray


def laplacian_eigenvalues(n: int) -> DifferenceOperator:
    """Diagonalise ``Psi^T Psi`` by transforming its impulse response.

    The operator is a periodic convolution, so the (non-normalised) DFT of the
    response to a delta gives its spectrum directly. Round-off in the DFT is
    removed by keeping the real part and clipping at zero; the result agrees
    with ``4 - 2cos(2 pi k1/n) - 2cos(2 pi k2/n)``.
    """
    if n < 2:
        raise ConfigError(f"side must be at least 2, got {n}")
    delta = np.zeros((n, n))
    delta[0, 0] = 1.0
    kernel = psi_transpose_apply(psi_apply(delta))
    lam = np.fft.fft2(kernel).real
    np.maximum(lam, 0.0, out=lam)
    lam[0, 0] = 0.0
    return DifferenceOperator(side=n, eigenvalues=lam)


def laplacian_eigenvalues_closed_form(n: int) -> np.ndarray:
    k = 2.0 * np.pi * np.arange(n) / n
    return 4.0 - 2.0 * np.cos(k)[:, None] - 2.0 * np.cos(k)[None, :]
