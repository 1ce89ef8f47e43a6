"""k-space undersampling masks and the undersampled Fourier encoder.

Masks are stored over *centred* k-space (DC at ``(n//2, n//2)``), which is how
they are drawn and saved. :func:`apply_mask` and :func:`zero_fill` move between
that layout and the unshifted layout of :func:`bpfa_mri.core.fft2`.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, check_image, fft2, ifft2

MASK_KINDS = ("cartesian", "radial", "random", "full")


@dataclass
class SamplingMask:
    """Boolean selection over centred k-space."""

    selected: np.ndarray
    kind: str = "full"
    requested_rate: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=bool)
        n = self.selected.shape[0]
        if self.selected.ndim != 2 or self.selected.shape[1] != n:
            raise ConfigError(f"mask must be square, got shape {self.selected.shape}")
        if self.kind not in MASK_KINDS:
            raise ConfigError(f"unknown mask kind {self.kind!r}")

    @property
    def side(self) -> int:
        return self.selected.shape[0]

    @property
    def count(self) -> int:
        return int(self.selected.sum())

    @property
    def rate(self) -> float:
        return self.count / self.selected.size

    def unshifted(self) -> np.ndarray:
        """The mask on the DFT grid used by :func:`bpfa_mri.core.fft2`."""
        return np.fft.ifftshift(self.selected)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "side": self.side,
            "requested_rate": self.requested_rate,
            "achieved_rate": self.rate,
            "seed": self.seed,
        }

    def save(self, directory) -> Path:
        """Write ``mask.png`` (white = selected) and ``mask.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        Image.fromarray(self.selected).save(directory / "mask.png")
        (directory / "mask.json").write_text(json.dumps(self.metadata(), indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "SamplingMask":
        directory = Path(directory)
        png = directory / "mask.png" if directory.is_dir() else directory
        meta_path = png.with_suffix(".json")
        try:
            with Image.open(png) as im:
                selected = np.asarray(im.convert("L")) > 127
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        except OSError as exc:
            raise OSError(f"cannot read mask {png}: {exc}") from exc
        return cls(
            selected,
            kind=meta.get("kind", "full"),
            requested_rate=meta.get("requested_rate", selected.mean()),
            seed=meta.get("seed"),
        )


@dataclass
class KSpaceData:
    """Measured coefficients, listed in row-major order of the centred mask."""

    mask: SamplingMask
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128).ravel()
        if self.values.size != self.mask.count:
            raise ConfigError(
                f"{self.values.size} k-space values for a mask selecting {self.mask.count}"
            )

    @property
    def side(self) -> int:
        return self.mask.side

    def grid(self) -> np.ndarray:
        """Measured values placed on the unshifted DFT grid, zeros elsewhere."""
        full = np.zeros((self.side, self.side), dtype=np.complex128)
        full[self.mask.selected] = self.values
        return np.fft.ifftshift(full)


def _check_rate(rate) -> float:
    rate = float(rate)
    if not (0.0 < rate <= 1.0) or math.isnan(rate):
        raise ConfigError(f"sampling rate must lie in (0, 1], got {rate}")
    return rate


def _ceil_count(x: float) -> int:
    # guards against 0.3 * 64 = 19.200000000000003 style noise at integers
    return int(math.ceil(x - 1e-9))


def gen_cartesian(n: int, rate: float, seed: int = 0, center_fraction: float = 0.2,
                  decay: float = 4.0) -> SamplingMask:
    """Variable-density Cartesian mask of full horizontal lines.

    ``ceil(rate * n)`` lines are selected. A centred band of
    ``ceil(center_fraction * rate * n)`` lines is always taken; the rest are
    drawn without replacement with weight ``(1 - |d| / (n/2)) ** decay`` where
    ``d`` is the signed line offset from the centre.
    """
    rate = _check_rate(rate)
    if n < 2:
        raise ConfigError(f"side must be at least 2, got {n}")
    n_lines = min(n, _ceil_count(rate * n))
    selected = np.zeros((n, n), dtype=bool)
    if n_lines >= n:
        selected[:] = True
        return SamplingMask(selected, "cartesian", rate, seed)

    c = n // 2
    n_center = max(1, _ceil_count(center_fraction * rate * n))
    n_center = min(n_center, n_lines)
    first = c - n_center // 2
    rows = list(range(first, first + n_center))

    d = np.arange(n) - c
    weights = np.clip(1.0 - np.abs(d) / (n / 2.0), 0.0, None) ** decay
    weights[rows] = 0.0
    n_rand = n_lines - n_center
    if n_rand:
        rng = np.random.default_rng(seed)
        avail = np.count_nonzero(weights)
        if avail < n_rand:
            # only reachable for tiny n; take every positive-weight line then the edges
            extra = np.flatnonzero(weights > 0).tolist()
            rest = [r for r in range(n) if r not in rows and r not in extra]
            rows += extra + rest[: n_rand - len(extra)]
        else:
            pick = rng.choice(n, size=n_rand, replace=False, p=weights / weights.sum())
            rows += sorted(int(r) for r in pick)
    selected[rows, :] = True
    return SamplingMask(selected, "cartesian", rate, seed)


def _radial_lines(n: int, n_lines: int) -> np.ndarray:
    c = n // 2
    # half-pixel steps over the full square so oblique lines reach the corners
    t = np.arange(-2 * n, 2 * n + 1) * 0.5
    selected = np.zeros((n, n), dtype=bool)
    for ell in range(n_lines):
        theta = np.pi * ell / n_lines
        rows = np.floor(c - t * np.sin(theta) + 0.5).astype(int)
        cols = np.floor(c + t * np.cos(theta) + 0.5).astype(int)
        keep = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        selected[rows[keep], cols[keep]] = True
    return selected


def gen_radial(n: int, rate: float) -> SamplingMask:
    """Radial lines through the k-space centre, uniformly spaced in angle.

    Line ``l`` of ``L`` sits at angle ``pi * l / L`` and is rasterised by
    nearest-neighbour rounding at half-pixel steps. ``L`` is the smallest
    count whose union covers at least ``rate * n**2`` locations.
    """
    rate = _check_rate(rate)
    if n < 2:
        raise ConfigError(f"side must be at least 2, got {n}")
    target = _ceil_count(rate * n * n)
    if target >= n * n:
        return SamplingMask(np.ones((n, n), dtype=bool), "radial", rate, None)
    n_lines = 1
    while True:
        selected = _radial_lines(n, n_lines)
        if selected.sum() >= target:
            return SamplingMask(selected, "radial", rate, None)
        n_lines += 1
        if n_lines > 16 * n:
            return SamplingMask(np.ones((n, n), dtype=bool), "radial", rate, None)


def gen_random(n: int, rate: float, seed: int = 0) -> SamplingMask:
    """Uniformly random locations (not a practical MRI trajectory; for tests)."""
    rate = _check_rate(rate)
    count = max(1, min(n * n, int(round(rate * n * n))))
    rng = np.random.default_rng(seed)
    c = n // 2
    dc = c * n + c
    others = np.delete(np.arange(n * n), dc)
    pick = rng.choice(others, size=count - 1, replace=False)
    flat = np.zeros(n * n, dtype=bool)
    flat[dc] = True
    flat[pick] = True
    return SamplingMask(flat.reshape(n, n), "random", rate, seed)


def full_mask(n: int) -> SamplingMask:
    return SamplingMask(np.ones((n, n), dtype=bool), "full", 1.0, None)


def make_mask(kind: str, n: int, rate: float, seed: int = 0, center_fraction: float = 0.2,
              decay: float = 4.0) -> SamplingMask:
    """Dispatch on ``kind``; the last two arguments only affect Cartesian masks."""
    if kind == "cartesian":
        return gen_cartesian(n, rate, seed, center_fraction, decay)
    if kind == "radial":
        return gen_radial(n, rate)
    if kind == "random":
        return gen_random(n, rate, seed)
    if kind == "full":
        return full_mask(n)
    raise ConfigError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def apply_mask(x: np.ndarray, mask: SamplingMask) -> KSpaceData:
    """``y = F_u x``: unitary FFT restricted to the selected locations."""
    x = check_image(x)
    if x.shape[0] != mask.side:
        raise ConfigError(f"image side {x.shape[0]} does not match mask side {mask.side}")
    theta = np.fft.fftshift(fft2(x))
    return KSpaceData(mask, theta[mask.selected])


def zero_fill(y: KSpaceData, hermitian: bool = False) -> np.ndarray:
    """``F_u^H y``: inverse FFT of the measurements with zeros elsewhere.

    With ``hermitian=True`` the result is the real image whose spectrum agrees
    with ``y`` on the measured set and its point reflection, i.e. each measured
    value is mirrored as its conjugate wherever the mirror location was not
    itself measured. This is exact for data taken from a real image.
    """
    if not hermitian:
        return ifft2(y.grid())
    return ifft2(hermitian_fill(y)[0], real=True)


def mirror(a: np.ndarray) -> np.ndarray:
    """Point reflection ``a[-k1 mod n, -k2 mod n]`` on the unshifted grid."""
    return np.roll(a[::-1, ::-1], 1, axis=(0, 1))


def hermitian_fill(y: KSpaceData) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate-symmetric measurement grid and its support weight.

    Returns ``(values, weight)`` on the unshifted grid where ``weight`` counts
    how many of ``{k, -k}`` were measured, halved, and ``values`` is the
    weighted average of the direct and mirrored-conjugate measurements.
    """
    m = y.mask.unshifted().astype(np.float64)
    g = y.grid()
    m_mir = mirror(m)
    g_mir = np.conj(mirror(g))
    weight = 0.5 * (m + m_mir)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(weight > 0, 0.5 * (g + g_mir) / np.where(weight > 0, weight, 1.0), 0.0)
    return values, weight
