"""Deterministic piecewise-constant test images on the [0, 255] scale."""

import numpy as np

from .core import ConfigError

PHANTOM_KINDS = ("ge-like", "shepp-like")

# (kind, value, cx, cy, a, b, angle_deg); later shapes overwrite earlier ones.
# Coordinates are in [-1, 1] with y pointing down the rows.
_GE_SHAPES = (
    ("ellipse", 110.0, 0.0, 0.0, 0.86, 0.80, 0.0),
    ("ellipse", 160.0, 0.0, 0.0, 0.70, 0.64, 0.0),
    ("rect", 230.0, -0.38, -0.36, 0.20, 0.14, 0.0),
    ("ellipse", 60.0, 0.34, -0.34, 0.18, 0.24, 0.0),
    ("ellipse", 200.0, 0.0, 0.40, 0.42, 0.13, 0.0),
    ("rect", 30.0, 0.30, 0.06, 0.10, 0.10, 30.0),
    ("ellipse", 250.0, -0.46, 0.08, 0.09, 0.09, 0.0),
    ("ellipse", 250.0, -0.26, 0.08, 0.07, 0.07, 0.0),
    ("ellipse", 250.0, -0.10, 0.08, 0.05, 0.05, 0.0),
    ("ellipse", 250.0, 0.03, 0.08, 0.035, 0.035, 0.0),
)


def _resolution_features():
    # Three groups of three bars, bar width = gap = a, shrinking left to right.
    bars = tuple(
        ("rect", 230.0, cx + 2.0 * a * (b - 1), -0.36, a / 2.0, 0.12, 0.0)
        for cx, a in ((-0.10, 0.03), (0.02, 0.0225), (0.11, 0.015))
        for b in range(3)
    )
    # 3 x 3 array of small dark squares.
    holes = tuple(
        ("rect", 30.0, 0.40 + 0.07 * i, 0.18 + 0.06 * j, 0.018, 0.018, 0.0)
        for i in range(3)
        for j in range(3)
    )
    return bars + holes


_GE_SHAPES = _GE_SHAPES + _resolution_features()

# Modified Shepp-Logan geometry with intensities remapped to distinct gray levels.
_SHEPP_SHAPES = (
    ("ellipse", 200.0, 0.0, 0.0, 0.69, 0.92, 0.0),
    ("ellipse", 40.0, 0.0, 0.0184, 0.6624, 0.874, 0.0),
    ("ellipse", 0.0, 0.22, 0.0, 0.11, 0.31, -18.0),
    ("ellipse", 0.0, -0.22, 0.0, 0.16, 0.41, 18.0),
    ("ellipse", 110.0, 0.0, -0.35, 0.21, 0.25, 0.0),
    ("ellipse", 80.0, 0.0, -0.1, 0.046, 0.046, 0.0),
    ("ellipse", 80.0, 0.0, 0.1, 0.046, 0.046, 0.0),
    ("ellipse", 150.0, -0.08, 0.605, 0.046, 0.023, 0.0),
    ("ellipse", 150.0, 0.0, 0.606, 0.023, 0.023, 0.0),
    ("ellipse", 150.0, 0.06, 0.605, 0.023, 0.046, 0.0),
)


def _shape_mask(u, v, kind, cx, cy, a, b, angle):
    t = np.deg2rad(angle)
    du, dv = u - cx, v - cy
    ru = du * np.cos(t) + dv * np.sin(t)
    rv = -du * np.sin(t) + dv * np.cos(t)
    if kind == "ellipse":
        return (ru / a) ** 2 + (rv / b) ** 2 <= 1.0
    return (np.abs(ru) <= a) & (np.abs(rv) <= b)


def make_phantom(n: int, kind: str = "ge-like") -> np.ndarray:
    """Piecewise-constant phantom with a black background.

    Membership is decided at pixel centres, so every pixel takes exactly one
    of the listed gray levels. ``ge-like`` is nested ellipses and rectangles,
    a row of shrinking disks, three bar groups of decreasing width and a small
    hole array, in the manner of a resolution phantom; ``shepp-like`` follows
    the modified Shepp-Logan layout.
    """
    if n < 32:
        raise ConfigError(f"phantom side must be at least 32, got {n}")
    if kind == "ge-like":
        shapes = _GE_SHAPES
    elif kind == "shepp-like":
        shapes = _SHEPP_SHAPES
    else:
        raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((n, n))
    for kind_, value, cx, cy, a, b, angle in shapes:
        img[_shape_mask(u, v, kind_, cx, cy, a, b, angle)] = value
    return img


def add_noise(img: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma`` (pixel units).

    Complex images receive circular noise, ``sigma / sqrt(2)`` per component.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    if np.iscomplexobj(img):
        noise = rng.standard_normal(img.shape + (2,)) * (sigma / np.sqrt(2.0))
        return img + noise[..., 0] + 1j * noise[..., 1]
    return img + sigma * rng.standard_normal(img.shape)
