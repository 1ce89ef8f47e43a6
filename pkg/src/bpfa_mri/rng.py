"""Counter-based random streams keyed by (seed, sweep, purpose).

Every random draw in a Gibbs sweep comes from a Philox generator whose key is
derived from the run seed, the sweep index and a purpose tag. Per-patch draws
are laid out patch-major, so patch ``i`` always consumes the counter block
``[i * K, (i + 1) * K)`` of its stream no matter how the work is split.
"""

import numpy as np

_TAGS = {
    "init": 0,
    "dictionary": 1,
    "codes_u": 2,
    "codes_s": 3,
    "noise_precision": 4,
    "weight_precision": 5,
    "pi": 6,
}


def stream(seed: int, sweep: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(sweep), _TAGS[purpose]])
    return np.random.Generator(np.random.Philox(ss))


def standard_normal(gen: np.random.Generator, shape, complex_mode: bool) -> np.ndarray:
    """Unit-variance real normals, or circular complex normals with E|z|^2 = 1."""
    if not complex_mode:
        return gen.standard_normal(shape)
    pair = gen.standard_normal(tuple(shape) + (2,)) * np.sqrt(0.5)
    return pair[..., 0] + 1j * pair[..., 1]
