"""Counter-based random streams.

Every random draw in the package goes through :func:`stream`, which maps a
``(seed, *ids)`` address to an independent Philox4x64-10 generator. Philox is
counter based: the 128-bit key selects the stream and the counter walks
through it, so a stream can be re-created anywhere from its address alone.

Key layout (128 bits)::

    low 64 bits   = seed mod 2**64
    high 64 bits  = splitmix64 fold of the stream ids (0 when no ids)

The fold starts from ``STREAM_SALT`` and, for each id, xors it in and
applies the splitmix64 finalizer (constants below). Philox round constants
are the ones published with Random123 and used by ``numpy.random.Philox``.
"""

import numpy as np

MASK64 = (1 << 64) - 1
STREAM_SALT = 0x6A09E667F3BCC909
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    x = (x + SPLITMIX_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * SPLITMIX_MUL1) & MASK64
    x = ((x ^ (x >> 27)) * SPLITMIX_MUL2) & MASK64
    return x ^ (x >> 31)


def stream_key(seed: int, *ids: int) -> int:
    """128-bit Philox key for the stream at ``(seed, *ids)``."""
    hi = 0
    if ids:
        hi = STREAM_SALT
        for i in ids:
            hi = splitmix64(hi ^ (int(i) & MASK64))
    return (hi << 64) | (int(seed) & MASK64)


def stream(seed: int, *ids: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *ids)))


def unit_sphere(gen: np.random.Generator, dim: int) -> np.ndarray:
    """Uniform point on the unit sphere of R^dim."""
    v = gen.standard_normal(dim)
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        v[0] = 1.0
        return v
    return v / nrm
