"""Seeded 3-D gradient (Perlin) noise and fractal sums of it."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseParams:
    octaves: int = 4
    base_frequency: float = 0.25
    lacunarity: float = 2.0
    persistence: float = 0.5
    fill_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.octaves) != self.octaves or self.octaves < 1:
            raise ValueError("octaves must be a positive integer")
        if not self.base_frequency > 0:
            raise ValueError("base_frequency must be > 0")
        if not self.lacunarity > 1:
            raise ValueError("lacunarity must be > 1")
        if not 0 < self.persistence < 1:
            raise ValueError("persistence must lie in (0, 1)")

    @classmethod
    def for_dims(cls, dims, **overrides) -> "NoiseParams":
        """Defaults scaled so the base octave has ~4 features across the longest axis."""
        kw = {"base_frequency": 4.0 / max(dims.shape)}
        kw.update(overrides)
        return cls(**kw)

    def amplitudes(self) -> np.ndarray:
        return self.persistence ** np.arange(self.octaves, dtype=np.float64)

    def frequencies(self) -> np.ndarray:
        return self.base_frequency * self.lacunarity ** np.arange(self.octaves, dtype=np.float64)

    def with_seed(self, seed: int) -> "NoiseParams":
        return NoiseParams(**{**asdict(self), "seed": int(seed)})

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=64)
def _tables(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(int(seed) & _MASK64)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm]).astype(np.int64)
    g = rng.normal(size=(256, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    perm.flags.writeable = False
    g.flags.writeable = False
    return perm, g


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin3(points, seed: int = 0):
    """Gradient noise at ``points`` (shape ``(..., 3)``); scalar in, scalar out.

    Gradients are unit vectors, so the output is bounded by sqrt(3)/2 in magnitude
    and is exactly zero on integer lattice points.
    """
    pts = np.asarray(points, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    perm, grads = _tables(seed)

    cell = np.floor(pts)
    frac = pts - cell
    ci = cell.astype(np.int64) & 255
    x, y, z = frac[..., 0], frac[..., 1], frac[..., 2]
    X, Y, Z = ci[..., 0], ci[..., 1], ci[..., 2]
    u, v, w = _fade(x), _fade(y), _fade(z)

    def corner(dx, dy, dz):
        h = perm[perm[perm[X + dx] + Y + dy] + Z + dz]
        g = grads[h]
        return g[..., 0] * (x - dx) + g[..., 1] * (y - dy) + g[..., 2] * (z - dz)

    x00 = corner(0, 0, 0) + u * (corner(1, 0, 0) - corner(0, 0, 0))
    x10 = corner(0, 1, 0) + u * (corner(1, 1, 0) - corner(0, 1, 0))
    x01 = corner(0, 0, 1) + u * (corner(1, 0, 1) - corner(0, 0, 1))
    x11 = corner(0, 1, 1) + u * (corner(1, 1, 1) - corner(0, 1, 1))
    y0 = x00 + v * (x10 - x00)
    y1 = x01 + v * (x11 - x01)
    out = y0 + w * (y1 - y0)
    return float(out[0]) if scalar else out


def fbm3(points, params: NoiseParams):
    """Sum of octaves: amplitude ``persistence**n`` at frequency ``base*lacunarity**n``.

    Octave ``n`` uses the salted seed ``seed ^ n``.
    """
    pts = np.asarray(points, dtype=np.float64)
    total = np.zeros(pts.shape[:-1]) if pts.ndim > 1 else 0.0
    for n, (amp, freq) in enumerate(zip(params.amplitudes(), params.frequencies())):
        total = total + amp * perlin3(pts * freq, (params.seed ^ n) & _MASK64)
    return total
