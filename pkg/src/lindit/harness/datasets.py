"""Synthetic datasets with deterministic, seeded sample streams."""

from __future__ import annotations

import numpy as np

from lindit.errors import ConfigError

DATASETS = ("checkerboard2d", "eight_gaussians2d", "bright_square_16")


def checkerboard2d(rng: np.random.Generator, n: int, cells: int = 4, extent: float = 2.0) -> np.ndarray:
    """Uniform mass on the dark squares of a ``cells x cells`` board spanning [-extent, extent]^2."""
    if cells < 2:
        raise ConfigError("checkerboard needs at least 2 cells per side")
    side = 2 * extent / cells
    # pick a cell uniformly among the dark ones, then a point uniformly inside it
    dark = np.array([(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0])
    cell = dark[rng.integers(0, len(dark), n)]
    u = rng.random((n, 2))
    return (cell + u) * side - extent


def eight_gaussians2d(rng: np.random.Generator, n: int, radius: float = 2.0, std: float = 0.1) -> np.ndarray:
    angles = 2 * np.pi * np.arange(8) / 8
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers[rng.integers(0, 8, n)] + std * rng.standard_normal((n, 2))


def bright_square_16(rng: np.random.Generator, n: int, min_side: int = 3, max_side: int = 8,
                     size: int = 16, level: float = 1.0) -> np.ndarray:
    """``[n, 1, size, size]`` images in [0, 1]: one axis-aligned bright square on black."""
    if not 1 <= min_side <= max_side <= size:
        raise ConfigError(f"square sides must satisfy 1 <= {min_side} <= {max_side} <= {size}")
    if not 0 < level <= 1:
        raise ConfigError("square level must lie in (0, 1]")
    out = np.zeros((n, 1, size, size))
    sides = rng.integers(min_side, max_side + 1, n)
    for k, s in enumerate(sides):
        r, c = rng.integers(0, size - s + 1, 2)
        out[k, 0, r:r + s, c:c + s] = level
    return out


_GENERATORS = {"checkerboard2d": checkerboard2d, "eight_gaussians2d": eight_gaussians2d,
               "bright_square_16": bright_square_16}


class ToyDataset:
    """A named generator with its own seeded stream.

    ``sample`` returns raw data (points ``[n, 2]`` or images ``[n, 1, 16, 16]``);
    ``latents`` maps it into the model's ``[n, C, h, w]`` layout, centring
    images to [-1, 1].
    """

    def __init__(self, name: str, params: dict | None = None, seed: int = 0):
        if name not in _GENERATORS:
            raise ConfigError(f"unknown dataset {name!r}; choose from {DATASETS}")
        self.name, self.params, self.seed = name, dict(params or {}), seed
        self.rng = np.random.default_rng(seed)
        try:
            _GENERATORS[name](np.random.default_rng(0), 1, **self.params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {name}: {exc}") from exc

    @property
    def is_image(self) -> bool:
        return self.name == "bright_square_16"

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        if self.is_image:
            size = self.params.get("size", 16)
            return (1, size, size)
        return (2, 1, 1)

    def sample(self, n: int) -> np.ndarray:
        return _GENERATORS[self.name](self.rng, n, **self.params)

    def to_latent(self, raw: np.ndarray) -> np.ndarray:
        if self.is_image:
            return 2.0 * raw - 1.0
        return raw.reshape(len(raw), 2, 1, 1)

    def from_latent(self, lat: np.ndarray) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        if self.is_image:
            return np.clip((lat + 1.0) / 2.0, 0.0, 1.0)
        return lat.reshape(len(lat), 2)

    def latents(self, n: int) -> np.ndarray:
        return self.to_latent(self.sample(n))
