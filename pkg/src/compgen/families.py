"""Component families: maps from one slot's latent vector to a canvas.

Canvases are plain 1-D float arrays of length ``M``; image-shaped canvases
use channel-major order (flat index ``c*H*W + row*W + col``) described by a
:class:`CanvasLayout`. Two families are provided:

* :class:`SpriteRenderer` -- draws one soft-edged superellipse sprite. The
  slot latent consists of named axes drawn from ``(x, y, shape, size, hue)``,
  all nominally in [0, 1]; omitted axes are fixed at configurable defaults.
  Rendering is smooth in every latent axis:

  - superellipse exponent  ``p = 0.5 + 3.5 * shape``
  - half-extent            ``r = 0.05 + 0.25 * size``  (fraction of width)
  - pixel intensity        ``sigmoid(edge_sharpness * (1 - dist))`` where
    ``dist`` is the p-norm distance from the sprite center, normalized so
    the sprite boundary sits at 1
  - hue to RGB             three raised cosines, phase-shifted by thirds

  Intensity values lie in (0, 1) and are scaled by ``amplitude``; with four
  channels the last channel is an opacity equal to the raw intensity, so it
  stays in (0, 1) regardless of amplitude. Background pixels are (near)
  zero: sprites sit on a black canvas.

* :class:`SmoothAnalytic` -- a linear map from a fixed feature basis
  (sines/cosines per axis plus optional per-axis Gaussian bumps) to the
  canvas. Its Jacobian is available in closed form, which makes it the
  reference family for derivative checks.

Families accept latents in a validity interval slightly wider than [0, 1]
(default [-0.1, 1.1]) so central differences remain two-sided at the edges
of the unit box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "CanvasLayout",
    "SpriteRenderer",
    "FeatureBasis",
    "SmoothAnalytic",
    "render_component",
    "render_batch",
    "random_smooth_family",
    "SPRITE_AXES",
]

SPRITE_AXES = ("x", "y", "shape", "size", "hue")

_EDGE_SMOOTHING_SQ = 1e-12  # keeps the p-norm smooth at the axes for p < 1


@dataclass(frozen=True)
class CanvasLayout:
    """Shape metadata for a flat canvas of ``size`` values."""

    size: int
    height: int | None = None
    width: int | None = None
    channels: int | None = None

    def __post_init__(self):
        if self.is_image and self.height * self.width * self.channels != self.size:
            raise ValueError("layout size does not match height*width*channels")

    @staticmethod
    def image(height: int, width: int, channels: int) -> "CanvasLayout":
        return CanvasLayout(height * width * channels, height, width, channels)

    @staticmethod
    def flat(size: int) -> "CanvasLayout":
        return CanvasLayout(size)

    @property
    def is_image(self) -> bool:
        return self.height is not None

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def as_image(self, values: np.ndarray) -> np.ndarray:
        """View flat values of shape (..., size) as (..., channels, H, W)."""
        if not self.is_image:
            raise ValueError("layout is not image-shaped")
        return np.asarray(values).reshape(
            values.shape[:-1] + (self.channels, self.height, self.width)
        )


def hue_to_rgb(hue) -> np.ndarray:
    """Smooth cyclic hue map: three raised cosines shifted by thirds."""
    hue = np.asarray(hue, dtype=float)[..., None]
    shifts = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    return 0.5 * (1.0 + np.cos(2.0 * np.pi * (hue - shifts)))


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_bounds(z: np.ndarray, lo: float, hi: float, dim: int):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[-1] != dim:
        raise ValueError(f"latent has dim {z.shape[-1]}, family expects {dim}")
    bad = (z < lo) | (z > hi)
    if bad.any():
        d = int(np.argwhere(bad)[0, -1])
        raise ValueError(
            f"latent axis {d} out of family bounds [{lo}, {hi}]"
        )
    return z


@dataclass(frozen=True)
class SpriteRenderer:
    """Soft superellipse sprite on a black canvas; smooth in all latents."""

    height: int
    width: int
    channels: int = 3
    edge_sharpness: float = 40.0
    amplitude: float = 1.0
    axes: tuple = SPRITE_AXES
    defaults: dict = field(
        default_factory=lambda: {
            "x": 0.5,
            "y": 0.5,
            "shape": 3.0 / 7.0,  # exponent 2: a circle
            "size": 0.5,
            "hue": 0.0,
        }
    )
    bounds: tuple = (-0.1, 1.1)

    def __post_init__(self):
        if self.channels not in (1, 3, 4):
            raise ValueError("channels must be 1, 3 or 4")
        if not self.edge_sharpness > 0:
            raise ValueError("edge_sharpness must be > 0")
        unknown = set(self.axes) - set(SPRITE_AXES)
        if unknown:
            raise ValueError(f"unknown sprite axes: {sorted(unknown)}")
        object.__setattr__(self, "axes", tuple(self.axes))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def layout(self) -> CanvasLayout:
        return CanvasLayout.image(self.height, self.width, self.channels)

    def _axis_values(self, z: np.ndarray) -> dict:
        vals = {name: np.full(z.shape[0], self.defaults[name]) for name in SPRITE_AXES}
        for i, name in enumerate(self.axes):
            vals[name] = z[:, i]
        return vals

    def render_batch(self, z: np.ndarray) -> np.ndarray:
        z = _check_bounds(z, self.bounds[0], self.bounds[1], self.dim)
        a = self._axis_values(z)
        n = z.shape[0]
        exponent = 0.5 + 3.5 * a["shape"]
        radius = 0.05 + 0.25 * a["size"]
        cols = (np.arange(self.width) + 0.5) / self.width
        rows = (np.arange(self.height) + 0.5) / self.height
        du = (cols[None, None, :] - a["x"][:, None, None]) / radius[:, None, None]
        dv = (rows[None, :, None] - a["y"][:, None, None]) / radius[:, None, None]
        p = exponent[:, None, None]
        dist = (
            (du * du + _EDGE_SMOOTHING_SQ) ** (p / 2.0)
            + (dv * dv + _EDGE_SMOOTHING_SQ) ** (p / 2.0)
        ) ** (1.0 / p)
        intensity = _sigmoid(self.edge_sharpness * (1.0 - dist))  # (n, H, W)
        if self.channels == 1:
            channels = self.amplitude * intensity[:, None]
        else:
            rgb = hue_to_rgb(a["hue"])  # (n, 3)
            colored = self.amplitude * intensity[:, None] * rgb[:, :, None, None]
            if self.channels == 3:
                channels = colored
            else:
                channels = np.concatenate([colored, intensity[:, None]], axis=1)
        return channels.reshape(n, self.layout.size)


@dataclass(frozen=True)
class FeatureBasis:
    """Fixed feature set per axis: sin/cos harmonics plus Gaussian bumps."""

    dim: int
    n_freq: int = 1
    rbf_centers: tuple = ()
    rbf_width: float = 0.2

    @property
    def size(self) -> int:
        return 1 + self.dim * (2 * self.n_freq + len(self.rbf_centers))

    def features(self, z: np.ndarray) -> np.ndarray:
        """Feature values, shape (..., size)."""
        z = np.asarray(z, dtype=float)
        parts = [np.ones(z.shape[:-1] + (1,))]
        for n in range(1, self.n_freq + 1):
            parts.append(np.cos(n * np.pi * z))
            parts.append(np.sin(n * np.pi * z))
        for c in self.rbf_centers:
            parts.append(np.exp(-((z - c) ** 2) / (2.0 * self.rbf_width**2)))
        return np.concatenate(parts, axis=-1)

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """d features / d z, shape (size, dim), for a single latent."""
        z = np.asarray(z, dtype=float)
        eye = np.eye(self.dim)
        rows = [np.zeros((1, self.dim))]
        for n in range(1, self.n_freq + 1):
            rows.append(-n * np.pi * np.sin(n * np.pi * z)[:, None] * eye)
            rows.append(n * np.pi * np.cos(n * np.pi * z)[:, None] * eye)
        for c in self.rbf_centers:
            bump = np.exp(-((z - c) ** 2) / (2.0 * self.rbf_width**2))
            rows.append((-(z - c) / self.rbf_width**2 * bump)[:, None] * eye)
        return np.concatenate(rows, axis=0)


@dataclass(frozen=True)
class SmoothAnalytic:
    """Linear-in-features family with a closed-form Jacobian."""

    coeffs: np.ndarray  # (M, n_features)
    basis: FeatureBasis
    image_shape: tuple | None = None  # (H, W, C) if the canvas is an image
    bounds: tuple = (-0.1, 1.1)

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.ndim != 2 or coeffs.shape[1] != self.basis.size:
            raise ValueError(
                f"coefficient table {coeffs.shape} does not match basis size "
                f"{self.basis.size}"
            )

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def layout(self) -> CanvasLayout:
        if self.image_shape is not None:
            h, w, c = self.image_shape
            return CanvasLayout.image(h, w, c)
        return CanvasLayout.flat(self.coeffs.shape[0])

    def render_batch(self, z: np.ndarray) -> np.ndarray:
        z = _check_bounds(z, self.bounds[0], self.bounds[1], self.dim)
        return self.basis.features(z) @ self.coeffs.T

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """Analytic (M, D) canvas Jacobian at one latent."""
        z = np.asarray(z, dtype=float)
        return self.coeffs @ self.basis.jacobian(z)


def render_component(family, z: np.ndarray) -> np.ndarray:
    """Render one slot latent to a flat canvas of length ``family.layout.size``."""
    z = np.asarray(z, dtype=float)
    return family.render_batch(z[None, :])[0]


def render_batch(family, z: np.ndarray) -> np.ndarray:
    """Render a batch of slot latents, shape (B, D) -> (B, M)."""
    return family.render_batch(np.asarray(z, dtype=float))


def random_smooth_family(
    m: int,
    dim: int,
    n_freq: int = 1,
    seed: int = 0,
    scale: float = 0.3,
    rbf_centers: Sequence[float] = (),
    rbf_width: float = 0.2,
) -> SmoothAnalytic:
    """A reproducible random SmoothAnalytic family for tests and demos."""
    basis = FeatureBasis(dim, n_freq, tuple(rbf_centers), rbf_width)
    rng = np.random.Generator(np.random.Philox(seed))
    coeffs = scale * rng.standard_normal((m, basis.size))
    return SmoothAnalytic(coeffs=coeffs, basis=basis)
