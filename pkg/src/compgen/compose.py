"""Composition rules that merge per-slot canvases into one observation.

All rules operate on flat canvases of shape ``(..., M)`` (leading batch axes
allowed) and are pure. Folding for more than two slots is foreground-first:
slot 0 is composed with the fold of the remaining slots.

* ``SUM``                pixel-wise sum; observation dim equals canvas dim.
* ``SIGMOID_OCCLUSION``  soft occlusion: the foreground canvas gates itself
  against the background via a logistic weight, pair rule
  ``sig(a) * a + sig(-a) * b``.
* ``STEP_OCCLUSION``     the hard variant with the unit step (value 1/2 at
  zero) in place of the logistic. Used as a data oracle only; it has no
  derivative rule.
* ``ALPHA_COMPOSITE``    straight-alpha layering of RGBA canvases onto an
  opaque black background, producing RGB. Internally the fold tracks the
  premultiplied color, which makes the whole map polynomial; the 0/0 case
  of the unpremultiplied pair rule (fully transparent stack) is thereby
  resolved to 0.

Besides the forward rule, each differentiable kind exposes its analytic
slot Jacobian (the N x M derivative of the observation with respect to one
slot's canvas) and a vector-Jacobian product used by the trainer.

A :class:`CompositionalModel` ties K component families to one composition
rule over a shared latent box; ``evaluate`` renders and composes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .families import CanvasLayout, render_batch
from .supports import LatentBox, SampleSet

__all__ = [
    "CompositionKind",
    "compose",
    "compose_vjp",
    "compose_jacobian",
    "CompositionalModel",
    "evaluate",
    "evaluate_batch",
    "Dataset",
    "make_dataset",
]


class CompositionKind(enum.Enum):
    SUM = "sum"
    SIGMOID_OCCLUSION = "sigmoid"
    STEP_OCCLUSION = "step"
    ALPHA_COMPOSITE = "alpha"

    @staticmethod
    def from_name(name: str) -> "CompositionKind":
        try:
            return CompositionKind(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in CompositionKind)
            raise ValueError(f"unknown composition {name!r} (expected one of {valid})")


def _sigmoid(t):
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _dsigmoid(t):
    s = _sigmoid(t)
    return s * (1.0 - s)


def _step(t):
    return 0.5 * (np.sign(t) + 1.0)


def _check_canvases(canvases) -> list:
    if len(canvases) < 1:
        raise ValueError("need at least one canvas")
    arrays = [np.asarray(c, dtype=float) for c in canvases]
    shape = arrays[0].shape
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != shape:
            raise ValueError(f"canvas {i} has shape {a.shape}, expected {shape}")
    return arrays


def _split_rgba(canvas: np.ndarray, layout: CanvasLayout):
    """Split a flat RGBA canvas into rgb (..., 3, HW) and alpha (..., HW)."""
    img = canvas.reshape(canvas.shape[:-1] + (4, layout.pixels))
    return img[..., :3, :], img[..., 3, :]


def _require_rgba_layout(layout):
    if layout is None or not layout.is_image or layout.channels != 4:
        raise ValueError("alpha compositing requires an image layout with 4 channels")


def _alpha_fold(canvases, layout):
    """Fold RGBA canvases bottom-up in (opacity, premultiplied color) form.

    Returns the per-level opacities ``A[j]`` and premultiplied colors
    ``P[j]`` of the partial stacks below and including slot j; ``P[0]`` is
    the observation over the opaque black background.
    """
    num = len(canvases)
    rgbs, alphas = zip(*(_split_rgba(c, layout) for c in canvases))
    A = [None] * num
    P = [None] * num
    A[-1] = alphas[-1]
    P[-1] = alphas[-1][..., None, :] * rgbs[-1]
    for j in range(num - 2, -1, -1):
        A[j] = alphas[j] + (1.0 - alphas[j]) * A[j + 1]
        P[j] = (
            (A[j] * alphas[j])[..., None, :] * rgbs[j]
            + (1.0 - alphas[j])[..., None, :] * P[j + 1]
        )
    return rgbs, alphas, A, P


def compose(kind: CompositionKind, canvases, layout: CanvasLayout | None = None) -> np.ndarray:
    """Merge K canvases of shape (..., M) into an observation of shape (..., N)."""
    arrays = _check_canvases(canvases)
    if kind is CompositionKind.SUM:
        return np.sum(arrays, axis=0)
    if kind in (CompositionKind.SIGMOID_OCCLUSION, CompositionKind.STEP_OCCLUSION):
        gate = _sigmoid if kind is CompositionKind.SIGMOID_OCCLUSION else _step
        acc = arrays[-1]
        for fg in arrays[-2::-1]:
            acc = gate(fg) * fg + gate(-fg) * acc
        return acc
    if kind is CompositionKind.ALPHA_COMPOSITE:
        _require_rgba_layout(layout)
        _, _, _, P = _alpha_fold(arrays, layout)
        return P[0].reshape(arrays[0].shape[:-1] + (3 * layout.pixels,))
    raise ValueError(f"unhandled composition kind {kind}")


def compose_vjp(kind, canvases, upstream, layout=None) -> list:
    """Cotangents of ``compose`` w.r.t. each canvas, for upstream of shape (..., N)."""
    arrays = _check_canvases(canvases)
    upstream = np.asarray(upstream, dtype=float)
    if kind is CompositionKind.SUM:
        return [upstream.copy() for _ in arrays]
    if kind is CompositionKind.SIGMOID_OCCLUSION:
        accs = [arrays[-1]]
        for fg in arrays[-2::-1]:
            accs.append(_sigmoid(fg) * fg + _sigmoid(-fg) * accs[-1])
        accs.reverse()  # accs[j] = fold of slots j..K-1
        grads = []
        g = upstream
        for j, fg in enumerate(arrays[:-1]):
            below = accs[j + 1]
            grads.append(g * (_sigmoid(fg) + _dsigmoid(fg) * (fg - below)))
            g = g * _sigmoid(-fg)
        grads.append(g)
        return grads
    if kind is CompositionKind.ALPHA_COMPOSITE:
        _require_rgba_layout(layout)
        rgbs, alphas, A, P = _alpha_fold(arrays, layout)
        num = len(arrays)
        g_p = upstream.reshape(upstream.shape[:-1] + (3, layout.pixels))
        g_a = np.zeros_like(A[0])
        grads = []
        for j in range(num - 1):
            below_a, below_p = A[j + 1], P[j + 1]
            g_rgb_j = g_p * (A[j] * alphas[j])[..., None, :]
            g_alpha_j = (
                np.sum(g_p * rgbs[j], axis=-2) * ((1.0 - below_a) * alphas[j] + A[j])
                - np.sum(g_p * below_p, axis=-2)
                + g_a * (1.0 - below_a)
            )
            g_below_a = (
                np.sum(g_p * rgbs[j], axis=-2) * alphas[j] + g_a
            ) * (1.0 - alphas[j])
            g_below_p = g_p * (1.0 - alphas[j])[..., None, :]
            grads.append(_merge_rgba(g_rgb_j, g_alpha_j, arrays[j].shape))
            g_p, g_a = g_below_p, g_below_a
        g_rgb_last = g_p * alphas[-1][..., None, :]
        g_alpha_last = np.sum(g_p * rgbs[-1], axis=-2) + g_a
        grads.append(_merge_rgba(g_rgb_last, g_alpha_last, arrays[-1].shape))
        return grads
    raise ValueError(f"no derivative rule for composition kind {kind}")


def _merge_rgba(g_rgb, g_alpha, flat_shape):
    return np.concatenate([g_rgb, g_alpha[..., None, :]], axis=-2).reshape(flat_shape)


def compose_jacobian(kind, canvases, k: int, layout=None) -> np.ndarray:
    """Analytic N x M Jacobian of the observation w.r.t. slot k's canvas."""
    arrays = _check_canvases(canvases)
    if arrays[0].ndim != 1:
        raise ValueError("compose_jacobian expects single canvases, not batches")
    num = len(arrays)
    if not 0 <= k < num:
        raise ValueError(f"slot index {k} out of range for {num} canvases")
    m = arrays[0].shape[0]
    if kind is CompositionKind.SUM:
        return np.eye(m)
    if kind is CompositionKind.SIGMOID_OCCLUSION:
        accs = [arrays[-1]]
        for fg in arrays[-2::-1]:
            accs.append(_sigmoid(fg) * fg + _sigmoid(-fg) * accs[-1])
        accs.reverse()
        weight = np.ones(m)
        for fg in arrays[:k]:
            weight = weight * _sigmoid(-fg)
        if k < num - 1:
            fg = arrays[k]
            weight = weight * (_sigmoid(fg) + _dsigmoid(fg) * (fg - accs[k + 1]))
        return np.diag(weight)
    if kind is CompositionKind.ALPHA_COMPOSITE:
        _require_rgba_layout(layout)
        blocks = _alpha_jacobian_blocks(arrays, k, layout)  # (HW, 3, 4)
        n_pix = layout.pixels
        jac = np.zeros((3 * n_pix, 4 * n_pix))
        pix = np.arange(n_pix)
        for out_c in range(3):
            for in_c in range(4):
                jac[out_c * n_pix + pix, in_c * n_pix + pix] = blocks[:, out_c, in_c]
        return jac
    raise ValueError(f"no analytic Jacobian for composition kind {kind}")


def _alpha_jacobian_blocks(arrays, k, layout):
    """Per-pixel (3, 4) derivative blocks of the alpha fold w.r.t. slot k."""
    rgbs, alphas, A, P = _alpha_fold(arrays, layout)
    num = len(arrays)
    n_pix = layout.pixels
    blocks = np.empty((n_pix, 3, 4))
    for in_c in range(4):
        d_rgb = np.zeros((3, n_pix))
        d_alpha = np.zeros(n_pix)
        if in_c < 3:
            d_rgb[in_c] = 1.0
        else:
            d_alpha[:] = 1.0
        # tangent through level k (the bottom level has its own rule)
        if k == num - 1:
            dA = d_alpha
            dP = d_alpha * rgbs[k] + alphas[k] * d_rgb
        else:
            dA = d_alpha * (1.0 - A[k + 1])
            dP = (
                dA * alphas[k] * rgbs[k]
                + A[k] * (d_alpha * rgbs[k] + alphas[k] * d_rgb)
                - d_alpha * P[k + 1]
            )
        # propagate through the levels stacked above
        for j in range(k - 1, -1, -1):
            dA = (1.0 - alphas[j]) * dA
            dP = dA * alphas[j] * rgbs[j] + (1.0 - alphas[j]) * dP
        blocks[:, :, in_c] = dP.T
    return blocks


@dataclass(frozen=True)
class CompositionalModel:
    """K component families plus one composition rule over a shared latent box."""

    families: tuple
    composition: CompositionKind
    latent_box: LatentBox

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        box = self.latent_box
        if len(self.families) != box.num_slots:
            raise ValueError(
                f"{len(self.families)} families for a {box.num_slots}-slot box"
            )
        layouts = [f.layout for f in self.families]
        for k, fam in enumerate(self.families):
            if fam.dim != box.dim:
                raise ValueError(f"family {k} has dim {fam.dim}, box dim {box.dim}")
            lo, hi = fam.bounds
            if box.lo[k].min() < lo or box.hi[k].max() > hi:
                raise ValueError(f"latent box exceeds family {k} bounds [{lo}, {hi}]")
        if self.composition is CompositionKind.ALPHA_COMPOSITE:
            for k, lay in enumerate(layouts):
                if not lay.is_image or lay.channels != 4:
                    raise ValueError(f"family {k} must render 4-channel images")
                if (lay.height, lay.width) != (layouts[0].height, layouts[0].width):
                    raise ValueError("alpha compositing needs equal image sizes")
        else:
            if any(lay != layouts[0] for lay in layouts):
                raise ValueError("composition requires identical canvas layouts")

    @property
    def canvas_layout(self) -> CanvasLayout:
        return self.families[0].layout

    @property
    def observation_layout(self) -> CanvasLayout:
        lay = self.canvas_layout
        if self.composition is CompositionKind.ALPHA_COMPOSITE:
            return CanvasLayout.image(lay.height, lay.width, 3)
        return lay

    @property
    def num_slots(self) -> int:
        return len(self.families)


def evaluate_batch(model: CompositionalModel, z: np.ndarray) -> np.ndarray:
    """Observations for latents of shape (B, K, D) -> (B, N)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 3 or z.shape[1] != model.num_slots:
        raise ValueError(f"expected latents of shape (B, {model.num_slots}, D)")
    if not model.latent_box.contains(z).all():
        bad = np.argwhere(~model.latent_box.contains(z))[0]
        raise ValueError(f"latent {bad[0]} outside the model box")
    canvases = [render_batch(fam, z[:, k, :]) for k, fam in enumerate(model.families)]
    return compose(model.composition, canvases, model.canvas_layout)


def evaluate(model: CompositionalModel, z: np.ndarray) -> np.ndarray:
    """Observation for a single latent point of shape (K, D)."""
    return evaluate_batch(model, np.asarray(z, dtype=float)[None])[0]


@dataclass(frozen=True)
class Dataset:
    """Latent/observation pairs, order-preserving."""

    latents: np.ndarray  # (n, K, D)
    observations: np.ndarray  # (n, N)

    def __len__(self):
        return self.latents.shape[0]

    def __getitem__(self, i):
        return self.latents[i], self.observations[i]


def make_dataset(model: CompositionalModel, samples: SampleSet) -> Dataset:
    """Evaluate the model on every sample point, preserving order."""
    if len(samples) == 0:
        return Dataset(samples.points, np.empty((0, model.observation_layout.size)))
    return Dataset(samples.points.copy(), evaluate_batch(model, samples.points))
