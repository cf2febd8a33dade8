"""Feedforward regression nets with hand-written reverse-mode gradients.

Two model kinds fit observation targets from latents:

* :class:`CompositionalNet` -- one MLP per slot maps that slot's latent to a
  canvas; a fixed, parameter-free composition rule merges the canvases. The
  composition participates in the backward pass through its
  vector-Jacobian product.
* :class:`MonolithicNet`   -- a single MLP maps the concatenated latents
  straight to the observation.

Gradients are exact reverse-mode derivatives of the mean over the batch of
``0.5 * ||prediction - target||^2``. Training uses mini-batch adaptive
moments (decay 0.9/0.999, epsilon 1e-8) with seeded shuffling, so runs are
bit-reproducible for a fixed config and dataset.

Parameters serialize to a flat little-endian binary format with magic
``CGL1``: header words, layer widths, then raw float64 weights and biases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .compose import CompositionKind, Dataset, compose, compose_vjp
from .families import CanvasLayout

__all__ = [
    "NetSpec",
    "CompositionalNet",
    "MonolithicNet",
    "TrainConfig",
    "TrainingDiverged",
    "Metrics",
    "init_params",
    "param_count",
    "match_param_count",
    "train",
    "evaluate_metrics",
    "save_net",
    "load_net",
]

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class NetSpec:
    """Layer widths (input, hidden..., output) and the hidden activation."""

    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError("widths must list at least input and output, all >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")


def param_count(spec: NetSpec) -> int:
    return sum(
        w_in * w_out + w_out for w_in, w_out in zip(spec.widths, spec.widths[1:])
    )


def init_params(spec: NetSpec, seed: int) -> list:
    """Symmetric-uniform weights with bound sqrt(6 / fan_in); zero biases."""
    rng = np.random.Generator(np.random.Philox(seed))
    params = []
    for w_in, w_out in zip(spec.widths, spec.widths[1:]):
        bound = np.sqrt(6.0 / w_in)
        params.append(
            (rng.uniform(-bound, bound, size=(w_in, w_out)), np.zeros(w_out))
        )
    return params


def _act(name, x):
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def _dact(name, x):
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    return (x > 0.0).astype(float)


def _mlp_forward(spec, params, x):
    """Forward pass; returns output and the pre-activation cache."""
    pre = []
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        pre.append((h, z))
        h = z if i == last else _act(spec.activation, z)
    return h, pre


def _mlp_backward(spec, params, cache, g_out):
    """Gradients of all parameters and of the input, given d loss / d output."""
    grads = [None] * len(params)
    g = g_out
    last = len(params) - 1
    for i in range(last, -1, -1):
        h_in, z = cache[i]
        if i != last:
            g = g * _dact(spec.activation, z)
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ params[i][0].T
    return grads, g


class MonolithicNet:
    """Single MLP from concatenated slot latents to the observation."""

    def __init__(self, spec: NetSpec, num_slots: int, dim: int, seed: int = 0,
                 params=None):
        if spec.widths[0] != num_slots * dim:
            raise ValueError(
                f"input width {spec.widths[0]} != num_slots*dim = {num_slots * dim}"
            )
        self.spec = spec
        self.num_slots = num_slots
        self.dim = dim
        self.params = params if params is not None else init_params(spec, seed)

    def param_arrays(self) -> list:
        return [a for pair in self.params for a in pair]

    def _flatten(self, z):
        z = np.asarray(z, dtype=float)
        return z.reshape(z.shape[0], self.num_slots * self.dim)

    def predict(self, z: np.ndarray) -> np.ndarray:
        out, _ = _mlp_forward(self.spec, self.params, self._flatten(z))
        return out

    def loss_and_gradients(self, z, targets):
        x = self._flatten(z)
        out, cache = _mlp_forward(self.spec, self.params, x)
        resid = out - targets
        batch = x.shape[0]
        loss = 0.5 * float(np.sum(resid**2)) / batch
        grads, _ = _mlp_backward(self.spec, self.params, cache, resid / batch)
        return loss, [a for pair in grads for a in pair]


class CompositionalNet:
    """Per-slot MLPs merged by a fixed differentiable composition rule."""

    def __init__(self, slot_specs, composition: CompositionKind,
                 canvas_layout: CanvasLayout, dim: int, seed: int = 0,
                 slot_params=None):
        if composition is CompositionKind.STEP_OCCLUSION:
            raise ValueError("step occlusion has no derivative rule; not trainable")
        self.slot_specs = tuple(slot_specs)
        for spec in self.slot_specs:
            if spec.widths[0] != dim:
                raise ValueError(f"slot net input width must equal dim {dim}")
            if spec.widths[-1] != canvas_layout.size:
                raise ValueError("slot net output width must equal the canvas size")
        self.composition = composition
        self.canvas_layout = canvas_layout
        self.dim = dim
        self.num_slots = len(self.slot_specs)
        if slot_params is not None:
            self.slot_params = slot_params
        else:
            self.slot_params = [
                init_params(spec, seed + k) for k, spec in enumerate(self.slot_specs)
            ]

    def param_arrays(self) -> list:
        return [a for params in self.slot_params for pair in params for a in pair]

    def _canvases(self, z):
        z = np.asarray(z, dtype=float)
        outs, caches = [], []
        for k, spec in enumerate(self.slot_specs):
            out, cache = _mlp_forward(spec, self.slot_params[k], z[:, k, :])
            outs.append(out)
            caches.append(cache)
        return outs, caches

    def predict(self, z: np.ndarray) -> np.ndarray:
        outs, _ = self._canvases(z)
        return compose(self.composition, outs, self.canvas_layout)

    def slot_canvases(self, z: np.ndarray) -> list:
        """The per-slot canvases (used for initial points in audits)."""
        outs, _ = self._canvases(z)
        return outs

    def loss_and_gradients(self, z, targets):
        outs, caches = self._canvases(z)
        pred = compose(self.composition, outs, self.canvas_layout)
        resid = pred - targets
        batch = pred.shape[0]
        loss = 0.5 * float(np.sum(resid**2)) / batch
        cotangents = compose_vjp(
            self.composition, outs, resid / batch, self.canvas_layout
        )
        flat = []
        for k, spec in enumerate(self.slot_specs):
            grads, _ = _mlp_backward(spec, self.slot_params[k], caches[k], cotangents[k])
            flat.extend(a for pair in grads for a in pair)
        return loss, flat


def match_param_count(slot_specs, num_slots: int, input_width: int,
                      output_width: int | None = None,
                      tolerance: float = 0.05) -> tuple:
    """Monolithic NetSpec whose parameter total matches the compositional one.

    Keeps the depth and relative hidden widths of the first slot spec and
    scales the hidden widths by a common factor. Returns ``(spec, ratio)``
    where ratio is achieved/target; if no integer scaling lands within
    ``tolerance``, the closest feasible spec is returned.
    """
    slot_specs = tuple(slot_specs)
    target = sum(param_count(s) for s in slot_specs)
    base = slot_specs[0]
    hidden = np.array(base.widths[1:-1], dtype=float)
    out_w = base.widths[-1] if output_width is None else output_width
    if hidden.size == 0:
        spec = NetSpec((input_width, out_w), base.activation)
        return spec, param_count(spec) / target

    def spec_for(scale):
        widths = (input_width,) + tuple(
            max(1, int(round(w * scale))) for w in hidden
        ) + (out_w,)
        return NetSpec(widths, base.activation)

    lo, hi = 1e-3, 64.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if param_count(spec_for(mid)) < target:
            lo = mid
        else:
            hi = mid
    best = None
    for scale in (lo, hi, 0.5 * (lo + hi)):
        spec = spec_for(scale)
        ratio = param_count(spec) / target
        if best is None or abs(ratio - 1.0) < abs(best[1] - 1.0):
            best = (spec, ratio)
    return best


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class _Adam:
    def __init__(self, arrays, config: TrainConfig):
        self.cfg = config
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        c = self.cfg
        self.t += 1
        scale = np.sqrt(1.0 - c.beta2**self.t) / (1.0 - c.beta1**self.t)
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            a -= c.lr * scale * m / (np.sqrt(v) + c.eps)


def train(net, dataset: Dataset, config: TrainConfig):
    """Mini-batch training; returns the per-epoch mean-squared-error history."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    arrays = net.param_arrays()
    optimizer = _Adam(arrays, config)
    rng = np.random.Generator(np.random.Philox(config.seed))
    out_size = dataset.observations.shape[1]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        sq_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads = net.loss_and_gradients(
                dataset.latents[idx], dataset.observations[idx]
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            sq_sum += 2.0 * loss * len(idx)  # undo the 1/2 and the batch mean
            optimizer.step(arrays, grads)
        history.append(sq_sum / (n * out_size))
    return history


@dataclass(frozen=True)
class Metrics:
    """Mean squared error and variance-weighted R^2 over output coordinates."""

    mse: float
    r2_vw: float


def evaluate_metrics(predict, dataset: Dataset) -> Metrics:
    """Metrics for a net (or any callable batch predictor) on a dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    fn = predict.predict if hasattr(predict, "predict") else predict
    preds = fn(dataset.latents)
    targets = dataset.observations
    resid = targets - preds
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((targets - targets.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: targets have zero total variance")
    return Metrics(mse=ss_res / targets.size, r2_vw=1.0 - ss_res / ss_tot)


_MAGIC = b"CGL1"
_KIND_MONO, _KIND_COMP = 0, 1
_COMPOSITION_CODES = {
    None: 0,
    CompositionKind.SUM: 1,
    CompositionKind.SIGMOID_OCCLUSION: 2,
    CompositionKind.STEP_OCCLUSION: 3,
    CompositionKind.ALPHA_COMPOSITE: 4,
}
_CODE_TO_COMPOSITION = {v: k for k, v in _COMPOSITION_CODES.items()}


def _write_u32(fh, *values):
    fh.write(struct.pack("<" + "I" * len(values), *values))


def _read_u32(fh, count):
    vals = struct.unpack("<" + "I" * count, fh.read(4 * count))
    return vals[0] if count == 1 else vals


def save_net(path, net) -> None:
    """Write a net to the flat CGL1 binary format (little-endian float64)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        if isinstance(net, MonolithicNet):
            _write_u32(fh, _KIND_MONO, _ACTIVATIONS.index(net.spec.activation), 0,
                       net.num_slots, net.dim, 0, 0, 0, 0)
            _write_u32(fh, len(net.spec.widths), *net.spec.widths)
            params_groups = [net.params]
        elif isinstance(net, CompositionalNet):
            lay = net.canvas_layout
            _write_u32(
                fh, _KIND_COMP, _ACTIVATIONS.index(net.slot_specs[0].activation),
                _COMPOSITION_CODES[net.composition], net.num_slots, net.dim,
                lay.height or 0, lay.width or 0, lay.channels or 0, lay.size,
            )
            for spec in net.slot_specs:
                _write_u32(fh, len(spec.widths), *spec.widths)
            params_groups = net.slot_params
        else:
            raise TypeError(f"cannot serialize {type(net).__name__}")
        for params in params_groups:
            for w, b in params:
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_net(path):
    """Read a net written by :func:`save_net`."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a CGL1 parameter file")
        (kind, act_code, comp_code, num_slots, dim,
         height, width, channels, size) = _read_u32(fh, 9)
        activation = _ACTIVATIONS[act_code]

        def read_spec():
            n = _read_u32(fh, 1)
            widths = _read_u32(fh, n)
            return NetSpec(widths if isinstance(widths, tuple) else (widths,),
                           activation)

        def read_params(spec):
            params = []
            for w_in, w_out in zip(spec.widths, spec.widths[1:]):
                w = np.frombuffer(fh.read(8 * w_in * w_out), dtype="<f8").reshape(
                    w_in, w_out
                ).copy()
                b = np.frombuffer(fh.read(8 * w_out), dtype="<f8").copy()
                params.append((w, b))
            return params

        if kind == _KIND_MONO:
            spec = read_spec()
            return MonolithicNet(spec, num_slots, dim, params=read_params(spec))
        if kind == _KIND_COMP:
            specs = [read_spec() for _ in range(num_slots)]
            if height:
                layout = CanvasLayout.image(height, width, channels)
            else:
                layout = CanvasLayout.flat(size)
            params = [read_params(spec) for spec in specs]
            return CompositionalNet(
                specs, _CODE_TO_COMPOSITION[comp_code], layout, dim,
                slot_params=params,
            )
        raise ValueError(f"unknown net kind code {kind}")
