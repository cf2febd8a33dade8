"""INI-style experiment configuration: parsing, builders, and stable hashing.

A config file has flat ``key = value`` sections; arrays are comma lists,
and lists of vectors (anchors, gaps) separate entries with semicolons:

    [experiment]
    name = demo
    seed = 7

    [data]
    height = 16
    width = 16
    channels = 3
    slots = 2
    family = sprite            ; sprite | smooth
    axes = x,y,size            ; sprite latent axes (defines D)
    slot_hues = 0.0,0.55       ; fixed hue per slot when hue is not an axis
    amplitude = 6.0
    edge_sharpness = 10.0
    composition = sigmoid      ; sum | sigmoid | step | alpha
    train_samples = 5000
    test_samples = 1000

    [train_support]
    kind = orthogonal          ; full_box | orthogonal | gapped | gaussian | diagonal
    eps = 0.02
    anchors0 = 0.25,0.25,0.25; 0.75,0.75,0.75
    anchors1 = 0.5,0.5,0.5
    ; gapped adds:   gaps = 0,0,0.14,0.46; ...   (slot,dim,lo,hi per entry)
    ; gaussian adds: sigma = 0.25
    ; diagonal uses: width = 0.3

    [test_support]
    kind = full_box

    [model]
    kind = compositional       ; compositional | monolithic
    hidden = 96,96,96,96
    activation = tanh

    [training]
    epochs = 300
    batch_size = 128
    lr = 1e-3
    shuffle = true

Optional ``[checks]`` and ``[heatmap]`` sections tune the support checkers
and the error-heatmap rendering; see DEFAULTS below. The config hash is a
SHA-256 over sections and keys in sorted order, so files that differ only
in key order (or comments) hash identically.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compose import CompositionKind, CompositionalModel
from .families import SPRITE_AXES, CanvasLayout, SpriteRenderer, random_smooth_family
from .nets import CompositionalNet, MonolithicNet, NetSpec, TrainConfig, match_param_count
from .supports import (
    AxisGap,
    DiagonalBand,
    FullBox,
    GappedOrthogonal,
    GaussianOrthogonal,
    LatentBox,
    OrthogonalAnchors,
    SupportSpec,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "build_ground_truth",
    "build_support",
    "build_net",
    "support_to_items",
]

BOX_MARGIN = 0.05  # render-domain padding beyond the unit sampling box

DEFAULT_CHECKS = {
    "def2_resolution": 10,
    "def2_probes": 40000,
    "def3_probe_resolution": 2,
    "def3_slice_tol": 0.1,
    "def3_max_pprime": 16,
    "def3_tau": 1e-3,
    "def3_sample_cap": 4000,
}

DEFAULT_HEATMAP = {
    "slot_a": 0,
    "dim_a": 0,
    "slot_b": 1,
    "dim_b": 0,
    "resolution": 16,
    "samples_per_cell": 32,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    height: int
    width: int
    channels: int
    num_slots: int
    family: str  # "sprite" | "smooth"
    axes: tuple
    slot_hues: tuple
    amplitude: float
    edge_sharpness: float
    composition: CompositionKind
    train_samples: int
    test_samples: int
    train_support: dict  # raw kind/params items
    test_support: dict
    model_kind: str  # "compositional" | "monolithic"
    hidden: tuple
    activation: str
    training: TrainConfig
    checks: dict
    heatmap: dict
    out: str | None = None

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def canvas_layout(self) -> CanvasLayout:
        return CanvasLayout.image(self.height, self.width, self.channels)


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _vectors(text: str) -> list:
    return [
        [float(v) for v in chunk.split(",") if v.strip()]
        for chunk in text.split(";")
        if chunk.strip()
    ]


def _support_items(section) -> dict:
    return dict(section)


def parse_config(text: str, name_fallback: str = "experiment") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.read_string(text)
    exp = parser["experiment"] if parser.has_section("experiment") else {}
    data = parser["data"]
    model = parser["model"] if parser.has_section("model") else {}
    training = parser["training"] if parser.has_section("training") else {}
    checks = dict(DEFAULT_CHECKS)
    if parser.has_section("checks"):
        for key, raw in parser["checks"].items():
            if isinstance(DEFAULT_CHECKS.get(key), int):
                checks[key] = int(float(raw))
            else:
                checks[key] = float(raw)
    heatmap = dict(DEFAULT_HEATMAP)
    if parser.has_section("heatmap"):
        for key in parser["heatmap"]:
            heatmap[key] = int(float(parser["heatmap"][key]))
    axes = tuple(
        a.strip() for a in data.get("axes", "x,y,shape,size,hue").split(",") if a.strip()
    )
    slot_count = int(data.get("slots", "2"))
    hues = _floats(data.get("slot_hues", "")) or [0.0] * slot_count
    if len(hues) < slot_count:
        hues = hues + [hues[-1]] * (slot_count - len(hues))
    train_cfg = TrainConfig(
        epochs=int(training.get("epochs", "300")),
        batch_size=int(training.get("batch_size", "128")),
        lr=float(training.get("lr", "1e-3")),
        beta1=float(training.get("beta1", "0.9")),
        beta2=float(training.get("beta2", "0.999")),
        eps=float(training.get("eps", "1e-8")),
        seed=int(training.get("seed", exp.get("seed", "0"))),
        shuffle=training.get("shuffle", "true").strip().lower() in ("true", "1", "yes"),
    )
    return ExperimentConfig(
        name=exp.get("name", name_fallback),
        seed=int(exp.get("seed", "0")),
        height=int(data.get("height", "16")),
        width=int(data.get("width", "16")),
        channels=int(data.get("channels", "3")),
        num_slots=slot_count,
        family=data.get("family", "sprite").strip().lower(),
        axes=axes,
        slot_hues=tuple(hues[:slot_count]),
        amplitude=float(data.get("amplitude", "1.0")),
        edge_sharpness=float(data.get("edge_sharpness", "40.0")),
        composition=CompositionKind.from_name(data.get("composition", "sum")),
        train_samples=int(data.get("train_samples", "5000")),
        test_samples=int(data.get("test_samples", "1000")),
        train_support=_support_items(parser["train_support"]),
        test_support=_support_items(
            parser["test_support"] if parser.has_section("test_support") else {"kind": "full_box"}
        ),
        model_kind=model.get("kind", "compositional").strip().lower(),
        hidden=tuple(int(w) for w in model.get("hidden", "96,96,96,96").split(",")),
        activation=model.get("activation", "tanh").strip().lower(),
        training=train_cfg,
        checks=checks,
        heatmap=heatmap,
        out=exp.get("out", None),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), name_fallback=path.stem)


def config_hash(text_or_config) -> str:
    """SHA-256 over (section, key, value) triples in sorted order."""
    if isinstance(text_or_config, ExperimentConfig):
        cfg = text_or_config
        parts = []
        for fname in sorted(cfg.__dataclass_fields__):
            parts.append(f"{fname}={getattr(cfg, fname)!r}")
        canon = "\n".join(parts)
    else:
        parser = configparser.ConfigParser(interpolation=None,
                                           inline_comment_prefixes=(";", "#"))
        parser.read_string(text_or_config)
        lines = []
        for section in sorted(parser.sections()):
            for key in sorted(parser[section]):
                value = " ".join(parser[section][key].split())
                lines.append(f"{section}.{key}={value}")
        canon = "\n".join(lines)
    return hashlib.sha256(canon.encode()).hexdigest()


def build_support(cfg: ExperimentConfig, items: dict) -> SupportSpec:
    """Instantiate the support spec described by one config section."""
    box = LatentBox.unit(cfg.num_slots, cfg.dim)
    kind = items.get("kind", "full_box").strip().lower()
    if kind in ("full_box", "fullbox", "full", "random"):
        return FullBox(box)
    if kind in ("diagonal", "diagonal_band"):
        return DiagonalBand(box, width=float(items.get("width", "0.3")))
    anchors = []
    for k in range(cfg.num_slots):
        text = items.get(f"anchors{k}", "")
        anchors.append(_vectors(text) if text else [])
    eps = float(items.get("eps", "0.02"))
    if kind in ("orthogonal", "orthogonal_anchors"):
        return OrthogonalAnchors(box, anchors, eps=eps)
    if kind in ("gaussian", "gaussian_orthogonal"):
        return GaussianOrthogonal(box, anchors, eps=eps,
                                  sigma=float(items.get("sigma", "0.25")))
    if kind in ("gapped", "gapped_orthogonal"):
        gaps = tuple(
            AxisGap(slot=int(v[0]), dim=int(v[1]), lo=v[2], hi=v[3])
            for v in _vectors(items.get("gaps", ""))
        )
        return GappedOrthogonal(box, anchors, eps=eps, gaps=gaps)
    raise ValueError(f"unknown support kind {kind!r}")


def support_to_items(spec: SupportSpec) -> dict:
    """Config-section items for a support spec (inverse of build_support)."""
    if isinstance(spec, FullBox):
        return {"kind": "full_box"}
    if isinstance(spec, DiagonalBand):
        return {"kind": "diagonal", "width": repr(spec.width)}
    items = {}
    for k, arr in enumerate(spec.anchors):
        if len(arr):
            items[f"anchors{k}"] = "; ".join(
                ",".join(repr(float(v)) for v in a) for a in arr
            )
    items["eps"] = repr(spec.eps)
    if isinstance(spec, GaussianOrthogonal):
        items["kind"] = "gaussian"
        items["sigma"] = repr(spec.sigma)
    elif isinstance(spec, GappedOrthogonal):
        items["kind"] = "gapped"
        items["gaps"] = "; ".join(
            f"{g.slot},{g.dim},{g.lo!r},{g.hi!r}" for g in spec.gaps
        )
    else:
        items["kind"] = "orthogonal"
    return items


def build_ground_truth(cfg: ExperimentConfig) -> CompositionalModel:
    """The data-generating model for a config."""
    box = LatentBox.unit(cfg.num_slots, cfg.dim).padded(BOX_MARGIN)
    families = []
    for k in range(cfg.num_slots):
        if cfg.family == "sprite":
            defaults = {"x": 0.5, "y": 0.5, "shape": 3.0 / 7.0, "size": 0.5,
                        "hue": cfg.slot_hues[k]}
            families.append(
                SpriteRenderer(
                    height=cfg.height,
                    width=cfg.width,
                    channels=cfg.channels,
                    edge_sharpness=cfg.edge_sharpness,
                    amplitude=cfg.amplitude,
                    axes=cfg.axes,
                    defaults=defaults,
                    bounds=(-BOX_MARGIN - 0.05, 1.0 + BOX_MARGIN + 0.05),
                )
            )
        elif cfg.family == "smooth":
            fam = random_smooth_family(
                m=cfg.canvas_layout.size,
                dim=cfg.dim,
                n_freq=1,
                seed=cfg.seed * 101 + k,
                scale=cfg.amplitude * 0.3,
            )
            families.append(fam)
        else:
            raise ValueError(f"unknown family {cfg.family!r}")
    return CompositionalModel(tuple(families), cfg.composition, box)


def build_net(cfg: ExperimentConfig, seed: int):
    """The trainable net for a config; monolithic nets are parameter-matched."""
    layout = cfg.canvas_layout
    slot_spec = NetSpec((cfg.dim,) + cfg.hidden + (layout.size,), cfg.activation)
    if cfg.model_kind == "compositional":
        return (
            CompositionalNet(
                [slot_spec] * cfg.num_slots,
                cfg.composition,
                layout,
                dim=cfg.dim,
                seed=seed,
            ),
            1.0,
        )
    if cfg.model_kind == "monolithic":
        obs = layout.size
        if cfg.composition is CompositionKind.ALPHA_COMPOSITE:
            obs = cfg.height * cfg.width * 3
        mono_spec, ratio = match_param_count(
            [slot_spec] * cfg.num_slots,
            cfg.num_slots,
            input_width=cfg.num_slots * cfg.dim,
            output_width=obs,
        )
        return MonolithicNet(mono_spec, cfg.num_slots, cfg.dim, seed=seed), ratio
    raise ValueError(f"unknown model kind {cfg.model_kind!r}")
