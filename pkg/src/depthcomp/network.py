"""Encoder-decoder depth-completion network.

Sparse depth (and an optional colour or gray image) pass through separate
initial 3x3 convolutions whose outputs are concatenated, then a ResNet
encoder with ``encoder_decoder_pairs`` stride-2 stages, then a mirrored
decoder of stride-2 transposed convolutions. Each decoder stage is
concatenated with the encoder output at the same resolution (when skip
connections are on), and a final 1x1 convolution gives one depth channel.
Every convolution except the last is followed by batch norm and ReLU.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from typing import Optional, Tuple

import numpy as np

from .autograd import LayerParams, ShapeError, Tensor, no_grad, ops
from .autograd.checkpoint import load_arrays, load_config_text, save_arrays

MODALITIES = ("d", "gray+d", "rgb+d")
FIRST_WIDTH = {"1x": 64, "2x": 32, "4x": 16}
RESNET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
DROPOUT_P = 0.5
WEIGHT_DECAY = 1e-4
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class NetworkConfig:
    modality: str = "rgb+d"
    resnet_depth: int = 34
    # None picks the tuned default: 2x for depth-only, 1x with an image branch
    filter_multiplier: Optional[str] = None
    encoder_decoder_pairs: int = 5
    skip_connections: bool = True
    # (image channels, depth channels); None splits the first width 1:3
    fusion_split: Optional[Tuple[int, int]] = None
    downsample_early: bool = False
    dropout_and_weight_decay: bool = False
    clip_tau_m: float = 0.9

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.resnet_depth not in RESNET_BLOCKS:
            raise ValueError(f"resnet_depth must be 18 or 34, got {self.resnet_depth}")
        mult = self.filter_multiplier or ("2x" if self.modality == "d" else "1x")
        if mult not in FIRST_WIDTH:
            raise ValueError(f"filter_multiplier must be one of {tuple(FIRST_WIDTH)}, got {mult!r}")
        object.__setattr__(self, "filter_multiplier", mult)
        if self.encoder_decoder_pairs not in (3, 4, 5):
            raise ValueError(f"encoder_decoder_pairs must be 3, 4 or 5, got {self.encoder_decoder_pairs}")
        if not self.clip_tau_m > 0:
            raise ValueError(f"clip_tau_m must be positive, got {self.clip_tau_m}")
        if self.has_image:
            split = self.fusion_split
            if split is None:
                split = (self.first_width // 4, self.first_width - self.first_width // 4)
            split = tuple(int(c) for c in split)
            if len(split) != 2 or min(split) <= 0 or sum(split) != self.first_width:
                raise ValueError(f"fusion_split {split} must be two positive widths summing to "
                                 f"the first block width {self.first_width}")
            object.__setattr__(self, "fusion_split", split)

    @property
    def first_width(self) -> int:
        return FIRST_WIDTH[self.filter_multiplier]

    @property
    def has_image(self) -> bool:
        return self.modality != "d"

    @property
    def image_channels(self) -> int:
        return {"d": 0, "gray+d": 1, "rgb+d": 3}[self.modality]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.encoder_decoder_pairs + int(self.downsample_early))

    def level_width(self, level: int) -> int:
        return self.first_width * 2 ** (min(level, 4) - 1) if level > 0 else self.first_width

    # key = value text, used in checkpoints and config files
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "/".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "NetworkConfig":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, raw in kv.items():
            if key not in names:
                raise KeyError(key)
            kwargs[key] = _parse_field(key, raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_field(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key in ("resnet_depth", "encoder_decoder_pairs"):
        return int(raw)
    if key in ("skip_connections", "downsample_early", "dropout_and_weight_decay"):
        return _parse_bool(raw)
    if key == "clip_tau_m":
        return float(raw)
    if key == "fusion_split":
        return None if raw.lower() in ("", "none") else tuple(int(x) for x in raw.replace(",", "/").split("/"))
    if key == "filter_multiplier":
        return None if raw.lower() in ("", "none") else raw
    return raw


class NetworkState:
    """Named layer parameters plus the config that produced them."""

    def __init__(self, config: NetworkConfig, layers: "OrderedDict[str, LayerParams]", seed: int = 0):
        self.config = config
        self.layers = layers
        self.seed = seed
        self.rng = np.random.default_rng(seed + 1)  # dropout masks

    def parameters(self) -> list:
        return [t for lp in self.layers.values() for t in lp.trainable()]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for lname, lp in self.layers.items():
            for key in ("weight", "bias"):
                t = getattr(lp, key)
                if t is not None and t.requires_grad:
                    out[f"{lname}.{key}"] = t
        return out

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for lname, lp in self.layers.items():
            for key, t in lp.tensors().items():
                out[f"{lname}.{key}"] = t
        return out

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def save(self, path: str) -> None:
        save_arrays(path, {k: t.data for k, t in self.named_tensors().items()}, self.config.to_text())

    @classmethod
    def load(cls, path: str) -> "NetworkState":
        text = load_config_text(path)
        if text is None:
            raise FileNotFoundError(f"{path}: checkpoint has no config.txt")
        state = build(NetworkConfig.from_text(text), seed=0)
        arrays = load_arrays(path)
        tensors = state.named_tensors()
        missing = set(tensors) - set(arrays)
        extra = set(arrays) - set(tensors)
        if missing or extra:
            raise ValueError(f"{path}: checkpoint does not match config (missing={sorted(missing)[:3]}, "
                             f"unexpected={sorted(extra)[:3]})")
        for name, t in tensors.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
            t.data[...] = arrays[name]
        return state


# -- construction --------------------------------------------------------------

class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers: "OrderedDict[str, LayerParams]" = OrderedDict()

    def conv(self, name: str, c_in: int, c_out: int, k: int, bias: bool = False, transposed: bool = False):
        std = np.sqrt(2.0 / (c_in * k * k))
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        w = Tensor(self.rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.layers[name] = LayerParams(w, b)

    def bn(self, name: str, c: int):
        self.layers[name] = LayerParams(
            Tensor(np.ones(c, dtype=np.float32), requires_grad=True),
            Tensor(np.zeros(c, dtype=np.float32), requires_grad=True),
            Tensor(np.zeros(c, dtype=np.float32)),
            Tensor(np.ones(c, dtype=np.float32)),
        )


def build(config: NetworkConfig, seed: int = 0) -> NetworkState:
    """Create a network with zero-mean Gaussian weights (std sqrt(2 / fan_in))."""
    b = _Builder(seed)
    f1 = config.first_width
    if config.has_image:
        c_img, c_d = config.fusion_split
        b.conv("init_img.conv", config.image_channels, c_img, 3)
        b.bn("init_img.bn", c_img)
        b.conv("init_d.conv", 1, c_d, 3)
        b.bn("init_d.bn", c_d)
    else:
        b.conv("init_d.conv", 1, f1, 3)
        b.bn("init_d.bn", f1)

    blocks = RESNET_BLOCKS[config.resnet_depth]
    pairs = config.encoder_decoder_pairs
    c_prev = f1
    for level in range(1, pairs + 1):
        width = config.level_width(level)
        name = f"enc{level}"
        if level <= 4:
            for i in range(blocks[level - 1]):
                c_in = c_prev if i == 0 else width
                b.conv(f"{name}.block{i}.conv1", c_in, width, 3)
                b.bn(f"{name}.block{i}.bn1", width)
                b.conv(f"{name}.block{i}.conv2", width, width, 3)
                b.bn(f"{name}.block{i}.bn2", width)
                if i == 0:
                    b.conv(f"{name}.block0.down.conv", c_in, width, 1)
                    b.bn(f"{name}.block0.down.bn", width)
        else:
            b.conv(f"{name}.conv", c_prev, width, 3)
            b.bn(f"{name}.bn", width)
        c_prev = width

    skip = config.skip_connections
    for level in range(pairs, 0, -1):
        out_w = config.level_width(level - 1)
        b.conv(f"dec{level}.convt", c_prev, out_w, 3, transposed=True)
        b.bn(f"dec{level}.bn", out_w)
        c_prev = out_w * 2 if skip else out_w
    if config.downsample_early:
        b.conv("dec0.convt", c_prev, f1, 3, transposed=True)
        b.bn("dec0.bn", f1)
        c_prev = f1 * 2 if skip else f1
    b.conv("final.conv", c_prev, 1, 1, bias=True)
    return NetworkState(config, b.layers, seed)


def decoder_input_channels(state: NetworkState) -> dict:
    """Input channel count of each transposed convolution, keyed by layer name."""
    return {name: lp.weight.shape[0] for name, lp in state.layers.items() if name.endswith(".convt")}


# -- forward -------------------------------------------------------------------

def _conv_bn_relu(state, prefix, x, training, stride=1, padding=1, relu=True, conv="conv", bn="bn"):
    lp = state.layers[f"{prefix}.{conv}"]
    y = ops.conv2d(x, lp.weight, lp.bias, stride=stride, padding=padding)
    y = ops.batch_norm(y, state.layers[f"{prefix}.{bn}"], training)
    return ops.relu(y) if relu else y


def _basic_block(state, prefix, x, training, stride):
    out = _conv_bn_relu(state, prefix, x, training, stride=stride, conv="conv1", bn="bn1")
    out = _conv_bn_relu(state, prefix, out, training, relu=False, conv="conv2", bn="bn2")
    if f"{prefix}.down.conv" in state.layers:
        shortcut = _conv_bn_relu(state, f"{prefix}.down", x, training, stride=stride, padding=0, relu=False)
    else:
        shortcut = x
    return ops.relu(ops.add(out, shortcut))


def _upsample(state, prefix, x, training):
    lp = state.layers[f"{prefix}.convt"]
    y = ops.conv_transpose2d(x, lp.weight, lp.bias, stride=2, padding=1, output_padding=1)
    return ops.relu(ops.batch_norm(y, state.layers[f"{prefix}.bn"], training))


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma of an (N, 3, H, W) array."""
    r, g, b = LUMA
    return (r * rgb[:, 0:1] + g * rgb[:, 1:2] + b * rgb[:, 2:3]).astype(rgb.dtype)


def prepare_image(config: NetworkConfig, rgb) -> Optional[Tensor]:
    if not config.has_image:
        return None
    if rgb is None:
        raise ValueError(f"modality {config.modality!r} needs an image input")
    data = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb, dtype=np.float32)
    if config.modality == "gray+d" and data.shape[1] == 3:
        data = to_gray(data)
    if data.shape[1] != config.image_channels:
        raise ShapeError(f"forward: image has {data.shape[1]} channels, modality {config.modality} "
                         f"needs {config.image_channels}")
    return Tensor(data, dtype=np.float32) if not isinstance(rgb, Tensor) or data is not rgb.data else rgb


def forward(state: NetworkState, rgb, d_sparse, training: bool = True) -> Tensor:
    """Dense depth prediction with the input's spatial size (no clipping)."""
    cfg = state.config
    d = d_sparse if isinstance(d_sparse, Tensor) else Tensor(np.asarray(d_sparse, dtype=np.float32))
    if d.ndim != 4 or d.shape[1] != 1:
        raise ShapeError(f"forward: sparse depth must be (N,1,H,W), got {d.shape}")
    n, _, h, w = d.shape
    f = cfg.downsample_factor
    if h % f or w % f:
        ph, pw = (-h) % f, (-w) % f
        raise ShapeError(f"forward: H and W must be divisible by {f}; got {h}x{w}, "
                         f"pad or crop by {ph} rows and {pw} columns (e.g. to {h + ph}x{w + pw})")
    img = prepare_image(cfg, rgb)
    if img is not None and (img.shape[0] != n or img.shape[2:] != (h, w)):
        raise ShapeError(f"forward: image {img.shape} and depth {d.shape} differ")

    x_d = _conv_bn_relu(state, "init_d", d, training)
    if img is not None:
        x_img = _conv_bn_relu(state, "init_img", img, training)
        x0 = ops.concat_channels([x_img, x_d])
    else:
        x0 = x_d
    full_res = x0
    if cfg.downsample_early:
        x0 = ops.max_pool2d(x0, 2)

    skips = [x0]
    x = x0
    blocks = RESNET_BLOCKS[cfg.resnet_depth]
    for level in range(1, cfg.encoder_decoder_pairs + 1):
        if level <= 4:
            for i in range(blocks[level - 1]):
                x = _basic_block(state, f"enc{level}.block{i}", x, training, stride=2 if i == 0 else 1)
        else:
            x = _conv_bn_relu(state, f"enc{level}", x, training, stride=2)
        skips.append(x)

    for level in range(cfg.encoder_decoder_pairs, 0, -1):
        x = _upsample(state, f"dec{level}", x, training)
        if cfg.skip_connections:
            x = ops.concat_channels([x, skips[level - 1]])
    if cfg.downsample_early:
        x = _upsample(state, "dec0", x, training)
        if cfg.skip_connections:
            x = ops.concat_channels([x, full_res])

    if cfg.dropout_and_weight_decay:
        x = ops.dropout(x, DROPOUT_P, state.rng, training)
    lp = state.layers["final.conv"]
    return ops.conv2d(x, lp.weight, lp.bias)


def clip_predictions(pred, tau: float = 0.9):
    """Elementwise max(pred, tau); applied at inference only."""
    if isinstance(pred, Tensor):
        return Tensor(np.maximum(pred.data, np.asarray(tau, dtype=pred.dtype)), dtype=pred.dtype)
    return np.maximum(pred, tau)


def predict(state: NetworkState, rgb, d_sparse) -> np.ndarray:
    """Inference: eval-mode forward without a graph, clipped at the configured tau."""
    with no_grad():
        out = forward(state, rgb, d_sparse, training=False)
    return clip_predictions(out.data, state.config.clip_tau_m)


def with_overrides(config: NetworkConfig, **kw) -> NetworkConfig:
    return replace(config, **kw)


def checkpoint_exists(path: str) -> bool:
    return os.path.exists(os.path.join(path, "manifest.txt"))
