"""U-Net style segmentation networks with BIN, IBN or plain encoder blocks.

A network keeps its trainable parameters as :class:`Tensor` leaves and its
batch-norm running statistics as plain arrays. :meth:`SegNet.param_set`
exports both, in a stable order, as the unit that federation averages.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    instance_norm,
    max_pool2x2,
    relu,
    sigmoid,
    slice_channels,
    upsample_nearest2x,
)
from .tensor.ops import BN_EPS, BN_MOMENTUM, IN_EPS

ParamSet = Dict[str, np.ndarray]


class BlockKind(str, Enum):
    PLAIN = "plain"
    BIN = "bin"
    IBN = "ibn"


@dataclass(frozen=True)
class NetConfig:
    levels: int = 5
    base_channels: int = 8
    bin_depth: int = 3
    in_channels: int = 1
    out_channels: int = 1
    block_kind: BlockKind = BlockKind.BIN

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if not 0 <= self.bin_depth <= self.levels:
            raise ValueError(f"bin_depth must lie in [0, {self.levels}], got {self.bin_depth}")
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))

    @property
    def widths(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def level_kind(self, level: int) -> BlockKind:
        if level < self.bin_depth:
            return self.block_kind
        return BlockKind.PLAIN


class _ConvUnit:
    """One Conv -> normalization -> ReLU sub-block."""

    def __init__(self, prefix: str, cin: int, cout: int, kind: BlockKind):
        self.prefix = prefix
        self.cin, self.cout, self.kind = cin, cout, kind
        self.bn_channels = cout - cout // 2 if kind is BlockKind.IBN else cout

    def param_shapes(self):
        p = self.prefix
        yield f"{p}.conv.weight", (self.cout, self.cin, 3, 3)
        yield f"{p}.conv.bias", (self.cout,)
        yield f"{p}.bn.weight", (self.bn_channels,)
        yield f"{p}.bn.bias", (self.bn_channels,)

    def buffer_names(self):
        yield f"{self.prefix}.bn.running_mean"
        yield f"{self.prefix}.bn.running_var"

    def __call__(self, net: "SegNet", x: Tensor, training: bool) -> Tensor:
        p = self.prefix
        P, B = net.params, net.buffers
        h = conv2d(x, P[f"{p}.conv.weight"], P[f"{p}.conv.bias"], padding=1, pad_mode="edge")
        bn_args = (P[f"{p}.bn.weight"], P[f"{p}.bn.bias"],
                   B[f"{p}.bn.running_mean"], B[f"{p}.bn.running_var"], training,
                   net.bn_momentum, net.bn_eps)
        if self.kind is BlockKind.IBN:
            half = self.cout // 2
            if half == 0:
                h = batch_norm(h, *bn_args)
            else:
                h = concat_channels(
                    instance_norm(slice_channels(h, 0, half), net.in_eps),
                    batch_norm(slice_channels(h, half, self.cout), *bn_args),
                )
        else:
            h = batch_norm(h, *bn_args)
            if self.kind is BlockKind.BIN:
                h = instance_norm(h, net.in_eps)
        return relu(h)


class SegNet:
    """Encoder/decoder segmentation network producing per-pixel probabilities.

    Encoder level ``i`` has width ``base_channels * 2**i``; the last level is
    the bottleneck. The first ``bin_depth`` levels use ``config.block_kind``,
    the rest and every decoder level are plain Conv-BN-ReLU blocks.
    """

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.bn_momentum = BN_MOMENTUM
        self.bn_eps = BN_EPS
        self.in_eps = IN_EPS
        widths = config.widths
        self.encoder: List[List[_ConvUnit]] = []
        cin = config.in_channels
        for lvl, w in enumerate(widths):
            kind = config.level_kind(lvl)
            self.encoder.append([_ConvUnit(f"enc{lvl}.sub0", cin, w, kind),
                                 _ConvUnit(f"enc{lvl}.sub1", w, w, kind)])
            cin = w
        self.decoder: List[List[_ConvUnit]] = []
        for lvl in range(config.levels - 2, -1, -1):
            w = widths[lvl]
            self.decoder.append([_ConvUnit(f"dec{lvl}.sub0", w + widths[lvl + 1], w, BlockKind.PLAIN),
                                 _ConvUnit(f"dec{lvl}.sub1", w, w, BlockKind.PLAIN)])

        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        for unit in self.units():
            for name, shape in unit.param_shapes():
                if name.endswith("conv.weight"):
                    fan_in = shape[1] * shape[2] * shape[3]
                    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
                elif name.endswith("bn.weight"):
                    data = np.ones(shape)
                else:
                    data = np.zeros(shape)
                self.params[name] = Tensor(data, requires_grad=True)
            for name in unit.buffer_names():
                c = unit.bn_channels
                self.buffers[name] = np.zeros(c) if name.endswith("mean") else np.ones(c)
        top = widths[0]
        self.params["head.weight"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / top), size=(config.out_channels, top, 1, 1)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(config.out_channels), requires_grad=True)

    def units(self):
        for block in self.encoder + self.decoder:
            yield from block

    # federation view ------------------------------------------------------
    def param_set(self) -> ParamSet:
        """Copy of every parameter and running statistic, in stable order."""
        out: ParamSet = {}
        for unit in self.units():
            for name, _ in unit.param_shapes():
                out[name] = self.params[name].data.copy()
            for name in unit.buffer_names():
                out[name] = self.buffers[name].copy()
        out["head.weight"] = self.params["head.weight"].data.copy()
        out["head.bias"] = self.params["head.bias"].data.copy()
        return out

    def load_param_set(self, ps: ParamSet) -> None:
        expected = self.param_set()
        if list(ps) != list(expected):
            raise ValueError("parameter names do not match this network's signature")
        for name, value in ps.items():
            if np.shape(value) != expected[name].shape:
                raise ShapeError(f"{name}: shape {np.shape(value)} != {expected[name].shape}")
            if name in self.params:
                self.params[name].data[...] = value
            else:
                self.buffers[name][...] = value

    def trainable(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # forward ----------------------------------------------------------------
    def encode(self, x: Tensor, training: bool) -> List[Tensor]:
        """Run the encoder; returns the pre-pool feature map of every level."""
        feats = []
        h = x
        for lvl, block in enumerate(self.encoder):
            if lvl > 0:
                h = max_pool2x2(h)
            for unit in block:
                h = unit(self, h, training)
            feats.append(h)
        return feats

    def forward(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        feats = self.encode(x, training)
        h = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            h = concat_channels(skip, upsample_nearest2x(h))
            for unit in block:
                h = unit(self, h, training)
        h = conv2d(h, self.params["head.weight"], self.params["head.bias"])
        return sigmoid(h)

    __call__ = forward

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        m = cfg.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"spatial size {x.shape[2]}x{x.shape[3]} must be divisible by {m}")


def build_segnet(config: NetConfig, seed: int = 0) -> SegNet:
    """Deterministic He-normal initialised network (biases zero)."""
    return SegNet(config, seed)


def build_ibn_segnet(config: NetConfig, seed: int = 0) -> SegNet:
    """Same as :func:`build_segnet` with IBN blocks in the top ``bin_depth`` levels."""
    from dataclasses import replace
    return SegNet(replace(config, block_kind=BlockKind.IBN), seed)


def forward(net: SegNet, batch, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.forward(batch, training=mode == "train")
