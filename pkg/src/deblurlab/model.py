"""Hourglass deblurring backbone, output heads and MSRA fan-mode initialization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

HEADS = ("sigmoid", "linear")
FAN_MODES = ("fan_in", "fan_out", "fan_max")

# Widest feature map any stage may declare.
MAX_CHANNELS = 4096


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 15
    out_channels: int = 3
    base_width: int = 64
    depth: int = 3
    head: str = "linear"
    fan_mode: str = "fan_max"
    first_kernel: int = 5
    kernel: int = 3

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels not in (1, 3):
            raise ValueError(f"out_channels must be 1 or 3, got {self.out_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.fan_mode not in FAN_MODES:
            raise ValueError(f"unknown fan mode {self.fan_mode!r}, expected one of {FAN_MODES}")
        for name in ("first_kernel", "kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd number, got {k}")
        widest = max(self.in_channels, self.base_width * 2 ** self.depth)
        if widest > MAX_CHANNELS:
            raise ValueError(f"config implies {widest} channels, above the limit of {MAX_CHANNELS}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def input_channels(sequence_length: int, assembly: str = "none", color: str = "rgb") -> int:
    """Channel count of a stacked input window.

    ``none`` and ``rep`` keep one slot per frame, ``cat`` appends the
    ``L - 1`` warped neighbours after the originals.
    """
    per_frame = 3 if color == "rgb" else 1
    if assembly in ("none", "rep"):
        return per_frame * sequence_length
    if assembly == "cat":
        return per_frame * (2 * sequence_length - 1)
    raise ValueError(f"unknown assembly mode {assembly!r}")


def dbn_preset(sequence_length: int = 5, assembly: str = "none", color: str = "rgb", **overrides) -> ModelConfig:
    """Default hourglass sized like the DBN baseline (depth 3, 64 base maps)."""
    kw = dict(
        in_channels=input_channels(sequence_length, assembly, color),
        out_channels=3 if color == "rgb" else 1,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


# --------------------------------------------------------------------------
# initialization

@dataclass(frozen=True)
class LayerShape:
    kernel_h: int
    kernel_w: int
    channels_in: int
    channels_out: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")


def fan_value(shape: LayerShape, mode: str) -> int:
    receptive = shape.kernel_h * shape.kernel_w
    fan_in = shape.channels_in * receptive
    fan_out = shape.channels_out * receptive
    if mode == "fan_in":
        return fan_in
    if mode == "fan_out":
        return fan_out
    if mode == "fan_max":
        return max(fan_in, fan_out)
    raise ValueError(f"unknown fan mode {mode!r}")


def msra_std(shape: LayerShape, mode: str) -> float:
    return math.sqrt(2.0 / fan_value(shape, mode))


def msra_init(shape: LayerShape, mode: str, rng: torch.Generator | int, dtype=torch.float32) -> torch.Tensor:
    """Draw a ``(out, in, kh, kw)`` weight tensor from N(0, 2 / fan).

    ``rng`` is either a seeded generator or an integer seed.
    """
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    std = msra_std(shape, mode)
    w = torch.empty(shape.channels_out, shape.channels_in, shape.kernel_h, shape.kernel_w, dtype=dtype)
    return w.normal_(0.0, std, generator=rng)


def layer_shape(module: nn.Module) -> LayerShape:
    # channel direction follows the data flow for transposed convs too
    kh, kw = module.kernel_size
    return LayerShape(kh, kw, module.in_channels, module.out_channels)


def initialize(model: nn.Module, fan_mode: str, seed: int) -> None:
    """Re-initialize every conv with MSRA(fan_mode), batch norms to (1, 0).

    Layers are visited in registration order so one seed fixes the whole net.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                w = msra_init(layer_shape(m), fan_mode, gen, dtype=m.weight.dtype)
                if isinstance(m, nn.ConvTranspose2d):
                    w = w.transpose(0, 1)
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


# --------------------------------------------------------------------------
# backbone

def apply_head(pre_activation: torch.Tensor, head: str, test_time: bool) -> torch.Tensor:
    if head == "sigmoid":
        return torch.sigmoid(pre_activation)
    if head == "linear":
        return pre_activation.clamp(0.0, 1.0) if test_time else pre_activation
    raise ValueError(f"unknown head {head!r}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class UpBNReLU(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Encoder-decoder with additive skips between same-resolution stages.

    Input stage: ``first_kernel`` conv to ``base_width`` maps. Each of the
    ``depth`` encoder stages halves the resolution and doubles the width
    (strided conv + conv); each decoder stage mirrors it with a transposed
    conv, adds the encoder feature of matching resolution, then a conv.
    The output conv carries no batch norm and feeds the configured head.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        widths = [c.base_width * 2 ** i for i in range(c.depth + 1)]
        self.inc = ConvBNReLU(c.in_channels, widths[0], c.first_kernel)
        self.down = nn.ModuleList(
            nn.Sequential(
                ConvBNReLU(widths[i], widths[i + 1], c.kernel, stride=2),
                ConvBNReLU(widths[i + 1], widths[i + 1], c.kernel),
            )
            for i in range(c.depth)
        )
        self.up = nn.ModuleList(UpBNReLU(widths[i + 1], widths[i]) for i in reversed(range(c.depth)))
        self.fuse = nn.ModuleList(ConvBNReLU(widths[i], widths[i], c.kernel) for i in reversed(range(c.depth)))
        self.outc = nn.Conv2d(widths[0], c.out_channels, c.first_kernel, padding=c.first_kernel // 2)

    def forward(self, x: torch.Tensor, test_time: bool | None = None) -> torch.Tensor:
        h, w = x.shape[-2:]
        d = self.config.divisor
        if h % d or w % d:
            raise ValueError(f"input {h}x{w} is not divisible by {d}")
        if x.shape[-3] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[-3]}")
        skips = [self.inc(x)]
        for stage in self.down:
            skips.append(stage(skips[-1]))
        y = skips.pop()
        for up, fuse in zip(self.up, self.fuse):
            y = fuse(up(y) + skips.pop())
        if test_time is None:
            test_time = not self.training
        return apply_head(self.outc(y), self.config.head, test_time)


def build_backbone(config: ModelConfig, seed: int | None = 0) -> Backbone:
    model = Backbone(config)
    if seed is not None:
        initialize(model, config.fan_mode, seed)
    return model


# --------------------------------------------------------------------------
# output statistics

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mass_outside(self, lo: float, hi: float) -> float:
        """Fraction of samples in bins lying entirely outside ``[lo, hi]``."""
        outside = (self.edges[1:] <= lo) | (self.edges[:-1] >= hi)
        return float(self.counts[outside].sum()) / max(self.total, 1)


def raw_outputs(model: Backbone, inputs: Iterable[np.ndarray]) -> np.ndarray:
    """Unclamped linear-head outputs for a sequence of ``(C, H, W)`` inputs."""
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    out = []
    with torch.no_grad():
        for x in inputs:
            t = torch.as_tensor(np.ascontiguousarray(x), dtype=param.dtype)[None]
            out.append(model(t, test_time=False)[0].numpy().ravel())
    model.train(was_training)
    return np.concatenate(out) if out else np.empty(0)


def activation_histogram(model: Backbone, clips: Sequence, bins: int, assembly: str = "none",
                         provider=None, color: str = "rgb", value_range=(-0.5, 1.5)) -> Histogram:
    """Histogram of raw output values over every pixel of ``clips``.

    The edges span ``value_range`` widened to the observed extremes so the
    counts always add up to the number of emitted values.
    """
    from .flowwarp import assemble_input

    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not clips:
        raise ValueError("activation_histogram needs at least one clip")
    if model.config.head != "linear":
        raise ValueError("activation statistics are defined for the linear head")
    values = raw_outputs(model, (assemble_input(c, assembly, provider, color) for c in clips))
    lo = min(value_range[0], float(values.min()))
    hi = max(value_range[1], float(values.max()))
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return Histogram(edges=edges, counts=counts)
