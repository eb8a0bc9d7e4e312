"""Compact encoder/decoder segmentation network with five feature taps.

Layout (stock widths)::

    stem     3x3 s2, 16 ch
    stage1   residual, 16 ch   -> tap, stride 2
    stage2   residual, 32 ch   -> tap, stride 4
    stage3   residual, 64 ch   -> tap, stride 8
    stage4   residual, 128 ch  -> tap, stride 16
    aspp     3x3 s2 entry, dilations 1/2/4, 1x1 fuse, 128 ch -> tap, stride 32

The default ("skip") decoder upsamples the stride-32 map to stride 4, joins
it with a 1x1 projection of the stride-4 tap, applies two 3x3 convs and a
1x1 classifier, and bilinearly upsamples the logits to the input size. The
"plain" decoder applies the classifier straight to the stride-32 map. With
scale attention enabled the pooled/attended taps, reduced back to 128
channels, replace the ASPP map as decoder input.
"""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Prediction, Tile
from .sam import ScaleAttention, apply as sam_apply, pool_and_concat

CHECKPOINT_VERSION = 1
MIN_INPUT_PX = 32


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int = 5
    widths: tuple[int, ...] = (16, 32, 64, 128)
    aspp_channels: int = 128
    dilations: tuple[int, ...] = (1, 2, 4)
    use_sam: bool = False
    decoder: str = "skip"
    skip_channels: int = 16
    decoder_channels: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.decoder not in ("skip", "plain"):
            raise ValueError(f"decoder must be 'skip' or 'plain', got {self.decoder!r}")

    @property
    def output_stride(self) -> int:
        return 2 ** (len(self.widths) + 1)

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.widths) + (self.aspp_channels,)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FeatureTaps:
    maps: list[torch.Tensor]
    strides: tuple[int, ...] = field(default=())


def _conv_bn(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualStage(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + skip)


class ASPPLite(nn.Module):
    def __init__(self, cin: int, cout: int, dilations: Sequence[int]):
        super().__init__()
        self.entry = _conv_bn(cin, cout, stride=2)
        self.branches = nn.ModuleList(_conv_bn(cout, cout, dilation=d) for d in dilations)
        self.fuse = nn.Sequential(
            nn.Conv2d(cout * len(dilations), cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        x = self.entry(x)
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig = SegNetConfig()):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = _conv_bn(3, w[0], stride=2)
        stages = [ResidualStage(w[0], w[0], 1)]
        stages += [ResidualStage(w[i - 1], w[i], 2) for i in range(1, len(w))]
        self.stages = nn.ModuleList(stages)
        self.aspp = ASPPLite(w[-1], config.aspp_channels, config.dilations)
        self.sam = None
        self.sam_reduce = None
        if config.use_sam:
            integrate(self)
        head_ch = config.aspp_channels
        self.skip = self.fuse = None
        if config.decoder == "skip":
            self.skip = nn.Sequential(
                nn.Conv2d(w[1], config.skip_channels, 1, bias=False),
                nn.BatchNorm2d(config.skip_channels),
                nn.ReLU(inplace=True),
            )
            self.fuse = nn.Sequential(
                _conv_bn(config.aspp_channels + config.skip_channels, config.decoder_channels),
                _conv_bn(config.decoder_channels, config.decoder_channels),
            )
            head_ch = config.decoder_channels
        self.classifier = nn.Conv2d(head_ch, config.num_classes, 1)
        init_parameters(self, config.seed)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2 ** (i + 1) for i in range(len(self.config.widths) + 1))

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
            taps.append(y)
        taps.append(self.aspp(y))
        return taps

    def head_input(self, taps: list[torch.Tensor]) -> torch.Tensor:
        if self.sam is None:
            return taps[-1]
        f = pool_and_concat(taps, tuple(taps[-1].shape[-2:]))
        return self.sam_reduce(sam_apply(f, self.sam))

    def forward(self, x: torch.Tensor, return_taps: bool = False):
        """Per-pixel logits (B x K x H x W); optionally the unpadded-grid taps too.

        Inputs whose sides are not multiples of the output stride are zero
        padded at the bottom/right and the logits cropped back.
        """
        h, w = x.shape[-2:]
        if h < MIN_INPUT_PX or w < MIN_INPUT_PX:
            raise ValueError(f"input {h}x{w} is smaller than {MIN_INPUT_PX}x{MIN_INPUT_PX}")
        s = self.config.output_stride
        ph, pw = -h % s, -w % s
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        taps = self.encode(x)
        y = self.head_input(taps)
        if self.skip is not None:
            low = self.skip(taps[1])
            y = F.interpolate(y, size=low.shape[-2:], mode="bilinear", align_corners=False)
            y = self.fuse(torch.cat([y, low], dim=1))
        logits = self.classifier(y)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        logits = logits[..., :h, :w]
        if return_taps:
            return logits, FeatureTaps(taps, self.strides)
        return logits


def integrate(model: SegNet) -> SegNet:
    """Attach scale attention to ``model``; its output replaces the ASPP tap."""
    channels = sum(model.config.tap_channels)
    model.sam = ScaleAttention(channels)
    model.sam_reduce = nn.Conv2d(channels, model.config.aspp_channels, 1)
    if model.sam_reduce.in_channels != channels:
        raise ValueError("scale attention channel mismatch")
    return model


def init_parameters(module: nn.Module, seed: int) -> None:
    """He fan-in normal weights, zero biases, unit/zero batch-norm affine.

    Each submodule draws from its own generator keyed on (seed, module name).
    """
    with torch.no_grad():
        for name, m in module.named_modules():
            # per-module stream: adding a submodule never shifts the others' draws
            g = torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) & 0x7FFFFFFFFFFF)
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters(), torch.empty(0)).dtype


def to_batch(tiles: Sequence[Tile], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([t.chw() for t in tiles])).to(dtype)


def forward(model: SegNet, tile: Tile) -> tuple[Prediction, FeatureTaps]:
    """Single-tile inference in eval mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            dtype = _dtype(model)
            logits, taps = model(to_batch([tile], dtype), return_taps=True)
            probs = torch.softmax(logits, dim=1)[0].double().numpy()
    finally:
        model.train(was_training)
    return Prediction(probs, tile.id), FeatureTaps([t[0] for t in taps.maps], taps.strides)


def predict_probs(model: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode class probabilities for an N x 3 x H x W array."""
    was_training = model.training
    model.eval()
    dtype = _dtype(model)
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size])).to(dtype)
                out.append(torch.softmax(model(x), dim=1).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def encode_embedding(model: SegNet, tile: Tile) -> np.ndarray:
    """Global-average-pooled ASPP map: a fixed 128-long encoder descriptor."""
    _, taps = forward(model, tile)
    return taps.maps[-1].mean(dim=(-2, -1)).double().numpy()


def parameters(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return list(model.named_parameters())


def save(model: SegNet, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "config_digest": model.config.digest(),
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_state(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    expected = model.state_dict()
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise KeyError(f"checkpoint is missing tensor {missing[0]!r}")
    unexpected = [k for k in tensors if k not in expected]
    if unexpected:
        raise KeyError(f"checkpoint has unexpected tensor {unexpected[0]!r}")
    for k, v in expected.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k!r}: checkpoint {tuple(tensors[k].shape)}, model {tuple(v.shape)}")
    model.load_state_dict(tensors)


def load(path: str | Path, model: SegNet | None = None) -> SegNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    if model is None:
        cfg = dict(payload["config"])
        for key in ("widths", "dilations"):
            cfg[key] = tuple(cfg[key])
        model = SegNet(SegNetConfig(**cfg))
    load_state(model, payload["tensors"])
    return model
