"""Scale attention: channel self-attention over pooled multi-scale taps.

The five encoder taps are brought to a common spatial size, concatenated to
``f`` (B x C x Hp x Wp) and flattened to B x C x N. The attention matrix is
the row softmax of ``alpha(f) beta(f)^T`` (C x C, contraction over the N
positions) and the module output is ``A @ gamma(f)`` reshaped back, with no
residual term.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def pool_and_concat(taps: Sequence[torch.Tensor], pool_dims: tuple[int, int]) -> torch.Tensor:
    """Bring every tap to ``pool_dims`` and concatenate along channels in tap order.

    Larger maps are adaptively average pooled; smaller ones are upsampled
    bilinearly (half-pixel centres).
    """
    hp, wp = pool_dims
    out = []
    for t in taps:
        h, w = t.shape[-2:]
        if (h, w) == (hp, wp):
            out.append(t)
        elif h >= hp and w >= wp:
            out.append(F.adaptive_avg_pool2d(t, (hp, wp)))
        else:
            out.append(F.interpolate(t, size=(hp, wp), mode="bilinear", align_corners=False))
    return torch.cat(out, dim=1)


class ScaleAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.alpha = nn.Conv2d(channels, channels, 1)
        self.beta = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Conv2d(channels, channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return apply(f, self)


def attention(f: torch.Tensor, params: ScaleAttention) -> torch.Tensor:
    """Row-stochastic B x C x C attention matrix for a B x C x Hp x Wp map."""
    b, c = f.shape[:2]
    a = params.alpha(f).reshape(b, c, -1)
    k = params.beta(f).reshape(b, c, -1)
    logits = torch.bmm(a, k.transpose(1, 2))
    return torch.softmax(logits, dim=-1)


def apply(f: torch.Tensor, params: ScaleAttention, attn: torch.Tensor | None = None) -> torch.Tensor:
    if attn is None:
        attn = attention(f, params)
    b, c, h, w = f.shape
    g = params.gamma(f).reshape(b, c, h * w)
    return torch.bmm(attn, g).reshape(b, c, h, w)


def attention_report(attn: torch.Tensor, path: str | Path | None = None, top: int = 10) -> dict:
    """Summarise an attention batch: mean matrix and the mass each channel receives.

    The mass of channel ``c'`` is the column sum of ``A``, i.e. how strongly it
    feeds all output channels.
    """
    mean = attn.detach().double().mean(dim=0)
    mass = mean.sum(dim=0)
    order = torch.argsort(mass, descending=True)[:top]
    report = {
        "channels": int(mean.shape[0]),
        "attention": mean.tolist(),
        "channel_mass": mass.tolist(),
        "most_weighted": [int(i) for i in order],
    }
    if path is not None:
        Path(path).write_text(json.dumps(report))
    return report
