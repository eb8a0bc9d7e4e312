"""Output-space discriminators and the segmentation/adversarial losses.

Discriminators see softmax prediction maps (K channels) and return a logit
map; every loss reduces over map positions with an arithmetic mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE, DomainLabel
from .segnet import init_parameters

PROB_FLOOR = 1e-12
DISC_CHANNELS = (64, 128, 256, 512, 1)
LEAKY_SLOPE = 0.2
MIN_DISC_INPUT = 32


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 0.005
    lambda_s: float = 0.005

    def __post_init__(self):
        if self.lambda_f < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be nonnegative")


class Discriminator(nn.Module):
    """Five 4x4/stride-2/pad-1 convolutions; leaky ReLU after the first four."""

    def __init__(self, num_classes: int, channels=DISC_CHANNELS, seed: int = 0):
        super().__init__()
        layers = []
        cin = num_classes
        for i, cout in enumerate(channels):
            layers.append(nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1))
            if i < len(channels) - 1:
                layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            cin = cout
        self.net = nn.Sequential(*layers)
        self.num_classes = num_classes
        init_parameters(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def zero_(self) -> "Discriminator":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


DiscLike = Union[Discriminator, Callable[[torch.Tensor], torch.Tensor]]


def _z(z) -> int:
    return z.z if isinstance(z, DomainLabel) else DomainLabel(int(z)).z


def seg_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy ``-log p[label]`` over non-IGNORE pixels.

    ``probs`` is (B x) K x H x W, ``labels`` (B x) H x W.
    """
    if probs.dim() == 3:
        probs, labels = probs.unsqueeze(0), labels.unsqueeze(0)
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ValueError(f"prediction {tuple(probs.shape)} and mask {tuple(labels.shape)} do not match")
    labels = labels.long()
    valid = labels != IGNORE
    if not bool(valid.any()):
        raise ValueError("every pixel is IGNORE; segmentation loss is undefined")
    if bool((labels[valid] >= probs.shape[1]).any()) or bool((labels[valid] < 0).any()):
        raise ValueError("mask holds labels outside the prediction's class range")
    idx = torch.where(valid, labels, torch.zeros_like(labels)).unsqueeze(1)
    picked = torch.gather(probs, 1, idx).squeeze(1)
    nll = -torch.log(picked.clamp_min(PROB_FLOOR))
    return nll[valid].mean()


def disc_forward(d: DiscLike, pred: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Logit map and sigmoid probability map for a B x K x H x W prediction."""
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    k = getattr(d, "num_classes", pred.shape[1])
    if pred.shape[1] != k:
        raise ValueError(f"discriminator expects {k} channels, got {pred.shape[1]}")
    if min(pred.shape[-2:]) < MIN_DISC_INPUT:
        raise ValueError(f"discriminator input {tuple(pred.shape[-2:])} is smaller than {MIN_DISC_INPUT}")
    logits = d(pred)
    return logits, torch.sigmoid(logits)


def bce_logits(logits: torch.Tensor, z) -> torch.Tensor:
    """Mean of ``-[z log D + (1 - z) log(1 - D)]`` with ``D = sigmoid(logits)``."""
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, float(_z(z))))


def fool_loss_logits(logits: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log D`` (the generator wants D to say "source")."""
    return F.softplus(-logits).mean()


def disc_loss(d: DiscLike, pred: torch.Tensor, z) -> torch.Tensor:
    logits, _ = disc_forward(d, pred)
    return bce_logits(logits, z)


def adv_loss_feat(d_feat: DiscLike, pred_t_theta: torch.Tensor) -> torch.Tensor:
    """Feature adversarial loss on the target resized to source scale."""
    logits, _ = disc_forward(d_feat, pred_t_theta)
    return fool_loss_logits(logits)


def adv_loss_scale(d_scale: DiscLike, pred_t_sigma: torch.Tensor) -> torch.Tensor:
    """Scale adversarial loss on the target at its native scale."""
    logits, _ = disc_forward(d_scale, pred_t_sigma)
    return fool_loss_logits(logits)


def total_gen_loss(l_seg, l_feat, l_scale, w: LossWeights = LossWeights()):
    return l_seg + w.lambda_f * l_feat + w.lambda_s * l_scale


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)
