"""Dual attention fusion head.

Channel attention (squeeze -> gate -> rescale) followed by a spatial combine
map that convexly blends the projected decoder features with a downscaled
projection of the masked input, producing a smooth image at the head's scale.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

_TRANSFORM_HIDDEN = 32


def global_pool(feat: torch.Tensor) -> torch.Tensor:
    """Channel-wise spatial mean: (..., C, h, w) -> (..., C)."""
    return feat.mean(dim=(-2, -1))


def channel_gate(z: torch.Tensor, gate_down: nn.Linear, gate_up: nn.Linear) -> torch.Tensor:
    """Sigmoid-gated channel weights in (0, 1): sigmoid(up(relu(down(z))))."""
    if z.shape[-1] != gate_down.in_features:
        raise ContractError(
            f"gate expects {gate_down.in_features} channels, got {z.shape[-1]}"
        )
    return torch.sigmoid(gate_up(F.relu(gate_down(z))))


def rescale(feat: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Multiply each channel by its gate weight."""
    if feat.shape[-3] != weights.shape[-1]:
        raise ContractError(
            f"got {weights.shape[-1]} weights for {feat.shape[-3]} channels"
        )
    return feat * weights[..., :, None, None]


def downscale_input(
    x: torch.Tensor, size: tuple[int, int], input_proj: nn.Conv2d
) -> torch.Tensor:
    """1x1-project the 4-channel masked input, then bilinear-resize to ``size``."""
    h, w = x.shape[-2:]
    th, tw = size
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ContractError(f"target size {size} must divide input size {(h, w)}")
    projected = input_proj(x)
    if (th, tw) == (h, w):
        return projected
    return F.interpolate(projected, size=size, mode="bilinear", align_corners=False)


def combine_map(
    feat_hat: torch.Tensor,
    x_small: torch.Tensor,
    feat_proj: nn.Conv2d,
    transform: nn.Module,
) -> torch.Tensor:
    """Per-pixel blend weights: sigmoid of the transform over cat(proj(F), x')."""
    if feat_hat.shape[-2:] != x_small.shape[-2:]:
        raise ContractError(
            f"feature size {tuple(feat_hat.shape[-2:])} does not match input "
            f"size {tuple(x_small.shape[-2:])}"
        )
    synth = feat_proj(feat_hat)
    return torch.sigmoid(transform(torch.cat([synth, x_small], dim=-3)))


def blend(alpha: torch.Tensor, synth: torch.Tensor, known: torch.Tensor) -> torch.Tensor:
    """Elementwise convex combination alpha*synth + (1-alpha)*known."""
    if not (alpha.shape == synth.shape == known.shape):
        raise ContractError(
            f"blend shapes differ: {tuple(alpha.shape)}, {tuple(synth.shape)}, "
            f"{tuple(known.shape)}"
        )
    return alpha * synth + (1.0 - alpha) * known


class DAFParts(NamedTuple):
    output: torch.Tensor
    alpha: torch.Tensor
    gate: torch.Tensor
    synth: torch.Tensor
    known: torch.Tensor


class DAFHead(nn.Module):
    """One fusion head attached to a decoder stage with ``channels`` features."""

    def __init__(self, channels: int, reduction: int = 16, in_channels: int = 4):
        super().__init__()
        if channels % reduction:
            raise ConfigError(
                f"channel count {channels} is not divisible by reduction {reduction}"
            )
        self.gate_down = nn.Linear(channels, channels // reduction)
        self.gate_up = nn.Linear(channels // reduction, channels)
        self.input_proj = nn.Conv2d(in_channels, 3, kernel_size=1)
        self.feat_proj = nn.Conv2d(channels, 3, kernel_size=1)
        self.transform = nn.Sequential(
            nn.Conv2d(6, _TRANSFORM_HIDDEN, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(_TRANSFORM_HIDDEN, _TRANSFORM_HIDDEN, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(_TRANSFORM_HIDDEN, 3, 3, padding=1),
        )

    def forward(self, feat: torch.Tensor, x_full: torch.Tensor) -> torch.Tensor:
        return self.forward_parts(feat, x_full).output

    def forward_parts(self, feat: torch.Tensor, x_full: torch.Tensor) -> DAFParts:
        gate = channel_gate(global_pool(feat), self.gate_down, self.gate_up)
        feat_hat = rescale(feat, gate)
        known = downscale_input(x_full, feat.shape[-2:], self.input_proj)
        synth = self.feat_proj(feat_hat)
        alpha = torch.sigmoid(self.transform(torch.cat([synth, known], dim=-3)))
        return DAFParts(
            output=blend(alpha, synth, known),
            alpha=alpha,
            gate=gate,
            synth=synth,
            known=known,
        )


class PlainHead(nn.Module):
    """Ablation head: a single 3x3 convolution instead of the fusion module."""

    def __init__(self, channels: int, in_channels: int = 4):
        super().__init__()
        del in_channels
        self.conv = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, feat: torch.Tensor, x_full: torch.Tensor) -> torch.Tensor:
        del x_full
        return self.conv(feat)
