"""Training objectives: reconstruction, perceptual, style, total variation,
and the gradient-penalty adversary, grouped into per-scale structure and
texture terms.

All L1 norms are mean-reduced per element so the trade-off weights stay
size-invariant across scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

STRUCTURE_SCALES = (1, 2, 3, 4, 5, 6)
TEXTURE_SCALES = (1, 2, 3)


@dataclass(frozen=True)
class LossWeights:
    rec: float = 6.0
    per: float = 0.1
    style: float = 240.0
    tv: float = 0.1
    adv: float = 0.001
    gp: float = 10.0
    structure_scales: tuple[int, ...] = STRUCTURE_SCALES
    texture_scales: tuple[int, ...] = TEXTURE_SCALES

    def validate(self) -> None:
        for name in ("rec", "per", "style", "tv", "adv", "gp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if not set(self.texture_scales) <= set(self.structure_scales):
            raise ConfigError("texture scales must be a subset of structure scales")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(y_hat, y)
    return (y_hat - y).abs().mean()


class SubstituteFeatureExtractor(nn.Module):
    """Frozen, seeded stand-in for a pretrained perceptual network.

    Three conv + relu + maxpool stages; features are taken after each pool.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        stages = []
        prev = 3
        for width in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            prev = width
        self.stages = nn.ModuleList(stages)
        self.widths = widths
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight)
                    nn.init.normal_(m.bias, std=0.1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-2] < 2 ** len(self.stages) or x.shape[-1] < 2 ** len(self.stages):
            raise ContractError(
                f"input {tuple(x.shape[-2:])} too small for {len(self.stages)} pooling stages"
            )
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def make_feature_extractor(kind: str = "substitute", seed: int = 0) -> nn.Module:
    """Build the fixed feature network. ``vgg16`` needs torchvision weights."""
    if kind == "substitute":
        return SubstituteFeatureExtractor(seed=seed)
    if kind == "vgg16":
        return _Vgg16Pools()
    raise ConfigError(f"unknown feature extractor {kind!r}")


class _Vgg16Pools(nn.Module):
    """First three pooling stages of a pretrained VGG-16 classifier."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision import models
        except ImportError as exc:  # pragma: no cover
            raise ConfigError(
                "feature_extractor=vgg16 requires torchvision; install it or use "
                "feature_extractor=substitute"
            ) from exc
        vgg = models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1)
        feats = vgg.features
        pool_idx = [i for i, m in enumerate(feats) if isinstance(m, nn.MaxPool2d)][:3]
        self.stages = nn.ModuleList(
            [
                feats[: pool_idx[0] + 1],
                feats[pool_idx[0] + 1 : pool_idx[1] + 1],
                feats[pool_idx[1] + 1 : pool_idx[2] + 1],
            ]
        )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def perceptual_loss(
    y_hat: torch.Tensor, y: torch.Tensor, extractor: nn.Module
) -> torch.Tensor:
    """Layer-averaged mean absolute feature difference."""
    _check_same_shape(y_hat, y)
    feats_hat = extractor(y_hat)
    feats = extractor(y)
    terms = [(a - b).abs().mean() for a, b in zip(feats, feats_hat)]
    return torch.stack(terms).mean()


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Feature inner products: (C, h, w) -> (C, C), batched if 4-d."""
    if feat.ndim == 3:
        flat = feat.reshape(feat.shape[0], -1)
        return flat @ flat.t()
    if feat.ndim == 4:
        flat = feat.reshape(feat.shape[0], feat.shape[1], -1)
        return flat @ flat.transpose(1, 2)
    raise ContractError(f"expected (C, h, w) or (B, C, h, w), got {tuple(feat.shape)}")


def style_loss(y_hat: torch.Tensor, y: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Layer-averaged Gram-matrix L1 distance, normalized by C_i^2 per layer."""
    _check_same_shape(y_hat, y)
    feats_hat = extractor(y_hat)
    feats = extractor(y)
    terms = []
    for a, b in zip(feats, feats_hat):
        c = a.shape[-3]
        terms.append((gram(a) - gram(b)).abs().mean() / (c * c))
    return torch.stack(terms).mean()


def _as_mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype)
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if m.ndim == 3:
        m = m.unsqueeze(1)  # (B, 1, H, W)
    return m


def tv_loss(y_hat: torch.Tensor, mask) -> torch.Tensor:
    """Total variation over the 1-pixel dilation of the hole region.

    A horizontal or vertical difference counts iff both endpoints lie in the
    dilated region; each direction is normalized by its own pair count.
    """
    if y_hat.ndim == 3:
        y_hat = y_hat.unsqueeze(0)
    m = _as_mask_tensor(mask, y_hat)
    if m.shape[-2:] != y_hat.shape[-2:]:
        raise ContractError(
            f"mask size {tuple(m.shape[-2:])} does not match image {tuple(y_hat.shape[-2:])}"
        )
    if m.shape[0] == 1 and y_hat.shape[0] > 1:
        m = m.expand(y_hat.shape[0], -1, -1, -1)
    omega = F.max_pool2d(m, kernel_size=3, stride=1, padding=1)  # 1-px dilation
    total = y_hat.new_zeros(())
    channels = y_hat.shape[1]
    for axis in (-1, -2):
        if axis == -1:
            pair = omega[..., :, 1:] * omega[..., :, :-1]
            diff = (y_hat[..., :, 1:] - y_hat[..., :, :-1]).abs()
        else:
            pair = omega[..., 1:, :] * omega[..., :-1, :]
            diff = (y_hat[..., 1:, :] - y_hat[..., :-1, :]).abs()
        count = pair.sum()
        if float(count) > 0:
            total = total + (diff * pair).sum() / (count * channels)
    return total


class Critic(nn.Module):
    """Unnormalized convolutional critic mapping an image to a scalar score."""

    WIDTHS = (64, 128, 256, 512, 512)

    def __init__(self, in_channels: int = 3):
        super().__init__()
        layers = []
        prev = in_channels
        for width in self.WIDTHS:
            layers.append(nn.Conv2d(prev, width, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.body(x).mean(dim=(-2, -1))
        return self.head(feat).squeeze(-1)


def interpolate_samples(
    real: torch.Tensor, fake: torch.Tensor, rng: np.random.Generator
) -> torch.Tensor:
    """Convex mix of real and fake, passed through a random-scale resize cycle."""
    _check_same_shape(real, fake)
    b = real.shape[0]
    eps = torch.as_tensor(
        rng.uniform(0.0, 1.0, size=(b, 1, 1, 1)), dtype=real.dtype
    )
    mixed = eps * real + (1.0 - eps) * fake
    h, w = mixed.shape[-2:]
    factor = float(rng.uniform(0.75, 1.25))
    mh, mw = max(1, round(h * factor)), max(1, round(w * factor))
    mixed = F.interpolate(mixed, size=(mh, mw), mode="bilinear", align_corners=False)
    return F.interpolate(mixed, size=(h, w), mode="bilinear", align_corners=False)


def gradient_penalty(critic, samples: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of the critic's input-gradient norm from 1."""
    samples = samples.detach().requires_grad_(True)
    scores = critic(samples)
    if scores.grad_fn is None:  # critic ignores its input entirely
        grads = torch.zeros_like(samples)
    else:
        grads = torch.autograd.grad(
            outputs=scores.sum(),
            inputs=samples,
            create_graph=True,
            allow_unused=True,
        )[0]
        if grads is None:
            grads = torch.zeros_like(samples)
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def adv_loss_d(
    critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: np.random.Generator,
    gp_weight: float = 10.0,
) -> torch.Tensor:
    """Critic objective: score gap plus the gradient penalty on mixed samples."""
    _check_same_shape(real, fake)
    fake = fake.detach()
    gap = critic(fake).mean() - critic(real).mean()
    penalty = gradient_penalty(critic, interpolate_samples(real, fake, rng))
    return gap + gp_weight * penalty


def adv_loss_g(critic, fake: torch.Tensor) -> torch.Tensor:
    """Generator objective: raise the critic's score of synthesized images."""
    return -critic(fake).mean()


def image_pyramid(y: torch.Tensor, scales: tuple[int, ...]) -> dict[int, torch.Tensor]:
    """Bilinear targets for each requested scale (k=1 is the input itself)."""
    out = {}
    h, w = y.shape[-2:]
    for k in scales:
        size = (h >> (k - 1), w >> (k - 1))
        out[k] = (
            y
            if size == (h, w)
            else F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        )
    return out


def mask_pyramid_tensor(mask: torch.Tensor, scales: tuple[int, ...]) -> dict[int, torch.Tensor]:
    """Any-covered (max-pool) downsampling of a (B, 1, H, W) hole mask."""
    out = {}
    levels = max(scales)
    cur = mask
    for k in range(1, levels + 1):
        if k > 1:
            cur = F.max_pool2d(cur, 2)
        if k in scales:
            out[k] = cur
    return out


def structure_loss(
    outputs: dict[int, torch.Tensor],
    y: torch.Tensor,
    weights: LossWeights,
    targets: dict[int, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Scale-averaged weighted reconstruction loss over the structure scales."""
    if targets is None:
        targets = image_pyramid(y, weights.structure_scales)
    terms = [
        weights.rec * rec_loss(outputs[k], targets[k])
        for k in weights.structure_scales
    ]
    return torch.stack(terms).mean()


def texture_loss(
    outputs: dict[int, torch.Tensor],
    y: torch.Tensor,
    mask: torch.Tensor,
    critic,
    extractor: nn.Module,
    weights: LossWeights,
    targets: dict[int, torch.Tensor] | None = None,
    mask_targets: dict[int, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Scale-averaged perceptual + style + tv + adversarial terms.

    A single critic is shared across scales: coarse outputs are resized to
    the full resolution before scoring.
    """
    if targets is None:
        targets = image_pyramid(y, weights.texture_scales)
    if mask_targets is None:
        mask_targets = mask_pyramid_tensor(mask, weights.texture_scales)
    full = y.shape[-2:]
    terms = []
    for k in weights.texture_scales:
        out_k = outputs[k]
        term = (
            weights.per * perceptual_loss(out_k, targets[k], extractor)
            + weights.style * style_loss(out_k, targets[k], extractor)
            + weights.tv * tv_loss(out_k, mask_targets[k])
        )
        if weights.adv > 0 and critic is not None:
            scored = (
                out_k
                if out_k.shape[-2:] == full
                else F.interpolate(out_k, size=full, mode="bilinear", align_corners=False)
            )
            term = term + weights.adv * adv_loss_g(critic, scored)
        terms.append(term)
    return torch.stack(terms).mean()


@dataclass
class LossBreakdown:
    total: float = 0.0
    parts: dict = field(default_factory=dict)


def total_loss(
    outputs: dict[int, torch.Tensor],
    y: torch.Tensor,
    mask: torch.Tensor,
    critic,
    extractor: nn.Module,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Structure + texture objective; also returns unweighted per-term values."""
    weights.validate()
    targets = image_pyramid(y, weights.structure_scales)
    mask_targets = mask_pyramid_tensor(mask, weights.texture_scales)
    struct = structure_loss(outputs, y, weights, targets=targets)
    text = texture_loss(
        outputs, y, mask, critic, extractor, weights,
        targets={k: targets[k] for k in weights.texture_scales},
        mask_targets=mask_targets,
    )
    total = struct + text
    with torch.no_grad():
        full = y.shape[-2:]
        k1 = weights.texture_scales[0]
        out1 = outputs[k1]
        parts = {
            "rec": float(rec_loss(outputs[1], targets[1])),
            "per": float(perceptual_loss(out1, targets[k1], extractor)),
            "style": float(style_loss(out1, targets[k1], extractor)),
            "tv": float(tv_loss(out1, mask_targets[k1])),
            "struct": float(struct),
            "text": float(text),
        }
        if weights.adv > 0 and critic is not None:
            scored = (
                out1
                if out1.shape[-2:] == full
                else F.interpolate(out1, size=full, mode="bilinear", align_corners=False)
            )
            parts["adv_g"] = float(adv_loss_g(critic, scored))
    return total, parts
