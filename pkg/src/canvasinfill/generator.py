"""The inpainting network: pretrained encoder trunk + multi-scale decoder.

The decoder upsamples the bottleneck back to full resolution in six stages
with U-Net skip connections, and every stage carries a fusion head emitting
an image at that scale (scale 1 is the outermost, full-resolution output).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .contrastive import ENCODER_WIDTHS, EncoderTrunk, pack_inputs
from .daf import DAFHead, PlainHead
from .errors import ContractError
from .masks import MaskedImage, apply_mask

NUM_SCALES = 6
DECODER_WIDTHS = (256, 256, 256, 128, 64, 32)  # stages producing scales 6..1
_NORM_GROUPS = 8


class DecoderBlock(nn.Module):
    """Nearest-neighbor upsample to the target size, concat skip, 3x3 conv."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1)
        self.norm = nn.GroupNorm(_NORM_GROUPS, out_channels)

    def forward(
        self,
        x: torch.Tensor,
        target: tuple[int, int],
        skip: torch.Tensor | None = None,
    ) -> torch.Tensor:
        x = F.interpolate(x, size=target, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return F.relu(self.norm(self.conv(x)))


class InpaintingGenerator(nn.Module):
    """Multi-scale generator over a 4-channel masked input (RGB + mask)."""

    def __init__(self, use_daf: bool = True, in_channels: int = 4):
        super().__init__()
        self.trunk = EncoderTrunk(in_channels)
        head_cls = DAFHead if use_daf else PlainHead
        self.use_daf = use_daf
        blocks = []
        heads = []
        prev = ENCODER_WIDTHS[-1]
        # Stage i (i = 0..5) produces scale k = 6 - i; skips pair each decoder
        # size with the encoder feature of the same size (none at full res).
        for i, width in enumerate(DECODER_WIDTHS):
            skip_idx = 4 - i
            skip_ch = ENCODER_WIDTHS[skip_idx] if skip_idx >= 0 else 0
            blocks.append(DecoderBlock(prev, skip_ch, width))
            heads.append(head_cls(width, in_channels=in_channels))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(heads)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if x.ndim != 4:
            raise ContractError(f"expected (B, 4, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ContractError(f"input size {h}x{w} must be divisible by 32")
        feats = self.trunk(x)
        outputs: dict[int, torch.Tensor] = {}
        d = feats[-1]
        for i, (block, head) in enumerate(zip(self.blocks, self.heads)):
            k = NUM_SCALES - i
            target = (h >> (k - 1), w >> (k - 1))
            skip_idx = 4 - i
            skip = feats[skip_idx] if skip_idx >= 0 else None
            d = block(d, target, skip)
            outputs[k] = head(d, x)
        return outputs

    def load_trunk_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Initialize the encoder trunk from pretrained parameter arrays."""
        state = {name: torch.from_numpy(np.array(arr)) for name, arr in arrays.items()}
        self.trunk.load_state_dict(state)


def generator_forward(
    generator: InpaintingGenerator, masked: MaskedImage
) -> dict[int, torch.Tensor]:
    """Forward one masked image; returns the six per-scale outputs."""
    return generator(pack_inputs(masked))


def check_multiscale_shapes(outputs: dict[int, torch.Tensor], h: int, w: int) -> None:
    """Raise unless outputs follow the exact H/2^(k-1) shape law with 6 entries."""
    if sorted(outputs) != list(range(1, NUM_SCALES + 1)):
        raise ContractError(f"expected scales 1..6, got {sorted(outputs)}")
    for k, out in outputs.items():
        want = (h >> (k - 1), w >> (k - 1))
        if out.shape[-3] != 3 or out.shape[-2:] != want:
            raise ContractError(
                f"scale {k} output has shape {tuple(out.shape)}, wanted (*, 3, {want[0]}, {want[1]})"
            )
        if not torch.isfinite(out).all():
            raise ContractError(f"scale {k} output has non-finite values")


@torch.no_grad()
def inpaint(
    generator: InpaintingGenerator,
    image: np.ndarray,
    mask: np.ndarray,
    composite: bool = True,
) -> np.ndarray:
    """Fill the hole region of ``image``; returns an (H, W, 3) array in [0, 1].

    With ``composite`` on, known pixels are copied verbatim from the input and
    only hole pixels come from the network.
    """
    masked = apply_mask(image, mask)
    out = generator(pack_inputs(masked))[1][0]
    result = out.permute(1, 2, 0).numpy().astype(np.float64)
    result = np.clip(result, 0.0, 1.0)
    if composite:
        hole = (mask > 0)[:, :, None]
        result = np.where(hole, result, image)
    return result
