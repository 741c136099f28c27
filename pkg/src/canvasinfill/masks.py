"""Free-form mask generation and mask algebra.

Masks are (H, W) uint8 arrays where 1 marks the unknown (hole) region and
0 marks known pixels. All generators are pure functions of (spec, seed, h, w);
an explicit ``numpy.random.Generator`` can be passed to draw from a shared
stream instead of the spec seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError

RECTANGULAR = "rectangular"
IRREGULAR = "irregular"

# Stroke segment lengths are drawn uniformly from this fraction range of the
# shorter image side.
_SEGMENT_FRAC = (0.05, 0.25)
# Reference image side for the default brush-width range.
_BRUSH_REF_SIZE = 256


@dataclass(frozen=True)
class MaskSpec:
    """Parameters for on-the-fly mask sampling.

    Rectangular masks use ``min_frac``/``max_frac`` as side-length fractions
    of each image dimension. Irregular masks are unions of random polyline
    brush strokes; ``brush_width`` is in pixels at the target image size.
    """

    kind: str = IRREGULAR
    seed: int | None = None
    min_frac: float = 0.25
    max_frac: float = 0.5
    strokes: tuple[int, int] = (1, 5)
    brush_width: tuple[float, float] = (4.0, 18.0)
    vertices: tuple[int, int] = (4, 12)
    max_angle: float = math.pi / 2

    def validate(self) -> None:
        if self.kind not in (RECTANGULAR, IRREGULAR):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if not 0.0 <= self.min_frac <= self.max_frac <= 1.0:
            raise ConfigError(
                f"rectangle fractions must satisfy 0 <= min <= max <= 1, "
                f"got ({self.min_frac}, {self.max_frac})"
            )
        for name in ("strokes", "brush_width", "vertices"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) has min > max")
        if self.strokes[0] < 0 or self.vertices[0] < 1:
            raise ConfigError("stroke count must be >= 0 and vertex count >= 1")
        if self.brush_width[0] < 1:
            raise ConfigError("brush width must be >= 1 pixel")
        if self.max_angle < 0:
            raise ConfigError("max_angle must be >= 0")


def default_irregular_spec(image_size: int, seed: int | None = None) -> MaskSpec:
    """Irregular spec with the brush-width range scaled to the image size."""
    scale = image_size / _BRUSH_REF_SIZE
    lo = max(1.0, 4.0 * scale)
    hi = max(lo, 18.0 * scale)
    return MaskSpec(kind=IRREGULAR, seed=seed, brush_width=(lo, hi))


def default_rectangular_spec(seed: int | None = None) -> MaskSpec:
    return MaskSpec(kind=RECTANGULAR, seed=seed)


@dataclass(frozen=True)
class MaskedImage:
    """An image with its hole pixels zeroed, carrying the mask alongside."""

    pixels: np.ndarray  # (H, W, 3) float, zero inside holes
    mask: np.ndarray  # (H, W) uint8, 1 = hole

    def network_input(self) -> np.ndarray:
        """Masked RGB with the mask concatenated as a 4th channel, (H, W, 4)."""
        return np.concatenate(
            [self.pixels, self.mask[:, :, None].astype(self.pixels.dtype)], axis=2
        )


def _resolve_rng(spec: MaskSpec, rng: np.random.Generator | None) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(spec.seed)


def _check_size(h: int, w: int) -> None:
    if h < 8 or w < 8:
        raise ContractError(f"mask size must be at least 8x8, got {h}x{w}")


def gen_rectangular(
    spec: MaskSpec, h: int, w: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """One axis-aligned rectangle of 1s with sides uniform in [min, max] fractions."""
    spec.validate()
    if spec.kind != RECTANGULAR:
        raise ConfigError(f"gen_rectangular needs a rectangular spec, got {spec.kind!r}")
    _check_size(h, w)
    rng = _resolve_rng(spec, rng)
    side_h = int(round(rng.uniform(spec.min_frac, spec.max_frac) * h))
    side_w = int(round(rng.uniform(spec.min_frac, spec.max_frac) * w))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top : top + side_h, left : left + side_w] = 1
    return mask


def gen_irregular(
    spec: MaskSpec, h: int, w: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Union of random polyline brush strokes with circular caps.

    Each stroke is a random walk over integer pixel vertices; a pixel is a
    hole iff its distance to any stroke segment is at most half the stroke's
    brush width.
    """
    spec.validate()
    if spec.kind != IRREGULAR:
        raise ConfigError(f"gen_irregular needs an irregular spec, got {spec.kind!r}")
    _check_size(h, w)
    rng = _resolve_rng(spec, rng)
    mask = np.zeros((h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    n_strokes = int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))
    seg_lo = _SEGMENT_FRAC[0] * min(h, w)
    seg_hi = _SEGMENT_FRAC[1] * min(h, w)
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(spec.vertices[0], spec.vertices[1] + 1))
        width = float(rng.uniform(spec.brush_width[0], spec.brush_width[1]))
        radius = width / 2.0
        vy = int(rng.integers(0, h))
        vx = int(rng.integers(0, w))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        points = [(vy, vx)]
        for _ in range(n_vertices - 1):
            angle += float(rng.uniform(-spec.max_angle, spec.max_angle))
            length = float(rng.uniform(seg_lo, seg_hi))
            vy = int(round(min(max(vy + length * math.sin(angle), 0), h - 1)))
            vx = int(round(min(max(vx + length * math.cos(angle), 0), w - 1)))
            points.append((vy, vx))
        if len(points) == 1:
            py, px = points[0]
            mask |= (ys - py) ** 2 + (xs - px) ** 2 <= radius**2
            continue
        for (ay, ax), (by, bx) in zip(points[:-1], points[1:]):
            mask |= _segment_distance_sq(ys, xs, ay, ax, by, bx) <= radius**2
    return mask.astype(np.uint8)


def _segment_distance_sq(ys, xs, ay, ax, by, bx):
    """Squared distance from every pixel (ys, xs) to segment (a, b)."""
    dy, dx = by - ay, bx - ax
    seg_len_sq = dy * dy + dx * dx
    if seg_len_sq == 0:
        return (ys - ay) ** 2 + (xs - ax) ** 2
    t = ((ys - ay) * dy + (xs - ax) * dx) / seg_len_sq
    t = np.clip(t, 0.0, 1.0)
    py = ay + t * dy
    px = ax + t * dx
    return (ys - py) ** 2 + (xs - px) ** 2


def gen_mask(
    spec: MaskSpec, h: int, w: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Dispatch on spec.kind."""
    if spec.kind == RECTANGULAR:
        return gen_rectangular(spec, h, w, rng)
    return gen_irregular(spec, h, w, rng)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> MaskedImage:
    """Zero out hole pixels; known pixels are preserved."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"image must be (H, W, 3), got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise ContractError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}"
        )
    keep = (mask == 0)[:, :, None]
    return MaskedImage(pixels=image * keep, mask=mask.astype(np.uint8))


def dilate1(mask: np.ndarray) -> np.ndarray:
    """Morphological dilation by one pixel with the full 3x3 structuring element."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-d, got shape {mask.shape}")
    out = ndimage.binary_dilation(mask.astype(bool), structure=np.ones((3, 3), bool))
    return out.astype(np.uint8)


def mask_pyramid(mask: np.ndarray, levels: int) -> list[np.ndarray]:
    """Downsample a mask to ``levels`` scales with the any-covered (max-pool) rule.

    Level k is H/2^(k-1) x W/2^(k-1); a coarse pixel is a hole iff any covered
    fine pixel is a hole, so holes never shrink to "known".
    """
    mask = np.asarray(mask).astype(np.uint8)
    h, w = mask.shape
    if levels < 1:
        raise ContractError("levels must be >= 1")
    factor = 2 ** (levels - 1)
    if h % factor or w % factor:
        raise ContractError(
            f"mask size {h}x{w} is not divisible by 2^(levels-1) = {factor}"
        )
    out = [mask]
    cur = mask
    for _ in range(levels - 1):
        ch, cw = cur.shape
        cur = cur.reshape(ch // 2, 2, cw // 2, 2).max(axis=(1, 3))
        out.append(cur)
    return out


def save_mask_png(mask: np.ndarray, path) -> None:
    """Write an 8-bit single-channel PNG, 255 = hole."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    """Read an 8-bit mask file; values above 127 become holes."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def spec_with_seed(spec: MaskSpec, seed: int | None) -> MaskSpec:
    return replace(spec, seed=seed)
