"""Restoration quality metrics and report assembly.

Metrics operate on (H, W, 3) arrays in [0, 1]. The report carries one row per
mask type with the column set {l1_error, psnr, ssim, fid}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import signal

from .errors import ContractError
from .generator import InpaintingGenerator, inpaint
from .losses import SubstituteFeatureExtractor
from .masks import (
    IRREGULAR,
    RECTANGULAR,
    MaskSpec,
    default_irregular_spec,
    default_rectangular_spec,
    gen_mask,
)

METRIC_FIELDS = ("l1_error", "psnr", "ssim", "fid")
MASK_KINDS = (RECTANGULAR, IRREGULAR)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def l1_error(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean absolute error over all pixels and channels."""
    y_hat, y = np.asarray(y_hat), np.asarray(y)
    if y_hat.shape != y.shape:
        raise ContractError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    return float(np.abs(y_hat - y).mean())


def psnr_from_mse(mse: float, max_val: float = 1.0) -> float:
    """10*log10(max^2 / mse); zero error maps to the +inf sentinel."""
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def psnr(y_hat: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ContractError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    return psnr_from_mse(float(((y_hat - y) ** 2).mean()), max_val)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _GRAY_WEIGHTS
    raise ContractError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(y_hat: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity with an 11x11 Gaussian window."""
    a = to_grayscale(y_hat)
    b = to_grayscale(y)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise ContractError(
            f"image {a.shape} is smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    win = _gaussian_window()
    conv = lambda x: signal.convolve2d(x, win, mode="valid")
    mu_a = conv(a)
    mu_b = conv(b)
    var_a = conv(a * a) - mu_a**2
    var_b = conv(b * b) - mu_b**2
    cov = conv(a * b) - mu_a * mu_b
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ContractError("each feature set needs at least 2 samples")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ContractError("features contain non-finite values")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(inner)
    vals = np.clip(vals, 0.0, None)  # clip small negative numerical leakage
    trace_sqrt = float(np.sqrt(vals).sum())
    value = float(
        ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt
    )
    return max(value, 0.0)


@torch.no_grad()
def extract_features(images: list[np.ndarray], extractor) -> np.ndarray:
    """Pooled deep features per image for the Frechet distance, shape (n, d)."""
    batch = torch.from_numpy(
        np.stack([np.asarray(im, dtype=np.float32) for im in images])
    ).permute(0, 3, 1, 2)
    feats = extractor(batch)[-1].mean(dim=(-2, -1))
    return feats.numpy().astype(np.float64)


@dataclass
class MetricRow:
    l1_error: float
    psnr: float
    ssim: float
    fid: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_FIELDS}


@dataclass
class MetricReport:
    rows: dict[str, MetricRow]
    sample_count: int
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "fields": list(METRIC_FIELDS),
            "rows": {kind: self.rows[kind].as_dict() for kind in self.rows},
            "sample_count": self.sample_count,
            "config": self.config,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")


def _specs_for_kind(kind: str, image_size: int) -> MaskSpec:
    if kind == RECTANGULAR:
        return default_rectangular_spec()
    if kind == IRREGULAR:
        return default_irregular_spec(image_size)
    raise ContractError(f"unknown mask kind {kind!r}")


def run_evaluation(
    inpaint_fn,
    images: list[np.ndarray],
    kinds: tuple[str, ...] = MASK_KINDS,
    seed: int = 0,
    extractor=None,
    config: dict | None = None,
) -> MetricReport:
    """Mask, inpaint, and score every image per mask type.

    ``inpaint_fn(image, mask)`` must return an (H, W, 3) array in [0, 1];
    masks are drawn from a fixed evaluation seed so reports are repeatable.
    """
    if not images:
        raise ContractError("no images to evaluate")
    if extractor is None:
        extractor = SubstituteFeatureExtractor(seed=0)
    rows = {}
    for kind in kinds:
        rng = np.random.default_rng(seed)
        spec = _specs_for_kind(kind, images[0].shape[0])
        l1s, psnrs, ssims, outputs = [], [], [], []
        for img in images:
            mask = gen_mask(spec, img.shape[0], img.shape[1], rng)
            out = inpaint_fn(img, mask)
            outputs.append(out)
            l1s.append(l1_error(out, img))
            psnrs.append(psnr(out, img))
            ssims.append(ssim(out, img))
        rows[kind] = MetricRow(
            l1_error=float(np.mean(l1s)),
            psnr=float(np.mean(psnrs)),
            ssim=float(np.mean(ssims)),
            fid=fid(extract_features(images, extractor), extract_features(outputs, extractor)),
        )
    return MetricReport(rows=rows, sample_count=len(images), config=config or {})


def evaluate_model(
    generator: InpaintingGenerator,
    images: list[np.ndarray],
    kinds: tuple[str, ...] = MASK_KINDS,
    seed: int = 0,
    extractor=None,
    config: dict | None = None,
) -> MetricReport:
    """Standard entry point: composite inpainting through a generator."""
    generator.eval()
    return run_evaluation(
        lambda img, mask: inpaint(generator, img, mask, composite=True),
        images,
        kinds=kinds,
        seed=seed,
        extractor=extractor,
        config=config,
    )
