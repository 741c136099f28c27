"""Shared test utilities: finite-difference checks and toy data."""

import numpy as np
import torch


def finite_diff_param_check(
    module,
    loss_fn,
    n_coords_per_param=2,
    h=1e-6,
    rtol=1e-3,
    seed=0,
):
    """Compare analytic parameter gradients against central finite differences.

    ``loss_fn()`` must evaluate a scalar from the module's current parameters.
    Samples ``n_coords_per_param`` coordinates from every parameter tensor.
    """
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    for name, param in module.named_parameters():
        if not param.requires_grad:
            continue
        flat = param.data.view(-1)
        # a None grad is an exact zero (parameter unused by the loss surface)
        grad = param.grad.view(-1) if param.grad is not None else torch.zeros_like(flat)
        n = min(n_coords_per_param, flat.numel())
        idxs = rng.choice(flat.numel(), size=n, replace=False)
        for idx in idxs:
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = orig - h
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            analytic = float(grad[idx])
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            assert rel <= rtol, (
                f"{name}[{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
            )


def finite_diff_input_check(loss_fn, x, n_coords=8, h=1e-6, rtol=1e-3, seed=0):
    """Compare d loss / d x against central finite differences at sampled coords.

    ``loss_fn(x)`` must be a deterministic scalar function of tensor ``x``.
    """
    x = x.detach().clone().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat_x = x.detach().view(-1)
    flat_g = grad.view(-1)
    rng = np.random.default_rng(seed)
    idxs = rng.choice(flat_x.numel(), size=min(n_coords, flat_x.numel()), replace=False)
    for idx in idxs:
        orig = float(flat_x[idx])
        xp = x.detach().clone()
        xp.view(-1)[idx] = orig + h
        xm = x.detach().clone()
        xm.view(-1)[idx] = orig - h
        fd = (float(loss_fn(xp).detach()) - float(loss_fn(xm).detach())) / (2 * h)
        analytic = float(flat_g[idx])
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        assert rel <= rtol, f"coord {idx}: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})"


def toy_images(n, size=32, seed=0, channels=3):
    """Structured random images: smooth gradients plus a colored rectangle."""
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        base = rng.random(channels)
        gy = rng.random(channels) - 0.5
        gx = rng.random(channels) - 0.5
        ys = np.linspace(0, 1, size)[:, None, None]
        xs = np.linspace(0, 1, size)[None, :, None]
        img = base[None, None, :] + ys * gy[None, None, :] + xs * gx[None, None, :]
        top, left = rng.integers(0, size // 2, size=2)
        side = int(rng.integers(size // 4, size // 2))
        img[top : top + side, left : left + side] = rng.random(channels)
        images.append(np.clip(img, 0.0, 1.0))
    return images


def write_toy_dataset(root, n, size=32, seed=0):
    """Write a toy image folder and return the list of file paths."""
    from PIL import Image

    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(toy_images(n, size=size, seed=seed)):
        arr = (img * 255).round().astype(np.uint8)
        p = root / f"img_{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths
