import numpy as np
import pytest
import torch

from canvasinfill.contrastive import seeded_module
from canvasinfill.errors import ContractError
from canvasinfill.generator import (
    InpaintingGenerator,
    check_multiscale_shapes,
    generator_forward,
    inpaint,
)
from canvasinfill.masks import MaskSpec, apply_mask, gen_rectangular
from helpers import toy_images


def make_generator(seed=0, use_daf=True):
    return seeded_module(seed, InpaintingGenerator, use_daf=use_daf)


class TestShapes:
    @pytest.mark.parametrize("size", [32, 64])
    def test_shape_law(self, size):
        gen = make_generator()
        out = gen(torch.rand(1, 4, size, size))
        check_multiscale_shapes(out, size, size)
        assert [out[k].shape[-1] for k in range(1, 7)] == [
            size >> s for s in range(6)
        ]

    def test_size_64_explicit(self):
        gen = make_generator()
        out = gen(torch.rand(1, 4, 64, 64))
        assert [tuple(out[k].shape[-2:]) for k in range(1, 7)] == [
            (64, 64), (32, 32), (16, 16), (8, 8), (4, 4), (2, 2),
        ]

    def test_rectangular_input(self):
        gen = make_generator()
        out = gen(torch.rand(1, 4, 32, 64))
        check_multiscale_shapes(out, 32, 64)

    def test_indivisible_size_rejected(self):
        gen = make_generator()
        with pytest.raises(ContractError):
            gen(torch.rand(1, 4, 48, 48))


class TestForward:
    def test_alpha_forced_zero_returns_projected_inputs(self):
        gen = make_generator(seed=1)
        with torch.no_grad():
            for head in gen.heads:
                head.transform[-1].weight.zero_()
                head.transform[-1].bias.fill_(-1e9)
        x = torch.rand(1, 4, 32, 32, generator=torch.Generator().manual_seed(0))
        out = gen(x)
        for k, head in zip(range(6, 0, -1), gen.heads):
            size = out[k].shape[-2:]
            from canvasinfill.daf import downscale_input

            want = downscale_input(x, tuple(size), head.input_proj)
            assert torch.equal(out[k], want)

    def test_deterministic(self):
        gen = make_generator(seed=2)
        x = torch.rand(2, 4, 32, 32, generator=torch.Generator().manual_seed(1))
        a = gen(x)
        b = gen(x)
        assert all(torch.equal(a[k], b[k]) for k in range(1, 7))

    def test_generator_forward_accepts_masked_image(self):
        gen = make_generator(seed=3)
        img = toy_images(1, size=32)[0]
        mask = gen_rectangular(MaskSpec(kind="rectangular", seed=0), 32, 32)
        out = generator_forward(gen, apply_mask(img, mask))
        check_multiscale_shapes(out, 32, 32)

    def test_plain_head_variant_runs(self):
        gen = make_generator(seed=4, use_daf=False)
        out = gen(torch.rand(1, 4, 32, 32))
        check_multiscale_shapes(out, 32, 32)

    def test_gradients_flow_to_sampled_parameters(self):
        # Full coordinate-level finite differencing is done per-head in the
        # DAF tests; here we check end-to-end analytic gradients against
        # finite differences on a few sampled coordinates.
        gen = make_generator(seed=5).double()
        x = torch.rand(1, 4, 32, 32, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

        def loss_fn():
            out = gen(x)
            return sum(out[k].mean() for k in range(1, 7))

        from helpers import finite_diff_param_check

        params = list(gen.named_parameters())
        rng = np.random.default_rng(0)
        picked = {params[i][0] for i in rng.choice(len(params), size=10, replace=False)}
        for name, p in params:
            p.requires_grad_(name in picked)
        finite_diff_param_check(gen, loss_fn, n_coords_per_param=1)
        for _, p in params:
            p.requires_grad_(True)


class TestInpaint:
    def test_composited_known_pixels_identical(self):
        gen = make_generator(seed=6)
        img = toy_images(1, size=32, seed=3)[0]
        mask = np.zeros((32, 32), np.uint8)
        out = inpaint(gen, img, mask, composite=True)
        assert np.array_equal(out, img)

    def test_output_in_unit_range(self):
        gen = make_generator(seed=7)
        img = toy_images(1, size=32, seed=4)[0]
        mask = gen_rectangular(MaskSpec(kind="rectangular", seed=1), 32, 32)
        out = inpaint(gen, img, mask)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_full_hole_shape(self):
        gen = make_generator(seed=8)
        img = toy_images(1, size=32, seed=5)[0]
        out = inpaint(gen, img, np.ones((32, 32), np.uint8))
        assert out.shape == (32, 32, 3)

    def test_no_composite_flag(self):
        gen = make_generator(seed=9)
        img = toy_images(1, size=32, seed=6)[0]
        mask = np.zeros((32, 32), np.uint8)
        out = inpaint(gen, img, mask, composite=False)
        # raw network output generally differs from the input at known pixels
        assert out.shape == (32, 32, 3)
        assert not np.array_equal(out, img)
