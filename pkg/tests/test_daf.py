import math

import numpy as np
import pytest
import torch
from torch import nn

from canvasinfill.contrastive import seeded_module
from canvasinfill.daf import (
    DAFHead,
    PlainHead,
    blend,
    channel_gate,
    combine_map,
    downscale_input,
    global_pool,
    rescale,
)
from canvasinfill.errors import ConfigError, ContractError
from helpers import finite_diff_param_check


def make_head(channels=16, reduction=16, seed=0):
    return seeded_module(seed, DAFHead, channels, reduction=reduction)


class TestGlobalPool:
    def test_constant_channel(self):
        feat = torch.full((1, 3, 4, 4), 2.0)
        feat[0, 1] = -1.5
        z = global_pool(feat)
        assert torch.allclose(z, torch.tensor([[2.0, -1.5, 2.0]]))

    def test_arithmetic_mean(self):
        feat = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
        assert float(global_pool(feat)) == pytest.approx(2.5)

    def test_zero_map(self):
        assert global_pool(torch.zeros(1, 4, 3, 3)).abs().sum() == 0


class TestChannelGate:
    def test_zero_weights_give_half(self):
        down = nn.Linear(4, 4)
        up = nn.Linear(4, 4)
        with torch.no_grad():
            for layer in (down, up):
                layer.weight.zero_()
                layer.bias.zero_()
        w = channel_gate(torch.randn(2, 4), down, up)
        assert torch.allclose(w, torch.full((2, 4), 0.5))

    def test_identity_gate_closed_form(self):
        # r=1 with identity down/up maps: gate = sigmoid(relu(z)).
        down = nn.Linear(2, 2, bias=False)
        up = nn.Linear(2, 2, bias=False)
        with torch.no_grad():
            down.weight.copy_(torch.eye(2))
            up.weight.copy_(torch.eye(2))
        z = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64)
        down.double(), up.double()
        w = channel_gate(z, down, up).detach()
        assert float(w[0]) == pytest.approx(0.5, abs=1e-12)
        assert float(w[1]) == pytest.approx(0.75, abs=1e-12)

    def test_monotone_in_presigmoid(self):
        down = nn.Linear(3, 3, bias=False)
        up = nn.Linear(3, 3, bias=False)
        with torch.no_grad():
            down.weight.copy_(torch.eye(3))
            up.weight.copy_(torch.eye(3))
        z = torch.tensor([0.1, 0.2, 0.3])
        z_boost = z.clone()
        z_boost[1] += 0.5
        w0 = channel_gate(z, down, up)
        w1 = channel_gate(z_boost, down, up)
        assert float(w1[1]) > float(w0[1])
        assert torch.allclose(w1[[0, 2]], w0[[0, 2]])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            channel_gate(torch.zeros(5), nn.Linear(4, 2), nn.Linear(2, 4))


class TestRescale:
    def test_unit_weights_identity(self):
        feat = torch.randn(2, 3, 4, 4)
        assert torch.equal(rescale(feat, torch.ones(2, 3)), feat)

    def test_zero_weights(self):
        feat = torch.randn(1, 3, 4, 4)
        assert rescale(feat, torch.zeros(1, 3)).abs().sum() == 0

    def test_scalar_example(self):
        feat = torch.full((1, 1, 2, 2), 4.0)
        out = rescale(feat, torch.tensor([[0.5]]))
        assert torch.allclose(out, torch.full((1, 1, 2, 2), 2.0))

    def test_linearity(self):
        g = torch.Generator().manual_seed(0)
        f1 = torch.randn(1, 4, 3, 3, generator=g)
        f2 = torch.randn(1, 4, 3, 3, generator=g)
        w = torch.rand(1, 4, generator=g)
        assert torch.allclose(rescale(f1 + f2, w), rescale(f1, w) + rescale(f2, w))

    def test_commutes_with_global_pool(self):
        g = torch.Generator().manual_seed(1)
        f = torch.randn(1, 4, 5, 5, generator=g)
        w = torch.rand(1, 4, generator=g)
        assert torch.allclose(global_pool(rescale(f, w)), w * global_pool(f), atol=1e-6)


def passthrough_proj():
    """W_C fixed to copy RGB and ignore the mask channel."""
    proj = nn.Conv2d(4, 3, 1)
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.zero_()
        for c in range(3):
            proj.weight[c, c, 0, 0] = 1.0
    return proj


class TestDownscaleInput:
    def test_full_size_applies_projection_only(self):
        proj = passthrough_proj()
        x = torch.rand(1, 4, 8, 8, generator=torch.Generator().manual_seed(0))
        out = downscale_input(x, (8, 8), proj)
        assert torch.allclose(out, x[:, :3])

    def test_constant_image_invariant_at_any_scale(self):
        proj = passthrough_proj()
        x = torch.full((1, 4, 16, 16), 0.6)
        x[:, 3] = 0.0
        for size in ((16, 16), (8, 8), (4, 4), (2, 2)):
            out = downscale_input(x, size, proj)
            assert torch.allclose(out, torch.full((1, 3, *size), 0.6), atol=1e-6)

    def test_block_constant_oracle(self):
        # 4x4 image made of 2x2 constant blocks halves to exactly the block values.
        proj = passthrough_proj()
        blocks = torch.tensor([[0.1, 0.9], [0.4, 0.7]])
        x = torch.zeros(1, 4, 4, 4)
        for c in range(3):
            x[0, c] = blocks.repeat_interleave(2, 0).repeat_interleave(2, 1)
        out = downscale_input(x, (2, 2), proj)
        for c in range(3):
            assert torch.allclose(out[0, c], blocks, atol=1e-6)

    def test_invalid_target_rejected(self):
        with pytest.raises(ContractError):
            downscale_input(torch.zeros(1, 4, 8, 8), (3, 3), passthrough_proj())


class TestCombineMap:
    def _parts(self, channels=8, seed=0):
        head = seeded_module(seed, DAFHead, channels, reduction=4)
        return head.feat_proj, head.transform

    def test_zero_transform_gives_half(self):
        feat_proj, transform = self._parts()
        with torch.no_grad():
            for p in transform.parameters():
                p.zero_()
        feat = torch.randn(1, 8, 6, 6)
        x = torch.randn(1, 3, 6, 6)
        alpha = combine_map(feat, x, feat_proj, transform)
        assert torch.allclose(alpha, torch.full((1, 3, 6, 6), 0.5))

    def test_alpha_strictly_inside_unit_interval(self):
        feat_proj, transform = self._parts(seed=1)
        g = torch.Generator().manual_seed(2)
        alpha = combine_map(
            torch.randn(2, 8, 6, 6, generator=g),
            torch.randn(2, 3, 6, 6, generator=g),
            feat_proj,
            transform,
        )
        assert float(alpha.min()) > 0.0 and float(alpha.max()) < 1.0

    def test_translation_equivariance_on_interior(self):
        feat_proj, transform = self._parts(seed=3)
        g = torch.Generator().manual_seed(4)
        feat = torch.randn(1, 8, 16, 16, generator=g)
        x = torch.randn(1, 3, 16, 16, generator=g)
        a1 = combine_map(feat, x, feat_proj, transform)
        a2 = combine_map(
            torch.roll(feat, (1, 1), dims=(-2, -1)),
            torch.roll(x, (1, 1), dims=(-2, -1)),
            feat_proj,
            transform,
        )
        rolled = torch.roll(a1, (1, 1), dims=(-2, -1))
        assert torch.allclose(a2[..., 4:12, 4:12], rolled[..., 4:12, 4:12], atol=1e-6)

    def test_size_mismatch_rejected(self):
        feat_proj, transform = self._parts()
        with pytest.raises(ContractError):
            combine_map(torch.zeros(1, 8, 4, 4), torch.zeros(1, 3, 8, 8), feat_proj, transform)


class TestBlend:
    def test_endpoints(self):
        g = torch.Generator().manual_seed(5)
        synth = torch.randn(1, 3, 4, 4, generator=g)
        known = torch.randn(1, 3, 4, 4, generator=g)
        assert torch.equal(blend(torch.ones_like(synth), synth, known), synth)
        assert torch.equal(blend(torch.zeros_like(synth), synth, known), known)

    def test_midpoint(self):
        synth = torch.ones(1, 3, 2, 2)
        known = torch.zeros(1, 3, 2, 2)
        out = blend(torch.full_like(synth, 0.5), synth, known)
        assert torch.allclose(out, torch.full_like(synth, 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            blend(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 4, 4))


class TestDAFHead:
    def test_alpha_forced_to_zero_returns_projected_input(self):
        head = make_head(seed=6)
        with torch.no_grad():
            head.transform[-1].weight.zero_()
            head.transform[-1].bias.fill_(-1e9)
            head.gate_up.bias.fill_(1e9)
        g = torch.Generator().manual_seed(7)
        feat = torch.randn(1, 16, 8, 8, generator=g)
        x = torch.rand(1, 4, 16, 16, generator=g)
        parts = head.forward_parts(feat, x)
        assert torch.equal(parts.output, parts.known)
        assert torch.allclose(parts.gate, torch.ones_like(parts.gate))

    def test_output_shape_matches_feature_scale(self):
        head = make_head(channels=32, seed=8)
        feat = torch.randn(2, 32, 8, 8)
        x = torch.rand(2, 4, 32, 32)
        out = head(feat, x)
        assert out.shape == (2, 3, 8, 8)

    def test_convexity_between_blend_inputs(self):
        for seed in range(10):
            head = make_head(seed=seed)
            g = torch.Generator().manual_seed(100 + seed)
            feat = torch.randn(1, 16, 8, 8, generator=g)
            x = torch.rand(1, 4, 8, 8, generator=g)
            parts = head.forward_parts(feat, x)
            lo = torch.minimum(parts.synth, parts.known)
            hi = torch.maximum(parts.synth, parts.known)
            eps = 1e-6
            assert bool((parts.output >= lo - eps).all())
            assert bool((parts.output <= hi + eps).all())
            assert float(parts.alpha.min()) > 0 and float(parts.alpha.max()) < 1
            assert float(parts.gate.min()) > 0 and float(parts.gate.max()) < 1

    def test_deterministic(self):
        head = make_head(seed=9)
        g = torch.Generator().manual_seed(10)
        feat = torch.randn(1, 16, 4, 4, generator=g)
        x = torch.rand(1, 4, 8, 8, generator=g)
        assert torch.equal(head(feat, x), head(feat, x))

    def test_gradients_match_finite_differences(self):
        head = make_head(seed=11).double()
        g = torch.Generator().manual_seed(12)
        feat = torch.randn(1, 16, 8, 8, generator=g, dtype=torch.float64)
        x = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        probe = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
        finite_diff_param_check(head, lambda: (head(feat, x) * probe).sum())

    def test_indivisible_reduction_rejected(self):
        with pytest.raises(ConfigError):
            DAFHead(10, reduction=16)


def test_plain_head_shape():
    head = seeded_module(13, PlainHead, 16)
    out = head(torch.randn(1, 16, 8, 8), torch.rand(1, 4, 16, 16))
    assert out.shape == (1, 3, 8, 8)
