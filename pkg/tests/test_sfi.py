import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from unirgbir import oracles
from unirgbir.core import ModelConfig, MultiScaleTokens, TokenMap
from unirgbir.evaluate import grad_check
from unirgbir.sfi import (
    CrossAttend,
    DeformableAttention,
    Gate,
    GateState,
    bilinear_gather,
    bilinear_sample,
    gate_fuse,
    inject,
    reference_points,
)

LEVELS_32 = [(4, 4), (2, 2), (1, 1)]  # 32x32 image: 21 keys, 2x2 queries


def _cfg(kind, dim=8, heads=2, points=2):
    return ModelConfig(dim=dim, vit_heads=heads, deform_heads=heads, deform_points=points,
                       stem_channels=8, attention_kind=kind)


def _randomize(module, std=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.normal_(0, std)


class TestBilinear:
    def test_cell_center(self):
        level = torch.randn(3, 5, 4)
        for i in range(3):
            for j in range(5):
                p = ((j + 0.5) / 5, (i + 0.5) / 3)
                assert torch.equal(bilinear_sample(level, p), level[i, j])

    def test_horizontal_midpoint(self):
        level = torch.randn(3, 5, 4, dtype=torch.float64)
        p = (2.0 / 5, 1.5 / 3)  # halfway between cells (1, 1) and (1, 2)
        assert torch.allclose(bilinear_sample(level, p), (level[1, 1] + level[1, 2]) / 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(0, 1), st.floats(0, 1), st.floats(-3, 3))
    def test_constant_level(self, h, w, u, v, c):
        # in range = inside the hull of cell centers
        x = (0.5 + u * (w - 1)) / w
        y = (0.5 + v * (h - 1)) / h
        level = torch.full((h, w, 3), c, dtype=torch.float64)
        assert torch.allclose(bilinear_sample(level, (x, y)), torch.full((3,), c, dtype=torch.float64))

    def test_outside_is_zero_padded(self):
        level = torch.ones(2, 2, 1)
        assert bilinear_sample(level, (-1.0, 0.5)).item() == 0.0
        # half a cell beyond the left center line: left neighbour reads zero
        assert bilinear_sample(level, (0.0, 0.25)).item() == pytest.approx(0.5)

    def test_gather_matches_scalar_and_grid_sample(self):
        torch.manual_seed(0)
        h, w, d = 3, 4, 5
        level = torch.randn(h, w, d, dtype=torch.float64)
        pts = torch.rand(1, 30, 2, dtype=torch.float64) * 1.4 - 0.2
        got = bilinear_gather(level.reshape(1, h * w, d), h, w, pts)[0]
        for k in range(30):
            assert torch.allclose(got[k], bilinear_sample(level, pts[0, k].tolist()), atol=1e-12)
        gs = F.grid_sample(level.permute(2, 0, 1)[None], (2 * pts - 1)[:, :, None], mode="bilinear",
                           padding_mode="zeros", align_corners=False)
        assert torch.allclose(got, gs[0, :, :, 0].T, atol=1e-12)


def test_reference_points():
    ref = reference_points(2, 3)
    assert ref.shape == (6, 2)
    assert torch.allclose(ref[4], torch.tensor([1.5 / 3, 1.5 / 2]))


def test_deformable_pinned_state_is_mean_of_level_samples():
    torch.manual_seed(0)
    d = 8
    attn = DeformableAttention(d, heads=2, levels=3, points=2)
    # zero offsets and uniform weights are the initial state
    assert not attn.sampling_offsets.weight.any() and not attn.attention_weights.weight.any()
    with torch.no_grad():
        for lin in (attn.value_proj, attn.output_proj):
            lin.weight.copy_(torch.eye(d))
            lin.bias.zero_()
    levels = [(8, 8), (4, 4), (2, 2)]
    feats = MultiScaleTokens(torch.randn(1, 84, d), levels)
    query = torch.randn(1, 16, d)
    ref = reference_points(4, 4)
    out = attn(query, ref, feats)[0]
    for q in range(16):
        expected = sum(bilinear_sample(feats.level_map(l)[0].permute(1, 2, 0), ref[q].tolist())
                       for l in range(3)) / 3
        assert torch.allclose(out[q], expected, atol=1e-6)


def test_deformable_weights_sum_to_one():
    torch.manual_seed(1)
    attn = DeformableAttention(8, heads=2, levels=3, points=3)
    _randomize(attn, 2.0)
    feats = MultiScaleTokens(torch.randn(2, 21, 8), LEVELS_32)
    _, w = attn(torch.randn(2, 4, 8), reference_points(2, 2), feats, return_weights=True)
    assert w.shape == (2, 4, 2, 3, 3)
    assert torch.allclose(w.sum(dim=(-2, -1)), torch.ones(()), atol=1e-6)


def test_layer_norm_standardizes():
    cross = CrossAttend(_cfg("global"))
    x = torch.randn(50, 8, dtype=torch.float64) * 7 + 3
    y = cross.query_norm.double()(x)
    assert torch.allclose(y.mean(-1), torch.zeros(50, dtype=torch.float64), atol=1e-5)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(50, dtype=torch.float64), atol=1e-5)


def _oracle_case(kind, seed, levels, grid):
    torch.manual_seed(seed)
    cross = CrossAttend(_cfg(kind))
    _randomize(cross)
    n = sum(h * w for h, w in levels)
    f_vit = TokenMap(torch.randn(grid[0] * grid[1], 8), *grid)
    f_mfp = MultiScaleTokens(torch.randn(n, 8) * 2, levels)
    out = cross(f_vit, f_mfp).tokens.detach().numpy()
    ref = oracles.cross_attend(cross, f_vit.tokens.numpy(), grid, f_mfp.tokens.numpy(), levels)
    return np.abs(out - ref).max()


@pytest.mark.parametrize("seed", range(5))
def test_global_matches_oracle(seed):
    assert _oracle_case("global", seed, LEVELS_32, (2, 2)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_deformable_matches_oracle(seed):
    assert _oracle_case("deformable", seed, [(8, 8), (4, 4), (2, 2)], (4, 4)) < 1e-5


def test_cross_attend_shapes_and_errors():
    cross = CrossAttend(_cfg("deformable"))
    f_vit = TokenMap(torch.randn(3, 16, 8), 4, 4)
    f_mfp = MultiScaleTokens(torch.randn(3, 84, 8), [(8, 8), (4, 4), (2, 2)])
    out = cross(f_vit, f_mfp)
    assert out.tokens.shape == (3, 16, 8) and (out.grid_h, out.grid_w) == (4, 4)
    with pytest.raises(ValueError, match="dimension mismatch"):
        cross(f_vit, MultiScaleTokens(torch.randn(3, 84, 4), [(8, 8), (4, 4), (2, 2)]))


class TestGate:
    def test_first_position_passthrough(self):
        curr = TokenMap(torch.randn(4, 8), 2, 2)
        assert gate_fuse(curr, GateState(None, 1)) is curr

    def test_contract(self):
        t = TokenMap(torch.randn(4, 8), 2, 2)
        with pytest.raises(ValueError, match="contract"):
            GateState(t, 1)
        with pytest.raises(ValueError, match="contract"):
            GateState(None, 2)

    def test_endpoints(self):
        gate = Gate(8)
        curr = TokenMap(torch.randn(4, 8), 2, 2)
        prev = TokenMap(torch.randn(4, 8), 2, 2)
        gate.z_override = 0.0
        assert torch.equal(gate(curr, GateState(prev, 2)).tokens, curr.tokens)
        gate.z_override = 1.0
        assert torch.equal(gate(curr, GateState(prev, 2)).tokens, prev.tokens)

    def test_convexity(self):
        torch.manual_seed(0)
        gate = Gate(8)
        for _ in range(200):
            _randomize(gate, 3.0)
            curr = torch.randn(5, 8) * 4
            prev = torch.randn(5, 8) * 4
            out = gate(TokenMap(curr, 5, 1), GateState(TokenMap(prev, 5, 1), 3)).tokens
            lo, hi = torch.minimum(curr, prev), torch.maximum(curr, prev)
            assert ((out >= lo) & (out <= hi)).all()
            z = gate.weight(curr, prev)
            assert z.shape == (5, 1) and ((z >= 0) & (z <= 1)).all()


def test_inject():
    f_vit = TokenMap(torch.randn(2, 4, 8), 2, 2)
    f_sfi = TokenMap(torch.randn(2, 4, 8), 2, 2)
    assert torch.equal(inject(f_vit, f_sfi, torch.tensor(0.0)).tokens, f_vit.tokens)
    zero = TokenMap(torch.zeros(2, 4, 8), 2, 2)
    assert torch.equal(inject(f_vit, zero, torch.tensor(1.0)).tokens, f_vit.tokens)
    assert torch.allclose(inject(f_vit, f_vit, 2.0).tokens, 3 * f_vit.tokens)
    with pytest.raises(ValueError):
        inject(f_vit, TokenMap(torch.randn(2, 6, 8), 3, 2), 1.0)


@pytest.mark.parametrize("kind", ["deformable", "global"])
def test_cross_attend_gradients(kind):
    torch.manual_seed(0)
    cross = CrossAttend(_cfg(kind)).double()
    _randomize(cross, 0.3)
    vit = torch.randn(2, 4, 8, dtype=torch.float64)
    mfp = torch.randn(2, 21, 8, dtype=torch.float64)
    tensors = dict(cross.named_parameters())
    tensors.update(vit=vit, mfp=mfp)
    report = grad_check(lambda: cross(TokenMap(vit, 2, 2), MultiScaleTokens(mfp, LEVELS_32)).tokens, tensors)
    assert report.passed, str(report)


def test_gate_gradients():
    torch.manual_seed(0)
    gate = Gate(8).double()
    curr = torch.randn(4, 8, dtype=torch.float64)
    prev = torch.randn(4, 8, dtype=torch.float64)
    tensors = dict(gate.named_parameters())
    tensors.update(curr=curr, prev=prev)
    fn = lambda: gate(TokenMap(curr, 2, 2), GateState(TokenMap(prev, 2, 2), 2)).tokens  # noqa: E731
    report = grad_check(fn, tensors)
    assert report.passed, str(report)
