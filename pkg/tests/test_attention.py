import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sadepth.attention import (SelfAttention, attention_output, attention_weights, export_attention_maps,
                               project_qkv)
from sadepth.errors import InvalidInputError

seeds = st.integers(0, 2**31 - 1)


def _scalar_case():
    x = torch.tensor([0.0, 1.0]).reshape(1, 1, 1, 2)
    one = torch.ones(1, 1)
    return project_qkv(x, one, one, one)


class TestProjections:
    def test_identity_query(self):
        x = torch.randn(2, 4, 3, 5)
        q, _, _ = project_qkv(x, torch.eye(4), torch.eye(4), torch.eye(4))
        assert torch.equal(q, x)

    def test_zero_query(self):
        q, _, _ = project_qkv(torch.randn(1, 3, 2, 2), torch.zeros(2, 3), torch.ones(2, 3), torch.ones(2, 3))
        assert torch.equal(q, torch.zeros(1, 2, 2, 2))

    def test_scalar_multiply(self):
        x = torch.tensor([1.0, 3.0]).reshape(1, 1, 1, 2)
        q, _, _ = project_qkv(x, torch.full((1, 1), 2.0), torch.ones(1, 1), torch.ones(1, 1))
        assert q.flatten().tolist() == [2.0, 6.0]

    def test_channel_mismatch(self):
        with pytest.raises(InvalidInputError):
            project_qkv(torch.randn(1, 3, 2, 2), torch.ones(2, 4), torch.ones(2, 3), torch.ones(2, 3))


class TestWeights:
    def test_zero_query_gives_uniform_rows(self):
        q = torch.zeros(1, 2, 3, 4)
        s = attention_weights(q, torch.randn(1, 2, 3, 4))
        assert torch.allclose(s, torch.full((1, 12, 12), 1 / 12), atol=1e-15)

    def test_single_position(self):
        s = attention_weights(torch.randn(1, 3, 1, 1), torch.randn(1, 3, 1, 1))
        assert s.tolist() == [[[1.0]]]

    def test_scalar_case(self):
        q, k, v = _scalar_case()
        s = attention_weights(q, k)
        e = math.exp(1.0)
        assert torch.allclose(s[0, 1], torch.tensor([1 / (1 + e), e / (1 + e)]), atol=1e-12)
        assert abs(float(s[0, 1, 1]) - 0.7311) < 1e-4

    def test_no_scaling_by_default(self):
        q = torch.randn(1, 16, 2, 2)
        k = torch.randn(1, 16, 2, 2)
        s = attention_weights(q, k)
        scores = q.reshape(16, 4).T @ k.reshape(16, 4)
        assert torch.allclose(s[0], torch.softmax(scores, -1))
        assert torch.allclose(attention_weights(q, k, scale_scores=True)[0], torch.softmax(scores / 4, -1))

    def test_large_scores_are_stable(self):
        q = torch.full((1, 1, 1, 3), 100.0)
        k = torch.tensor([10.0, 20.0, 30.0]).reshape(1, 1, 1, 3)
        s = attention_weights(q, k)
        assert torch.isfinite(s).all()
        assert torch.allclose(s.sum(-1), torch.ones(1, 3))

    @given(seeds)
    @settings(max_examples=25, deadline=None)
    def test_rows_are_distributions(self, seed):
        g = torch.Generator().manual_seed(seed)
        q = 3 * torch.randn(2, 5, 3, 4, generator=g)
        k = 3 * torch.randn(2, 5, 3, 4, generator=g)
        s = attention_weights(q, k)
        assert (s >= 0).all() and (s <= 1).all()
        assert torch.allclose(s.sum(-1), torch.ones(2, 12), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            attention_weights(torch.randn(1, 2, 2, 2), torch.randn(1, 2, 2, 3))


class TestOutput:
    def test_uniform_weights_give_mean(self):
        v = torch.randn(1, 3, 2, 3)
        a = attention_output(v, torch.full((1, 6, 6), 1 / 6))
        mean = v.mean(dim=(2, 3), keepdim=True).expand_as(v)
        assert torch.allclose(a, mean)

    def test_one_hot_row_selects(self):
        v = torch.randn(1, 3, 2, 2)
        s = torch.zeros(1, 4, 4)
        s[0, :, 2] = 1.0
        a = attention_output(v, s)
        for pos in range(4):
            assert torch.equal(a[0, :, pos // 2, pos % 2], v[0, :, 1, 0])

    def test_scalar_case(self):
        q, k, v = _scalar_case()
        a = attention_output(v, attention_weights(q, k))
        e = math.exp(1.0)
        assert torch.allclose(a.flatten(), torch.tensor([0.5, e / (1 + e)]), atol=1e-12)

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m, n, h, w = 3, 2, 2, 3
        x = rng.normal(size=(m, h, w))
        wf, wg, wh = (rng.normal(size=(n, m)) for _ in range(3))
        xt = torch.tensor(x)[None]
        q, k, v = project_qkv(xt, *(torch.tensor(a) for a in (wf, wg, wh)))
        s = attention_weights(q, k)
        a = attention_output(v, s)
        positions = [x[:, r, c].tolist() for r in range(h) for c in range(w)]
        s_ref, a_ref = oracles.attention(positions, wf.tolist(), wg.tolist(), wh.tolist())
        assert np.allclose(s[0].numpy(), np.array(s_ref), atol=1e-12)
        assert np.allclose(a[0].reshape(n, -1).T.numpy(), np.array(a_ref), atol=1e-12)

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_convex_hull(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 4, 3, 3, generator=g)
        w = [torch.randn(3, 4, generator=g) for _ in range(3)]
        q, k, v = project_qkv(x, *w)
        a = attention_output(v, attention_weights(q, k))
        lo = v.amin(dim=(2, 3), keepdim=True)
        hi = v.amax(dim=(2, 3), keepdim=True)
        assert (a >= lo - 1e-12).all() and (a <= hi + 1e-12).all()

    def test_permutation_equivariance(self):
        g = torch.Generator().manual_seed(7)
        x = torch.randn(1, 4, 2, 3, generator=g)
        w = [torch.randn(3, 4, generator=g) for _ in range(3)]
        perm = torch.randperm(6, generator=g)
        xp = x.reshape(1, 4, 6)[:, :, perm].reshape(1, 4, 2, 3)
        q, k, v = project_qkv(x, *w)
        qp, kp, vp = project_qkv(xp, *w)
        s, sp = attention_weights(q, k), attention_weights(qp, kp)
        assert torch.allclose(sp[0], s[0][perm][:, perm])
        a = attention_output(v, s).reshape(1, 3, 6)
        ap = attention_output(vp, sp).reshape(1, 3, 6)
        assert torch.allclose(ap, a[:, :, perm])


class TestExport:
    def test_rows_reshape_and_sum_to_one(self):
        s = attention_weights(torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4))
        maps = export_attention_maps(s, [(0, 0), (2, 3)], 3, 4)
        assert [tuple(m.shape) for m in maps] == [(3, 4), (3, 4)]
        assert torch.equal(maps[1].flatten(), s[0, 11])
        for m in maps:
            assert abs(float(m.sum()) - 1) < 1e-6

    def test_single_pixel(self):
        maps = export_attention_maps(torch.ones(1, 1, 1), [(0, 0)], 1, 1)
        assert maps[0].tolist() == [[1.0]]

    def test_scalar_case_maps(self):
        q, k, _ = _scalar_case()
        maps = export_attention_maps(attention_weights(q, k), [(0, 0), (0, 1)], 1, 2)
        assert torch.allclose(maps[0], torch.tensor([[0.5, 0.5]]))
        assert torch.allclose(maps[1], torch.tensor([[0.2689, 0.7311]]), atol=1e-4)

    def test_out_of_lattice(self):
        with pytest.raises(InvalidInputError):
            export_attention_maps(torch.ones(1, 4, 4) / 4, [(2, 0)], 2, 2)


class TestModule:
    def test_module_matches_functional(self):
        mod = SelfAttention(6, 4)
        x = torch.randn(2, 6, 3, 3)
        w = [c.weight[:, :, 0, 0] for c in (mod.query, mod.key, mod.value)]
        q, k, v = project_qkv(x, *w)
        assert torch.allclose(mod(x), attention_output(v, attention_weights(q, k)))
        assert mod.last_weights.shape == (2, 9, 9)

    def test_no_bias_parameters(self):
        names = [n for n, _ in SelfAttention(6, 4).named_parameters()]
        assert names == ["query.weight", "key.weight", "value.weight"]

    def test_disabled_is_per_position_value_map(self):
        mod = SelfAttention(6, 4, enabled=False)
        x = torch.randn(1, 6, 2, 2)
        assert torch.equal(mod(x), mod.value(x))
        assert mod.last_weights is None
