import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sadepth.disparity_volume import (DisparityVolume, disparity_to_depth, make_bins, probabilities, softargmax,
                                      uncertainty)
from sadepth.errors import InvalidInputError

BINS4 = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)


def _pixel(logits):
    return torch.tensor(logits, dtype=torch.float64).reshape(1, -1, 1, 1)


class TestBins:
    def test_endpoints_and_midpoint(self):
        assert torch.allclose(make_bins(2, 1, 10), torch.tensor([0.1, 1.0]))
        assert torch.allclose(make_bins(3, 1, 10), torch.tensor([0.1, 0.55, 1.0]))

    def test_full_range(self):
        b = make_bins(128, 0.1, 100)
        assert b.numel() == 128
        assert abs(float(b[0]) - 0.01) < 1e-15 and abs(float(b[-1]) - 10.0) < 1e-12
        assert (b[1:] > b[:-1]).all()

    def test_log_depth_spacing(self):
        b = make_bins(5, 1, 16, spacing="linear-log-depth")
        assert torch.allclose(1 / b, torch.tensor([16.0, 8.0, 4.0, 2.0, 1.0]))

    @pytest.mark.parametrize("args", [(1, 1, 10), (4, 0, 10), (4, 10, 1), (4, 5, 5)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(InvalidInputError):
            make_bins(*args)

    def test_rejects_unknown_spacing(self):
        with pytest.raises(InvalidInputError):
            make_bins(4, 1, 10, spacing="linear-depth")


class TestSoftargmax:
    def test_uniform(self):
        assert float(softargmax(torch.zeros(1, 4, 2, 2), BINS4).unique()) == 2.5

    def test_one_hot_limit(self):
        assert abs(float(softargmax(_pixel([0, 0, 50, 0]), BINS4)) - 3.0) < 1e-6

    def test_hand_softmax(self):
        logits = [0.0, math.log(2), 0.0, 0.0]
        p = probabilities(_pixel(logits)).flatten()
        assert torch.allclose(p, torch.tensor([0.2, 0.4, 0.2, 0.2]), atol=1e-15)
        assert abs(float(softargmax(_pixel(logits), BINS4)) - 2.4) < 1e-12
        assert abs(oracles.softargmax(logits, BINS4.tolist()) - 2.4) < 1e-12

    def test_extreme_logits_are_stable(self):
        out = softargmax(_pixel([1e4, -1e4, 0, 3e3]), BINS4)
        assert float(out) == 1.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_bounded_and_shift_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = 10 * torch.randn(2, 6, 3, 3, generator=g)
        bins = make_bins(6, 0.5, 20)
        out = softargmax(logits, bins)
        assert (out >= bins[0]).all() and (out <= bins[-1]).all()
        shift = 7 * torch.randn(2, 1, 3, 3, generator=g)
        assert torch.allclose(softargmax(logits + shift, bins), out, atol=1e-9, rtol=0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_temperature_limit(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(8, generator=g)
        top2 = logits.topk(2).values
        if float(top2[0] - top2[1]) < 0.5:
            logits[logits.argmax()] = top2[1] + 0.5
        bins = make_bins(8, 1, 10)
        out = softargmax(50 * logits.reshape(1, 8, 1, 1), bins)
        assert abs(float(out) - float(bins[logits.argmax()])) < 1e-3

    def test_bin_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            softargmax(torch.zeros(1, 3, 1, 1), BINS4)


class TestUncertainty:
    def test_point_mass_is_zero(self):
        assert float(uncertainty(_pixel([0, 0, 1e4, 0]), BINS4)) == 0.0

    def test_uniform(self):
        assert abs(float(uncertainty(_pixel([0, 0, 0, 0]), BINS4)) - 1.25) < 1e-12
        assert abs(oracles.variance([0.25] * 4, BINS4.tolist()) - 1.25) < 1e-12

    def test_hand_moments(self):
        var = float(uncertainty(_pixel([0, math.log(2), 0, 0]), BINS4))
        assert abs(var - 1.04) < 1e-12
        assert abs(oracles.variance([0.2, 0.4, 0.2, 0.2], BINS4.tolist()) - 1.04) < 1e-12

    def test_zero_only_for_point_mass(self):
        assert float(uncertainty(_pixel([0, 0, 10, 0]), BINS4)) > 1e-6
        assert float(uncertainty(_pixel([0, 0, 1e3, 0]), BINS4)) < 1e-9

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_range(self, seed):
        g = torch.Generator().manual_seed(seed)
        var = uncertainty(5 * torch.randn(1, 4, 4, 4, generator=g), BINS4)
        assert (var >= 0).all() and (var <= ((4 - 1) / 2) ** 2).all()


class TestDepth:
    def test_values(self):
        assert float(disparity_to_depth(torch.tensor(0.1))) == pytest.approx(10.0, abs=1e-12)
        b = make_bins(16, 0.1, 100)
        assert float(disparity_to_depth(b[0])) == pytest.approx(100.0, rel=1e-12)

    def test_round_trip(self):
        x = torch.rand(50) + 0.01
        assert torch.allclose(disparity_to_depth(disparity_to_depth(x)), x, atol=1e-12, rtol=0)

    def test_volume_wrapper(self):
        logits = torch.randn(1, 4, 2, 2)
        vol = DisparityVolume(logits, BINS4)
        assert torch.equal(vol.disparity(), softargmax(logits, BINS4))
        assert torch.equal(vol.variance(), uncertainty(logits, BINS4))
