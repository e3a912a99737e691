"""Discrete disparity volumes: bin layout, softargmax, variance and depth conversion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError

SPACINGS = ("linear-disparity", "linear-log-depth")


def make_bins(k, min_depth=0.1, max_depth=100.0, spacing="linear-disparity",
              dtype=torch.float64):
    """``k`` increasing disparity values between ``1/max_depth`` and ``1/min_depth`` inclusive."""
    if k < 2:
        raise InvalidInputError(f"need at least 2 bins, got {k}")
    if not (0 < min_depth < max_depth):
        raise InvalidInputError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    if spacing == "linear-disparity":
        return torch.linspace(1.0 / max_depth, 1.0 / min_depth, k, dtype=dtype)
    if spacing == "linear-log-depth":
        depths = torch.exp(torch.linspace(math.log(max_depth), math.log(min_depth), k, dtype=dtype))
        return 1.0 / depths
    raise InvalidInputError(f"unknown bin spacing {spacing!r}; expected one of {SPACINGS}")


def _bins_view(bins, logits):
    return bins.to(logits).reshape(1, -1, *([1] * (logits.dim() - 2)))


def probabilities(logits):
    """Softmax over the bin dimension (dim 1)."""
    return torch.softmax(logits, dim=1)


def softargmax(logits, bins):
    """Expected disparity under softmax(logits); ``B x K x H x W`` -> ``B x 1 x H x W``."""
    if logits.shape[1] != bins.numel():
        raise InvalidInputError(f"volume has {logits.shape[1]} bins, bin vector has {bins.numel()}")
    p = probabilities(logits)
    return (p * _bins_view(bins, logits)).sum(1, keepdim=True)


def uncertainty(logits, bins):
    """Per-pixel variance of the bin distribution, in squared disparity units."""
    if logits.shape[1] != bins.numel():
        raise InvalidInputError(f"volume has {logits.shape[1]} bins, bin vector has {bins.numel()}")
    p = probabilities(logits)
    b = _bins_view(bins, logits)
    mean = (p * b).sum(1, keepdim=True)
    second = (p * b * b).sum(1, keepdim=True)
    return (second - mean * mean).clamp(min=0.0)


def disparity_to_depth(disparity):
    return 1.0 / disparity


@dataclass
class DisparityVolume:
    logits: torch.Tensor
    bins: torch.Tensor

    def disparity(self):
        return softargmax(self.logits, self.bins)

    def variance(self):
        return uncertainty(self.logits, self.bins)
