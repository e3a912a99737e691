"""Self-attention context module over the 1/8-resolution encoder features."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError


def project_qkv(x, w_f, w_g, w_h):
    """Per-position linear maps of ``x`` (``B x M x h x w``) by ``N x M`` matrices, no bias."""
    m = x.shape[1]
    for name, w in (("W_f", w_f), ("W_g", w_g), ("W_h", w_h)):
        if w.dim() != 2 or w.shape[1] != m:
            raise InvalidInputError(f"{name} has shape {tuple(w.shape)}, expected (N, {m})")
    query = torch.einsum("nm,bmhw->bnhw", w_f, x)
    key = torch.einsum("nm,bmhw->bnhw", w_g, x)
    value = torch.einsum("nm,bmhw->bnhw", w_h, x)
    return query, key, value


def attention_weights(query, key, scale_scores=False):
    """Row-stochastic ``B x P x P`` matrix; row ``i`` is softmax_j <query_i, key_j>."""
    if query.shape != key.shape:
        raise InvalidInputError(f"query {tuple(query.shape)} and key {tuple(key.shape)} differ")
    b, n = query.shape[:2]
    q = query.reshape(b, n, -1)
    k = key.reshape(b, n, -1)
    scores = torch.bmm(q.transpose(1, 2), k)
    if scale_scores:
        scores = scores / n ** 0.5
    # torch.softmax subtracts the row max internally
    return torch.softmax(scores, dim=-1)


def attention_output(value, s):
    """``A(i) = sum_j value(j) S[i, j]``, returned on the value lattice."""
    b, n, h, w = value.shape
    if s.shape[-1] != h * w:
        raise InvalidInputError(f"weights have {s.shape[-1]} columns, value has {h * w} positions")
    v = value.reshape(b, n, h * w)
    out = torch.bmm(v, s.transpose(1, 2))
    return out.reshape(b, n, h, w)


def export_attention_maps(s, positions, height, width):
    """Reshape the rows of ``s`` (``P x P`` or ``1 x P x P``) for each ``(row, col)`` query pixel."""
    if s.dim() == 3:
        s = s[0]
    maps = []
    for r, c in positions:
        if not (0 <= r < height and 0 <= c < width):
            raise InvalidInputError(f"query position ({r}, {c}) outside {height}x{width} lattice")
        maps.append(s[r * width + c].reshape(height, width))
    return maps


class SelfAttention(nn.Module):
    """Query/key/value attention with 1x1 projections from ``in_channels`` to ``channels``.

    With ``enabled=False`` every position attends only to itself, so the output
    is the value projection alone and the downstream shapes are unchanged.
    """

    def __init__(self, in_channels, channels, enabled=True, scale_scores=False):
        super().__init__()
        self.enabled = enabled
        self.scale_scores = scale_scores
        if enabled:
            self.query = nn.Conv2d(in_channels, channels, 1, bias=False)
            self.key = nn.Conv2d(in_channels, channels, 1, bias=False)
        self.value = nn.Conv2d(in_channels, channels, 1, bias=False)
        self.last_weights = None

    def forward(self, x):
        if not self.enabled:
            self.last_weights = None
            return self.value(x)
        w_f = self.query.weight[:, :, 0, 0]
        w_g = self.key.weight[:, :, 0, 0]
        w_h = self.value.weight[:, :, 0, 0]
        q, k, v = project_qkv(x, w_f, w_g, w_h)
        s = attention_weights(q, k, self.scale_scores)
        self.last_weights = s.detach()
        return attention_output(v, s)
