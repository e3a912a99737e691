"""Self-supervised objective: photometric reprojection with automasking plus edge-aware smoothness."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import geometry
from .errors import InvalidInputError

ALPHA = 0.85
C1 = 0.01 ** 2
C2 = 0.03 ** 2
SMOOTHNESS_WEIGHT = 1e-3


def _check_same(x, y, what):
    if x.shape != y.shape:
        raise InvalidInputError(f"{what}: shapes {tuple(x.shape)} and {tuple(y.shape)} differ")


def _box3(t):
    """Valid 3x3 mean, separable; equivalent to ``avg_pool2d(t, 3, 1)`` but much cheaper on CPU."""
    t = t[..., :, :-2] + t[..., :, 1:-1] + t[..., :, 2:]
    return (t[..., :-2, :] + t[..., 1:-1, :] + t[..., 2:, :]) / 9.0


def ssim(x, y):
    """Local SSIM map with 3x3 mean-pooled statistics and reflection padding."""
    _check_same(x, y, "ssim")
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    y = F.pad(y, (1, 1, 1, 1), mode="reflect")
    stats = _box3(torch.cat([x, y, x * x, y * y, x * y], 1))
    mu_x, mu_y, xx, yy, xy = stats.chunk(5, 1)
    sigma_x = xx - mu_x ** 2
    sigma_y = yy - mu_y ** 2
    sigma_xy = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sigma_xy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sigma_x + sigma_y + C2)
    return torch.clamp(num / den, -1.0, 1.0)


def photometric_error(target, synthesized, alpha=ALPHA):
    """Per-pixel ``alpha/2 (1 - SSIM) + (1 - alpha) |target - synthesized|``, channel-averaged."""
    _check_same(target, synthesized, "photometric_error")
    l1 = (target - synthesized).abs().mean(1, keepdim=True)
    dssim = (1.0 - ssim(target, synthesized)).mean(1, keepdim=True)
    return 0.5 * alpha * dssim + (1.0 - alpha) * l1


def synthesize_view(source, depth, t, k, return_valid=False):
    """Warp ``source`` into the target view given target ``depth`` and target-to-source ``t``."""
    grid = geometry.project(geometry.backproject(depth, k), k, t)
    out = geometry.bilinear_sample(source, grid)
    if return_valid:
        return out, grid.valid.unsqueeze(1)
    return out


def min_photometric_error(target, images):
    """Per-pixel minimum of ``pe(target, image)`` over ``images`` (evaluated as one batch)."""
    n = len(images)
    pe = photometric_error(target.repeat(n, 1, 1, 1), torch.cat(list(images), 0))
    return pe.reshape(n, *target.shape[:1], 1, *target.shape[2:]).min(0)[0]


def mask_from_errors(warped_min, identity_min, noise_std=0.0, generator=None):
    """Iverson bracket ``[warped_min < identity_min]``, optionally with tie-breaking noise."""
    with torch.no_grad():
        if noise_std > 0:
            identity_min = identity_min + noise_std * torch.randn(
                identity_min.shape, dtype=identity_min.dtype, device=identity_min.device, generator=generator)
        return (warped_min < identity_min).to(warped_min.dtype)


def automask(target, sources, synthesized, noise_std=0.0, generator=None):
    """Binary mask where the best warped error beats the best un-warped error (strict ``<``)."""
    if not sources:
        raise InvalidInputError("automask needs at least one source frame")
    with torch.no_grad():
        return mask_from_errors(min_photometric_error(target, synthesized),
                                min_photometric_error(target, sources), noise_std, generator)


def reprojection_term(target, synthesized, mask=None):
    """Mean over all pixels of ``mask * min_t' pe``; masked pixels count as zero."""
    return masked_mean(min_photometric_error(target, synthesized), mask)


def masked_mean(pe, mask=None):
    return (pe if mask is None else pe * mask).mean()


def min_reprojection_loss(target, sources, synthesized_per_scale, masks_per_scale=None):
    """Average of :func:`reprojection_term` across scales.

    ``synthesized_per_scale[s]`` is the list of warped sources for scale ``s``,
    already at input resolution. When ``masks_per_scale`` is None the automask
    is computed from ``sources``.
    """
    if len(synthesized_per_scale) == 0:
        raise InvalidInputError("empty scale set")
    terms = []
    for i, synthesized in enumerate(synthesized_per_scale):
        if masks_per_scale is None:
            mask = automask(target, sources, synthesized)
        else:
            mask = masks_per_scale[i]
        terms.append(reprojection_term(target, synthesized, mask))
    return sum(terms) / len(terms)


def smoothness_loss(disparity, image):
    """Edge-aware smoothness of the mean-normalised disparity ``B x 1 x H x W``."""
    if disparity.shape[-2:] != image.shape[-2:]:
        raise InvalidInputError("disparity and image must share the lattice")
    mean = disparity.mean(dim=(2, 3), keepdim=True)
    if bool((mean <= 0).any()):
        raise InvalidInputError("smoothness needs a positive mean disparity")
    d = disparity / mean
    loss = disparity.new_zeros(())
    if d.shape[-1] > 1:
        dx = (d[..., :, 1:] - d[..., :, :-1]).abs()
        ix = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(1, keepdim=True)
        loss = loss + (dx * torch.exp(-ix)).mean()
    if d.shape[-2] > 1:
        dy = (d[..., 1:, :] - d[..., :-1, :]).abs()
        iy = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(1, keepdim=True)
        loss = loss + (dy * torch.exp(-iy)).mean()
    return loss


@dataclass
class LossBreakdown:
    total: torch.Tensor
    photometric: torch.Tensor
    smoothness: torch.Tensor
    weight: float
    per_scale: list = field(default_factory=list)
    mask_density: list = field(default_factory=list)
    masks: list = field(default_factory=list, repr=False)

    def as_dict(self):
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return {
            "total": f(self.total),
            "photometric": f(self.photometric),
            "smoothness": f(self.smoothness),
            "weight": self.weight,
            "per_scale": [f(v) for v in self.per_scale],
            "mask_density": [f(v) for v in self.mask_density],
        }


def total_loss(photometric, smoothness, weight=SMOOTHNESS_WEIGHT, per_scale=(), mask_density=()):
    if weight < 0:
        raise InvalidInputError(f"smoothness weight must be non-negative, got {weight}")
    return LossBreakdown(photometric + weight * smoothness, photometric, smoothness, weight,
                         list(per_scale), list(mask_density))
