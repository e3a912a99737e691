"""Pinhole camera geometry and differentiable view synthesis.

Conventions used throughout the package:

* tensors are channel-first, images are ``B x C x H x W`` and depth maps are
  ``B x 1 x H x W``;
* pixel centres sit on integer coordinates, the origin is the top-left pixel,
  ``u`` indexes columns and ``v`` indexes rows;
* a :class:`RigidTransform` maps points from the frame it is expressed in to
  another frame, ``p' = R p + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

Z_EPS = 1e-7
_SMALL_ANGLE = 1e-4
# slack on the image bounds so round-off in an exact round trip (-1e-16 px) does not flag border pixels
BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    def scaled(self, s):
        """Intrinsics for an image resized by factor ``s`` (pyramid level)."""
        return Intrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                          max(1, int(round(self.width * s))), max(1, int(round(self.height * s))))

    def flipped(self):
        """Intrinsics of the horizontally mirrored image."""
        return Intrinsics(self.fx, self.fy, (self.width - 1) - self.cx, self.cy, self.width, self.height)

    def matrix(self, dtype=torch.float64, device=None):
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype, device=device)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class RigidTransform:
    """Rotation ``(..., 3, 3)`` and translation ``(..., 3)``; leading dims broadcast."""
    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None):
        eye = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        return cls(eye, torch.zeros(*batch_shape, 3, dtype=dtype, device=device))

    def apply(self, points):
        """Transform points shaped ``(..., 3)``."""
        return (self.rotation @ points.unsqueeze(-1)).squeeze(-1) + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return compose(self, other)

    def inverse(self):
        return invert(self)

    def matrix(self):
        """Homogeneous ``(..., 4, 4)`` matrix."""
        top = torch.cat([self.rotation, self.translation.unsqueeze(-1)], dim=-1)
        bottom = torch.zeros_like(top[..., :1, :])
        bottom[..., 0, 3] = 1.0
        return torch.cat([top, bottom], dim=-2)

    def is_valid(self, tol=1e-6):
        r = self.rotation
        eye = torch.eye(3, dtype=r.dtype, device=r.device)
        orth = torch.allclose(r.transpose(-1, -2) @ r, eye.expand_as(r), atol=tol)
        det = torch.allclose(torch.linalg.det(r), torch.ones((), dtype=r.dtype), atol=tol)
        return orth and det


def _skew(v):
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def axis_angle_to_transform(axis_angle, translation):
    """Rodrigues exponential of ``axis_angle`` paired with ``translation``.

    Both inputs are ``(..., 3)`` tensors. Near zero angle the sin/cos ratios are
    replaced by their Taylor series so the map and its gradient stay finite.
    """
    axis_angle = torch.as_tensor(axis_angle)
    translation = torch.as_tensor(translation, dtype=axis_angle.dtype, device=axis_angle.device)
    theta2 = (axis_angle * axis_angle).sum(-1, keepdim=True).unsqueeze(-1)
    small = theta2 < _SMALL_ANGLE ** 2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0 + theta2 ** 2 / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0 + theta2 ** 2 / 720.0, (1.0 - torch.cos(theta)) / safe2)
    k = _skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    rotation = eye + a * k + b * (k @ k)
    return RigidTransform(rotation, translation)


def compose(a, b):
    """Transform equivalent to applying ``b`` then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.apply(b.translation))


def invert(t):
    rt = t.rotation.transpose(-1, -2)
    return RigidTransform(rt, -(rt @ t.translation.unsqueeze(-1)).squeeze(-1))


def pixel_grid(height, width, dtype=torch.float64, device=None):
    """``(u, v)`` pixel coordinates, each ``H x W``."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                          torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return u, v


def backproject(depth, k):
    """Lift a ``B x 1 x H x W`` depth map to camera-frame points ``B x 3 x H x W``."""
    if depth.dim() == 2:
        depth = depth[None, None]
    if not bool((depth > 0).all()):
        raise InvalidInputError("backproject requires strictly positive depth")
    h, w = depth.shape[-2:]
    u, v = pixel_grid(h, w, depth.dtype, depth.device)
    x = (u - k.cx) / k.fx
    y = (v - k.cy) / k.fy
    rays = torch.stack([x, y, torch.ones_like(x)], dim=0)
    return depth * rays.unsqueeze(0)


@dataclass
class SampleGrid:
    """Continuous source coordinates ``B x H x W x 2`` (u, v) and a validity mask ``B x H x W``."""
    coords: torch.Tensor
    valid: torch.Tensor


def project(points, k, t=None):
    """Move ``B x 3 x H x W`` points by ``t`` and project them with ``k``.

    Pixels landing behind the camera (``z <= Z_EPS``) or outside
    ``[0, W-1] x [0, H-1]`` are flagged invalid, never dropped.
    """
    b, _, h, w = points.shape
    p = points.permute(0, 2, 3, 1)
    if t is not None:
        r = t.rotation.reshape(-1, 1, 1, 3, 3) if t.rotation.dim() == 3 else t.rotation
        tr = t.translation.reshape(-1, 1, 1, 3) if t.translation.dim() == 2 else t.translation
        p = (r @ p.unsqueeze(-1)).squeeze(-1) + tr
    z = p[..., 2]
    in_front = z > Z_EPS
    z_safe = z.clamp(min=Z_EPS)
    u = k.fx * p[..., 0] / z_safe + k.cx
    v = k.fy * p[..., 1] / z_safe + k.cy
    coords = torch.stack([u, v], dim=-1)
    inside = ((u >= -BOUNDS_TOL) & (u <= k.width - 1 + BOUNDS_TOL)
              & (v >= -BOUNDS_TOL) & (v <= k.height - 1 + BOUNDS_TOL))
    return SampleGrid(coords, in_front & inside)


def bilinear_sample(image, grid):
    """Bilinearly sample ``image`` (``B x C x H x W``) at ``grid`` pixel coordinates.

    Out-of-image coordinates are clamped to the border. Differentiable with
    respect to both the image and the coordinates; integer coordinates return
    the stored pixel values exactly.
    """
    coords = grid.coords if isinstance(grid, SampleGrid) else grid
    b, c, h, w = image.shape
    if coords.shape[0] != b:
        coords = coords.expand(b, *coords.shape[1:])
    u = coords[..., 0].clamp(0, w - 1)
    v = coords[..., 1].clamp(0, h - 1)
    u0 = u.detach().floor().clamp(max=max(w - 2, 0))
    v0 = v.detach().floor().clamp(max=max(h - 2, 0))
    a = (u - u0).unsqueeze(1)
    bw = (v - v0).unsqueeze(1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    flat = image.reshape(b, c, h * w)

    def gather(vv, uu):
        idx = (vv * w + uu).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *u.shape[1:])
    top = (1 - a) * gather(v0, u0) + a * gather(v0, u1)
    bottom = (1 - a) * gather(v1, u0) + a * gather(v1, u1)
    return (1 - bw) * top + bw * bottom
