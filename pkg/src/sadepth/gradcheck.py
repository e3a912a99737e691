"""Central finite-difference checks of the autograd gradients of every differentiable kernel.

Relative error per entry is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = 1e-3 * max|n|``, so entries that are numerically zero compared with
the rest of the gradient do not dominate the statistic.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import attention, geometry, losses
from .disparity_volume import make_bins, softargmax

STEP = 1e-4
KERNEL_TOL = 1e-4
ASSEMBLED_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def numerical_gradient(fn, x, step=STEP, index=None):
    """Central differences of scalar ``fn()`` w.r.t. tensor ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    indices = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn())
            flat[i] = orig - step
            minus = float(fn())
            flat[i] = orig
            g[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    floor = 1e-3 * float(n.abs().max()) + 1e-300
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def check(fn, inputs, step=STEP):
    """Max relative error between autograd and central differences over all ``inputs``."""
    for x in inputs:
        x.grad = None
    out = fn()
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    for x, g in zip(inputs, grads):
        worst = max(worst, relative_error(g, numerical_gradient(fn, x, step)))
    return worst


def _rng(seed):
    return torch.Generator().manual_seed(seed)


def _rand(*shape, gen, lo=0.0, hi=1.0):
    return (lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=torch.float64)).requires_grad_(True)


def check_attention(seed=0):
    gen = _rng(seed)
    x = _rand(1, 4, 3, 3, gen=gen, lo=-1, hi=1)
    w = [_rand(3, 4, gen=gen, lo=-1, hi=1) for _ in range(3)]
    r = torch.rand(1, 3, 3, 3, generator=gen, dtype=torch.float64)

    def fn():
        q, k, v = attention.project_qkv(x, *w)
        return (attention.attention_output(v, attention.attention_weights(q, k)) * r).sum()
    return check(fn, [x, *w])


def check_softargmax(seed=0):
    gen = _rng(seed)
    logits = _rand(1, 6, 4, 4, gen=gen, lo=-2, hi=2)
    bins = make_bins(6, 0.5, 20.0)
    r = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    return check(lambda: (softargmax(logits, bins) * r).sum(), [logits])


def check_photometric(seed=0):
    gen = _rng(seed)
    a = _rand(1, 3, 6, 6, gen=gen)
    b = _rand(1, 3, 6, 6, gen=gen)
    r = torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64)
    return check(lambda: (losses.photometric_error(a, b) * r).sum(), [a, b])


def check_bilinear(seed=0):
    gen = _rng(seed)
    image = _rand(1, 2, 7, 8, gen=gen)
    # interior, non-integer coordinates keep every sample away from the kinks at integer positions
    u = 1.0 + 5.0 * torch.rand(1, 5, 5, generator=gen, dtype=torch.float64)
    v = 1.0 + 4.0 * torch.rand(1, 5, 5, generator=gen, dtype=torch.float64)
    coords = torch.stack([u, v], -1)
    coords = (coords.floor() + 0.1 + 0.8 * (coords - coords.floor())).requires_grad_(True)
    r = torch.rand(1, 2, 5, 5, generator=gen, dtype=torch.float64)
    return check(lambda: (geometry.bilinear_sample(image, coords) * r).sum(), [image, coords])


def check_smoothness(seed=0):
    gen = _rng(seed)
    disp = _rand(1, 1, 6, 7, gen=gen, lo=0.2, hi=1.0)
    image = torch.rand(1, 3, 6, 7, generator=gen, dtype=torch.float64)
    return check(lambda: losses.smoothness_loss(disp, image), [disp])


def _plane_scene(size=16, seed=0):
    """Small textured fronto-parallel plane seen from three laterally displaced cameras."""
    from .data import Plane, SyntheticScene, generate_synthetic
    k = geometry.Intrinsics(0.6 * size, 0.6 * size, (size - 1) / 2, (size - 1) / 2, size, size)
    scene = SyntheticScene([Plane(depth=4.0, texel=0.05)], k, frame_count=3, step=(0.1, 0.0, 0.0),
                           supersample=2, seed=seed)
    return generate_synthetic(scene)


def check_total_loss(seed=0, size=16):
    """Gradient of the assembled loss w.r.t. DDV logits on a ``size x size`` synthetic instance."""
    gen = _rng(seed)
    seq = _plane_scene(size, seed)
    k = seq.intrinsics
    bins = make_bins(8, 1.0, 20.0)
    logits = _rand(1, 8, size, size, gen=gen, lo=-1, hi=1)
    target = seq.frames[1:2]
    sources = [seq.frames[0:1], seq.frames[2:3]]
    transforms = [seq.relative_transform(1, 0), seq.relative_transform(1, 2)]

    def disparities():
        d = softargmax(logits, bins)
        coarse = F.interpolate(F.avg_pool2d(d, 2), size=(size, size), mode="bilinear", align_corners=False)
        return [coarse, d]

    def synth(disp):
        return [losses.synthesize_view(s, 1.0 / disp, t, k) for s, t in zip(sources, transforms)]

    with torch.no_grad():
        masks = [losses.automask(target, sources, synth(d)) for d in disparities()]

    def fn():
        disps = disparities()
        lp = losses.min_reprojection_loss(target, sources, [synth(d) for d in disps], masks)
        ls = sum(losses.smoothness_loss(d, target) for d in disps) / len(disps)
        return losses.total_loss(lp, ls, 1e-3).total
    return check(fn, [logits])


def check_network_loss(seed=0, n_params=16):
    """Gradient of the full training loss w.r.t. a random subset of network parameters."""
    from .networks import PoseNetConfig, desk_config
    from .trainer import Batch, TrainConfig, compute_loss, init_state
    cfg = TrainConfig(epochs=1, decay_epoch=0, batch_size=2, seed=seed,
                      depth=desk_config(input_height=16, input_width=24, ddv_bins=6,
                                        stem_widths=(4, 4, 4), stage_widths=(4, 4, 4, 4),
                                        attention_channels=4, decoder_widths=(4, 4, 4),
                                        min_depth=1.0, max_depth=20.0),
                      pose=PoseNetConfig(widths=(4, 4), output_scale=0.1))
    state = init_state(cfg)
    gen = _rng(seed + 1)
    # give the zero-initialised pose head some weight so every block carries gradient
    with torch.no_grad():
        state.pose_net.head.weight.copy_(0.5 * torch.randn(state.pose_net.head.weight.shape, generator=gen,
                                                           dtype=torch.float64))
    seq = _plane_scene(16, seed)
    frames = F.interpolate(seq.frames, size=(16, 24), mode="bilinear", align_corners=False)
    k = geometry.Intrinsics(0.6 * 24, 0.6 * 16, 11.5, 7.5, 24, 16)
    trip = torch.stack([frames, frames.flip(0)])
    batch = Batch(trip, trip, [k, k], [("a", 1), ("b", 1)])
    state.depth_net.train()
    state.pose_net.train()
    base, _ = compute_loss(state.depth_net, state.pose_net, batch, cfg)
    masks = [m.detach() if m is not None else None for m in base.masks]
    params = [p for _, p in state.named_parameters()]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    picks = torch.multinomial(sizes, n_params, replacement=True, generator=gen)

    def fn():
        return compute_loss(state.depth_net, state.pose_net, batch, cfg, masks=masks)[0].total

    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    analytic, numeric = [], []
    for pi in picks.tolist():
        p = params[pi]
        idx = int(torch.randint(p.numel(), (1,), generator=gen))
        g = grads[pi]
        analytic.append(0.0 if g is None else float(g.reshape(-1)[idx]))
        numeric.append(float(numerical_gradient(fn, p, index=[idx]).reshape(-1)[idx]))
    return relative_error(torch.tensor(analytic), torch.tensor(numeric))


KERNEL_CHECKS = {
    "attention": check_attention,
    "softargmax": check_softargmax,
    "photometric": check_photometric,
    "bilinear_warp": check_bilinear,
    "smoothness": check_smoothness,
}
ASSEMBLED_CHECKS = {
    "total_loss_ddv_logits": check_total_loss,
    "total_loss_network_params": check_network_loss,
}


def run_suite(seed=0):
    results = []
    for table, tol in ((KERNEL_CHECKS, KERNEL_TOL), (ASSEMBLED_CHECKS, ASSEMBLED_TOL)):
        for name, fn in table.items():
            t0 = time.perf_counter()
            err = fn(seed)
            results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
