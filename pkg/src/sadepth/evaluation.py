"""Depth metrics (Eigen-style protocol with per-image median scaling) and split evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import io
from .attention import export_attention_maps
from .disparity_volume import disparity_to_depth, uncertainty
from .errors import InvalidInputError, ProtocolError

# column order of the usual KITTI results table, log10 appended
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3", "log10")


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    log10: float

    def as_dict(self):
        return asdict(self)

    @classmethod
    def mean(cls, items):
        items = list(items)
        if not items:
            raise ProtocolError("cannot average an empty set of metrics")
        return cls(**{f.name: float(np.mean([getattr(m, f.name) for m in items])) for f in fields(cls)})


@dataclass
class EvalProtocol:
    min_depth_clamp: float = 1e-3
    max_depth_cap: float = 80.0
    median_scaling: bool = True
    crop: tuple = None  # optional (top, bottom, left, right) fractions; None evaluates every pixel

    def __post_init__(self):
        if not (0 < self.min_depth_clamp < self.max_depth_cap):
            raise InvalidInputError("need 0 < min_depth_clamp < max_depth_cap")


def compute_metrics(pred, gt, mask=None, protocol=None):
    """Metrics over valid, in-range GT pixels of ``pred`` against ``gt`` (both ``H x W`` depth)."""
    protocol = protocol or EvalProtocol()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction {pred.shape} and GT {gt.shape} differ in shape")
    valid = (gt > protocol.min_depth_clamp) & (gt < protocol.max_depth_cap)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if protocol.crop is not None:
        h, w = gt.shape
        t, b, l, r = protocol.crop
        region = np.zeros_like(valid)
        region[int(t * h):int(b * h), int(l * w):int(r * w)] = True
        valid &= region
    if not valid.any():
        raise ProtocolError("no valid ground-truth pixels within the evaluation range")
    p = pred[valid]
    g = gt[valid]
    if protocol.median_scaling:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, protocol.min_depth_clamp, protocol.max_depth_cap)

    thresh = np.maximum(g / p, p / g)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25 ** 2)),
        a3=float(np.mean(thresh < 1.25 ** 3)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
    )


def format_table(metrics, title=None):
    """Fixed-width text table, one header row and one value row."""
    d = metrics.as_dict()
    head = " ".join(f"{n:>10}" for n in METRIC_NAMES)
    vals = " ".join(f"{d[n]:>10.4f}" for n in METRIC_NAMES)
    lines = [title] if title else []
    return "\n".join(lines + [head, vals]) + "\n"


@torch.no_grad()
def predict(depth_net, image):
    """Full-resolution disparity, depth and (DDV only) variance for a ``3 x H x W`` image."""
    was_training = depth_net.training
    depth_net.eval()
    param = next(depth_net.parameters())
    out = depth_net(image[None].to(param.dtype))
    if was_training:
        depth_net.train()
    disp = out.native[-1]
    var = uncertainty(out.logits[-1], out.bins) if out.logits else None
    return {"disparity": disp[0, 0], "depth": disparity_to_depth(disp)[0, 0],
            "uncertainty": None if var is None else var[0, 0], "attention": out.attention}


def export_prediction(out_dir, name, pred, attention_positions=None, lattice=None):
    """Write disparity / depth / uncertainty maps and optional attention maps for one image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    disp = pred["disparity"].cpu().numpy()
    io.write_png16(out_dir / f"{name}_disp.png", disp)
    io.write_f32(out_dir / f"{name}_disp.f32", disp)
    io.write_f32(out_dir / f"{name}_depth.f32", pred["depth"].cpu().numpy())
    if pred["uncertainty"] is not None:
        var = pred["uncertainty"].cpu().numpy()
        io.write_png16(out_dir / f"{name}_uncertainty.png", var)
        io.write_f32(out_dir / f"{name}_uncertainty.f32", var)
    if pred["attention"] is not None and attention_positions and lattice:
        maps = export_attention_maps(pred["attention"], attention_positions, *lattice)
        io.write_attention_maps(out_dir / f"{name}_attention", [m.cpu().numpy() for m in maps],
                                attention_positions)


def default_query_positions(h8, w8):
    return [(h8 // 2, w8 // 4), (h8 // 2, w8 // 2), (h8 // 2, 3 * w8 // 4), (h8 // 4, w8 // 2)]


def evaluate_split(depth_net, dataset, protocol=None, export_dir=None, expected_config=None):
    """Per-image metrics and their unweighted mean over ``dataset`` of ``(image, gt[, mask])``.

    ``depth_net`` may be a module or a checkpoint path.
    """
    from .networks import load_checkpoint
    if isinstance(depth_net, (str, Path)):
        depth_net, _, _ = load_checkpoint(depth_net, expected_config=expected_config)
    elif expected_config is not None and asdict(depth_net.cfg) != asdict(expected_config):
        raise InvalidInputError("network config does not match the expected config")
    protocol = protocol or EvalProtocol()
    per_image = []
    for i, item in enumerate(dataset):
        image, gt = item[0], item[1]
        mask = item[2] if len(item) > 2 else None
        pred = predict(depth_net, image)
        depth = pred["depth"]
        gt_np = np.asarray(gt.squeeze().cpu().numpy() if torch.is_tensor(gt) else gt, dtype=np.float64)
        if tuple(depth.shape) != gt_np.shape:
            depth = F.interpolate(depth[None, None], size=gt_np.shape, mode="bilinear",
                                  align_corners=False)[0, 0]
        per_image.append(compute_metrics(depth.cpu().numpy(), gt_np, mask, protocol))
        if export_dir is not None:
            cfg = depth_net.cfg
            lattice = (cfg.input_height // 8, cfg.input_width // 8)
            export_prediction(export_dir, f"{i:06d}", pred, default_query_positions(*lattice), lattice)
    if not per_image:
        raise ProtocolError("evaluation dataset is empty")
    return DepthMetrics.mean(per_image), per_image


def write_report(out_dir, aggregate, per_image, title="evaluation"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"aggregate": aggregate.as_dict(), "per_image": [m.as_dict() for m in per_image],
              "columns": list(METRIC_NAMES), "averaging": "per-image mean"}
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out_dir / "metrics.txt", "w") as fh:
        fh.write(format_table(aggregate, title))
    return report
