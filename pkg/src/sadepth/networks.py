"""Depth and pose networks.

The depth network is a dilated residual encoder whose 1/8-resolution output
feeds the self-attention context module, followed by a discrete disparity
volume (DDV) head and a three-stage up-convolution decoder that forms a new
DDV at 1/4, 1/2 and full resolution.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .attention import SelfAttention
from .disparity_volume import make_bins, softargmax
from .errors import InvalidInputError

SCALES = (8, 4, 2, 1)  # downsampling factors for the 1/8, 1/4, 1/2, 1/1 outputs


@dataclass
class DepthNetConfig:
    input_height: int = 192
    input_width: int = 640
    stem_widths: tuple = (64, 64, 128)
    stage_widths: tuple = (256, 512, 1024, 2048)
    stage_blocks: tuple = (3, 4, 27, 3)
    block: str = "bottleneck"
    dilations: tuple = (1, 1, 2, 4)
    attention_channels: int = 512
    ddv_bins: int = 128
    decoder_widths: tuple = (64, 64, 32)
    min_depth: float = 0.1
    max_depth: float = 100.0
    bin_spacing: str = "linear-disparity"
    attention_on: bool = True
    ddv_on: bool = True
    scale_scores: bool = False

    def __post_init__(self):
        for name in ("stem_widths", "stage_widths", "stage_blocks", "dilations", "decoder_widths"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.input_height % 8 or self.input_width % 8:
            raise InvalidInputError(
                f"input size {self.input_height}x{self.input_width} must be divisible by 8")
        if len(self.stem_widths) != 3 or len(self.stage_widths) != 4 or len(self.stage_blocks) != 4:
            raise InvalidInputError("expected 3 stem widths and 4 residual stages")
        if len(self.dilations) != 4 or len(self.decoder_widths) != 3:
            raise InvalidInputError("expected 4 dilations and 3 decoder widths")
        if self.block not in ("basic", "bottleneck"):
            raise InvalidInputError(f"unknown block type {self.block!r}")
        if self.ddv_bins < 2:
            raise InvalidInputError("ddv_bins must be >= 2")

    @property
    def scales(self):
        return tuple(1.0 / s for s in SCALES)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def widened(self, factor):
        """Copy with every channel width multiplied by ``factor``."""
        mul = lambda t: tuple(int(w * factor) for w in t)
        return replace(self, stem_widths=mul(self.stem_widths), stage_widths=mul(self.stage_widths),
                       attention_channels=int(self.attention_channels * factor),
                       decoder_widths=mul(self.decoder_widths))


def desk_config(**overrides):
    """Small CPU-trainable configuration (64x96 input, 16 bins)."""
    cfg = dict(input_height=64, input_width=96, stem_widths=(8, 8, 16), stage_widths=(16, 32, 32, 32),
               stage_blocks=(1, 1, 1, 1), block="basic", attention_channels=32, ddv_bins=16,
               decoder_widths=(16, 16, 8), min_depth=0.1, max_depth=100.0)
    cfg.update(overrides)
    return DepthNetConfig(**cfg)


@dataclass
class PoseNetConfig:
    widths: tuple = (16, 32, 64, 128, 256)
    output_scale: float = 0.01

    def __post_init__(self):
        self.widths = tuple(self.widths)


def conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        mid = cout // self.expansion
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class Encoder(nn.Module):
    """Three-conv stem and four residual stages; output at 1/8 resolution.

    Returns the 1/2 (stem), 1/4 (stage 1) and 1/8 (stage 4) feature maps.
    """

    def __init__(self, cfg):
        super().__init__()
        s1, s2, s3 = cfg.stem_widths
        self.stem = nn.Sequential(conv_bn_relu(3, s1, stride=2), conv_bn_relu(s1, s2), conv_bn_relu(s2, s3))
        self.pool = nn.MaxPool2d(3, 2, padding=1)
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        strides = (1, 2, 1, 1)
        cin = s3
        stages = []
        for width, n, stride, dilation in zip(cfg.stage_widths, cfg.stage_blocks, strides, cfg.dilations):
            blocks = []
            for i in range(n):
                blocks.append(block(cin, width, stride if i == 0 else 1, dilation))
                cin = width
            if n == 0 and stride != 1:
                blocks.append(nn.MaxPool2d(2, 2))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.out_channels = cin
        self.skip_channels = (s3, cfg.stage_widths[0] if cfg.stage_blocks[0] else s3)

    def forward(self, x):
        half = self.stem(x)
        quarter = self.stages[0](self.pool(half))
        out = quarter
        for stage in self.stages[1:]:
            out = stage(out)
        return half, quarter, out


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")


class DisparityHead(nn.Module):
    """DDV head (K logits + softargmax) or, with ``ddv_on=False``, a 1-channel sigmoid head."""

    def __init__(self, cin, bins, ddv_on=True):
        super().__init__()
        self.ddv_on = ddv_on
        # kept in float64 outside the module's buffers so dtype round trips never round the bin values
        self.bins = bins.to(torch.float64).clone()
        self.conv = conv3x3(cin, bins.numel() if ddv_on else 1)

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        raw = self.conv(x)
        bins = self.bins.to(raw)
        if self.ddv_on:
            return raw, softargmax(raw, bins)
        lo, hi = bins[0], bins[-1]
        disp = lo + (hi - lo) * torch.sigmoid(raw)
        return disp, disp


@dataclass
class MultiScaleDisparity:
    """Disparities for scales 1/8, 1/4, 1/2, 1/1 (coarse first)."""
    upsampled: list
    native: list
    logits: list = field(default_factory=list)
    bins: torch.Tensor = None
    attention: torch.Tensor = None


class DepthNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        bins = make_bins(cfg.ddv_bins, cfg.min_depth, cfg.max_depth, cfg.bin_spacing, dtype=torch.float64)
        self.encoder = Encoder(cfg)
        self.context = SelfAttention(self.encoder.out_channels, cfg.attention_channels,
                                     enabled=cfg.attention_on, scale_scores=cfg.scale_scores)
        self.ddv4 = DisparityHead(cfg.attention_channels, bins, cfg.ddv_on)
        half_ch, quarter_ch = self.encoder.skip_channels
        w3, w2, w1 = cfg.decoder_widths
        self.upconv3 = conv3x3(self.ddv4.out_channels, w3)
        self.deconv3 = conv3x3(w3 + quarter_ch, w3)
        self.ddv3 = DisparityHead(w3, bins, cfg.ddv_on)
        self.upconv2 = conv3x3(w3, w2)
        self.deconv2 = conv3x3(w2 + half_ch, w2)
        self.ddv2 = DisparityHead(w2, bins, cfg.ddv_on)
        self.upconv1 = conv3x3(w2, w1)
        self.deconv1 = conv3x3(w1, w1)
        self.ddv1 = DisparityHead(w1, bins, cfg.ddv_on)

    def forward(self, image):
        h, w = image.shape[-2:]
        if (h, w) != (self.cfg.input_height, self.cfg.input_width):
            raise InvalidInputError(
                f"image is {h}x{w}, network expects {self.cfg.input_height}x{self.cfg.input_width}")
        half, quarter, x = self.encoder(image)
        a = self.context(x)
        raw4, d4 = self.ddv4(a)

        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")
        y = F.elu(self.upconv3(raw4))
        y = F.elu(self.deconv3(torch.cat([up(y), quarter], 1)))
        raw3, d3 = self.ddv3(y)
        y = F.elu(self.upconv2(y))
        y = F.elu(self.deconv2(torch.cat([up(y), half], 1)))
        raw2, d2 = self.ddv2(y)
        y = F.elu(self.upconv1(y))
        y = F.elu(self.deconv1(up(y)))
        raw1, d1 = self.ddv1(y)

        native = [d4, d3, d2, d1]
        upsampled = [d if d.shape[-2:] == (h, w) else
                     F.interpolate(d, size=(h, w), mode="bilinear", align_corners=False) for d in native]
        logits = [raw4, raw3, raw2, raw1] if self.cfg.ddv_on else []
        return MultiScaleDisparity(upsampled, native, logits, self.ddv1.bins.to(x), self.context.last_weights)


class PoseNet(nn.Module):
    """Relative pose from a 6-channel frame pair; zero-initialised head gives the identity."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or PoseNetConfig()
        layers = []
        cin = 6
        for i, width in enumerate(self.cfg.widths):
            k = 7 if i == 0 else 3
            layers += [nn.Conv2d(cin, width, k, 2, padding=k // 2), nn.ReLU(inplace=True)]
            cin = width
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 6)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, frame_a, frame_b):
        if frame_a.shape != frame_b.shape:
            raise InvalidInputError(f"pose inputs differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}")
        feats = self.encoder(torch.cat([frame_a, frame_b], 1)).mean(dim=(2, 3))
        out = self.cfg.output_scale * self.head(feats)
        return out[:, :3], out[:, 3:]

    def transform(self, frame_a, frame_b):
        axis_angle, translation = self(frame_a, frame_b)
        return geometry.axis_angle_to_transform(axis_angle, translation)


def count_parameters(config_or_module):
    """Exact trainable-parameter count of a module, or of a depth network built from a config."""
    if isinstance(config_or_module, nn.Module):
        module = config_or_module
    else:
        with torch.device("meta"):
            module = DepthNet(config_or_module)
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def named_blocks(depth_net, pose_net=None):
    """Top-level named blocks used for gradient-flow and ablation checks."""
    blocks = {"encoder.stem": depth_net.encoder.stem}
    for i, stage in enumerate(depth_net.encoder.stages):
        blocks[f"encoder.stage{i + 1}"] = stage
    blocks["context"] = depth_net.context
    for name in ("ddv4", "ddv3", "ddv2", "ddv1"):
        blocks[name] = getattr(depth_net, name)
    for name in ("upconv3", "deconv3", "upconv2", "deconv2", "upconv1", "deconv1"):
        blocks[name] = getattr(depth_net, name)
    if pose_net is not None:
        blocks["pose.encoder"] = pose_net.encoder
        blocks["pose.head"] = pose_net.head
    return blocks


CONFIG_KEY = "__config__"


def save_checkpoint(path, depth_net, pose_net=None, extra=None):
    """Write parameters and buffers keyed ``depth/<name>`` / ``pose/<name>`` to an ``.npz`` archive.

    ``extra`` maps further keys to arrays (optimizer moments, RNG state, ...).
    """
    arrays = {}
    for prefix, module in (("depth", depth_net), ("pose", pose_net)):
        if module is None:
            continue
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    meta = {"depth": asdict(depth_net.cfg)}
    if pose_net is not None:
        meta["pose"] = asdict(pose_net.cfg)
    arrays[CONFIG_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop(CONFIG_KEY).tobytes().decode())
    return meta, arrays


def load_state(module, arrays, prefix):
    """Copy ``prefix/<name>`` arrays into ``module``; extra keys are ignored, missing keys raise."""
    state = module.state_dict()
    missing = [k for k in state if f"{prefix}/{k}" not in arrays]
    if missing:
        raise InvalidInputError(f"checkpoint lacks {len(missing)} {prefix} tensors, e.g. {missing[:3]}")
    new_state = {}
    for k, ref in state.items():
        arr = arrays[f"{prefix}/{k}"]
        if tuple(arr.shape) != tuple(ref.shape):
            raise InvalidInputError(f"{prefix}/{k}: checkpoint shape {arr.shape} != model {tuple(ref.shape)}")
        new_state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(new_state)


def load_checkpoint(path, dtype=torch.float64, expected_config=None):
    """Rebuild the depth (and pose, if stored) networks from an archive."""
    meta, arrays = read_checkpoint(path)
    cfg = DepthNetConfig.from_dict(meta["depth"])
    if expected_config is not None and asdict(expected_config) != asdict(cfg):
        raise InvalidInputError("checkpoint was trained with a different depth network config")
    depth_net = DepthNet(cfg).to(dtype)
    load_state(depth_net, arrays, "depth")
    pose_net = None
    if "pose" in meta:
        pose_net = PoseNet(PoseNetConfig(**meta["pose"])).to(dtype)
        load_state(pose_net, arrays, "pose")
    return depth_net, pose_net, arrays
