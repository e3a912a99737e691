"""Sequence ingestion, training augmentations and the synthetic plane-scene generator."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import geometry
from .config import num_workers
from .errors import InvalidInputError
from .geometry import Intrinsics, RigidTransform
from .io import read_f32, read_png16, write_f32

log = logging.getLogger(__name__)


class SplitParseError(ValueError):
    pass


@dataclass
class TrainingTriplet:
    """Frames ``(I_{t-1}, I_t, I_{t+1})`` stacked as a ``3 x 3 x H x W`` float tensor in [0, 1]."""
    frames: torch.Tensor
    intrinsics: Intrinsics
    sequence: str = ""
    index: int = 0
    depth: torch.Tensor = None  # optional GT depth for the centre frame, 1 x H x W

    @property
    def prev(self):
        return self.frames[0]

    @property
    def target(self):
        return self.frames[1]

    @property
    def next(self):
        return self.frames[2]


# --------------------------------------------------------------------------
# directory ingestion

def read_image(path, dtype=torch.float64):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype).contiguous()


def write_image(path, image):
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def _frame_index(seq_dir):
    index = {}
    for p in seq_dir.iterdir():
        if p.suffix.lower() in (".png", ".jpg", ".jpeg") and p.stem.isdigit():
            index[int(p.stem)] = p
    return index


def read_split(split_file):
    """Parse ``<sequence> <frame_index>`` lines; blank lines and ``#`` comments are skipped."""
    entries = []
    with open(split_file) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
                raise SplitParseError(f"{split_file}:{lineno}: expected '<sequence> <frame_index>', got {line!r}")
            entries.append((parts[0], int(parts[1])))
    return entries


def mean_abs_difference(a, b):
    return float((a - b).abs().mean())


def load_triplets(root, split_file, static_threshold=None, dtype=torch.float64, with_depth=False):
    """Yield :class:`TrainingTriplet` for each split entry that has both temporal neighbours.

    With ``static_threshold`` set, triplets whose centre frame differs from both
    neighbours by less than that mean absolute difference are dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    entries = read_split(split_file)
    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        yield from _iter_triplets(root, entries, static_threshold, dtype, with_depth, pool)
    finally:
        if pool is not None:
            pool.shutdown()


def _iter_triplets(root, entries, static_threshold, dtype, with_depth, pool):
    cache = {}
    for seq, idx in entries:
        if seq not in cache:
            seq_dir = root / seq
            if not seq_dir.is_dir():
                raise FileNotFoundError(f"sequence directory {seq_dir} does not exist")
            with open(seq_dir / "intrinsics.json") as fh:
                cache[seq] = (_frame_index(seq_dir), Intrinsics.from_dict(json.load(fh)))
        frames_by_idx, k = cache[seq]
        if not all(i in frames_by_idx for i in (idx - 1, idx, idx + 1)):
            log.warning("skipping %s %d: missing temporal neighbour", seq, idx)
            continue
        paths = [frames_by_idx[i] for i in (idx - 1, idx, idx + 1)]
        if pool is not None:
            frames = torch.stack(list(pool.map(lambda p: read_image(p, dtype), paths)))
        else:
            frames = torch.stack([read_image(p, dtype) for p in paths])
        if static_threshold is not None:
            if max(mean_abs_difference(frames[1], frames[0]),
                   mean_abs_difference(frames[1], frames[2])) < static_threshold:
                log.info("skipping static triplet %s %d", seq, idx)
                continue
        depth = read_depth(root / seq, idx, dtype) if with_depth else None
        yield TrainingTriplet(frames, k, seq, idx, depth)


def read_depth(seq_dir, idx, dtype=torch.float64):
    """GT depth ``1 x H x W`` from ``depth/<idx>.f32`` or a 16-bit ``depth/<idx>.png``; None if absent."""
    for suffix, reader in ((".f32", read_f32), (".png", read_png16)):
        path = Path(seq_dir) / "depth" / f"{idx:06d}{suffix}"
        if path.exists():
            return torch.from_numpy(np.asarray(reader(path), dtype=np.float64)).to(dtype)[None]
    return None


def load_depth_items(root, split_file, dtype=torch.float64):
    """``(image, gt_depth)`` for every split entry that has ground truth; neighbours are not needed."""
    root = Path(root)
    items = []
    for seq, idx in read_split(split_file):
        image_path = root / seq / f"{idx:06d}.png"
        if not image_path.exists():
            raise FileNotFoundError(f"image {image_path} does not exist")
        gt = read_depth(root / seq, idx, dtype)
        if gt is None:
            log.warning("skipping %s %d: no ground-truth depth", seq, idx)
            continue
        items.append((read_image(image_path, dtype), gt))
    return items


# --------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.flip_prob <= 1 and 0 <= self.jitter_prob <= 1):
            raise InvalidInputError("augmentation probabilities must lie in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise InvalidInputError("jitter ranges must be non-negative")
        if self.hue > 0.5:
            raise InvalidInputError("hue jitter is limited to half a turn")

    @classmethod
    def disabled(cls):
        return cls(flip_prob=0.0, jitter_prob=0.0)


@dataclass
class AugmentParams:
    """Concrete augmentation draw shared by the three frames of a triplet."""
    flip: bool = False
    brightness: float = None
    contrast: float = None
    saturation: float = None
    hue: float = None


def sample_augmentation(cfg, rng):
    """Draw one :class:`AugmentParams`; each op fires independently with its probability."""
    p = AugmentParams()
    p.flip = bool(rng.random() < cfg.flip_prob)
    for name in ("brightness", "contrast", "saturation"):
        fire = rng.random() < cfg.jitter_prob
        factor = rng.uniform(1 - getattr(cfg, name), 1 + getattr(cfg, name))
        if fire:
            setattr(p, name, float(factor))
    fire = rng.random() < cfg.jitter_prob
    shift = rng.uniform(-cfg.hue, cfg.hue)
    if fire:
        p.hue = float(shift)
    return p


def flip_triplet(triplet):
    frames = torch.flip(triplet.frames, dims=[-1])
    depth = None if triplet.depth is None else torch.flip(triplet.depth, dims=[-1])
    return TrainingTriplet(frames, triplet.intrinsics.flipped(), triplet.sequence, triplet.index, depth)


def color_jitter(frames, params):
    out = frames
    if params.brightness is not None:
        out = (out * params.brightness).clamp(0, 1)
    if params.contrast is not None:
        out = TF.adjust_contrast(out, params.contrast).clamp(0, 1)
    if params.saturation is not None:
        out = TF.adjust_saturation(out, params.saturation).clamp(0, 1)
    if params.hue is not None:
        out = TF.adjust_hue(out, params.hue).clamp(0, 1)
    return out


def apply_augmentation(triplet, params):
    """Return ``(net_input, loss_target)``; only the flip reaches the loss target."""
    loss_target = flip_triplet(triplet) if params.flip else triplet
    net_frames = color_jitter(loss_target.frames, params)
    net_input = TrainingTriplet(net_frames, loss_target.intrinsics, triplet.sequence, triplet.index,
                                loss_target.depth)
    return net_input, loss_target


def augment(triplet, cfg, rng):
    return apply_augmentation(triplet, sample_augmentation(cfg, rng))


# --------------------------------------------------------------------------
# synthetic scenes

@dataclass
class Plane:
    """Fronto-parallel textured rectangle at world depth ``depth``.

    ``extent`` is ``(x0, x1, y0, y1)`` in world units; ``texel`` is the world
    size of one texture pixel.
    """
    depth: float
    extent: tuple = (-1e3, 1e3, -1e3, 1e3)
    tint: tuple = (1.0, 1.0, 1.0)
    texel: float = 0.05
    flat_patches: int = 0
    textured: bool = True

    def __post_init__(self):
        self.extent = tuple(self.extent)
        self.tint = tuple(self.tint)


@dataclass
class SyntheticScene:
    """Layered fronto-parallel planes viewed by a translating camera.

    ``camera_path`` holds camera-to-world poses; when empty a straight path of
    ``frame_count`` poses with per-frame translation ``step`` is used.
    """
    planes: list
    intrinsics: Intrinsics
    frame_count: int = 60
    step: tuple = (0.2, 0.0, 0.0)
    start: tuple = (0.0, 0.0, 0.0)
    camera_path: list = field(default_factory=list)
    noise_std: float = 0.0
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        self.planes = [p if isinstance(p, Plane) else Plane(**p) for p in self.planes]
        if isinstance(self.intrinsics, dict):
            self.intrinsics = Intrinsics.from_dict(self.intrinsics)
        self.step = tuple(self.step)
        self.start = tuple(self.start)

    def validate(self):
        if not self.planes:
            raise InvalidInputError("scene needs at least one plane")
        if any(p.depth <= 0 for p in self.planes):
            raise InvalidInputError("plane depths must be positive")
        if self.frame_count < 3:
            raise InvalidInputError("a scene needs at least 3 frames")
        if self.camera_path and len(self.camera_path) != self.frame_count:
            raise InvalidInputError("camera_path length must equal frame_count")
        if self.noise_std < 0 or self.supersample < 1:
            raise InvalidInputError("noise_std must be >= 0 and supersample >= 1")

    def poses(self, dtype=torch.float64):
        if self.camera_path:
            return list(self.camera_path)
        out = []
        for j in range(self.frame_count):
            t = torch.tensor([s + j * d for s, d in zip(self.start, self.step)], dtype=dtype)
            out.append(RigidTransform(torch.eye(3, dtype=dtype), t))
        return out

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "camera_path"}
        d["planes"] = [asdict(p) for p in self.planes]
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def make_texture(rng, size, tint, flat_patches=0, textured=True):
    """Smooth multi-scale noise texture ``3 x S x S`` and its flat-region mask ``1 x S x S``."""
    if textured:
        base = np.zeros((size, size))
        for sigma, amp in ((6.0, 1.0), (2.5, 0.7), (1.2, 0.4)):
            layer = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
            base += amp * layer / (layer.std() + 1e-12)
        base = 0.5 + 0.16 * base
    else:
        base = np.full((size, size), 0.5)
    flat = np.zeros((size, size))
    for _ in range(flat_patches):
        ps = int(rng.integers(size // 6, size // 3))
        r0, c0 = rng.integers(0, size - ps, size=2)
        base[r0:r0 + ps, c0:c0 + ps] = rng.uniform(0.3, 0.7)
        flat[r0:r0 + ps, c0:c0 + ps] = 1.0
    if not textured:
        flat[:] = 1.0
    rgb = np.clip(np.stack([base * t for t in tint]), 0.0, 1.0)
    return torch.from_numpy(rgb), torch.from_numpy(flat)[None]


def _supersampled_intrinsics(k, s):
    # fine pixel f covers coarse coordinate (f + 0.5) / s - 0.5
    return Intrinsics(k.fx * s, k.fy * s, (k.cx + 0.5) * s - 0.5, (k.cy + 0.5) * s - 0.5,
                      k.width * s, k.height * s)


def _ray_cast(planes, pose, k, dtype):
    """Depth map and plane index per pixel of ``k`` for camera-to-world ``pose``."""
    rays = geometry.backproject(torch.ones(1, 1, k.height, k.width, dtype=dtype), k)[0]
    world_dir = torch.einsum("ij,jhw->ihw", pose.rotation.to(dtype), rays)
    origin = pose.translation.to(dtype)
    best = torch.full((k.height, k.width), math.inf, dtype=dtype)
    which = torch.full((k.height, k.width), -1, dtype=torch.long)
    hits = []
    for i, plane in enumerate(planes):
        dz = world_dir[2]
        lam = (plane.depth - origin[2]) / torch.where(dz.abs() > 1e-12, dz, torch.full_like(dz, 1e-12))
        x = origin[0] + lam * world_dir[0]
        y = origin[1] + lam * world_dir[1]
        x0, x1, y0, y1 = plane.extent
        hit = (lam > 0) & (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
        closer = hit & (lam < best)
        best = torch.where(closer, lam, best)
        which = torch.where(closer, torch.full_like(which, i), which)
        hits.append((x, y))
    if bool((which < 0).any()):
        raise InvalidInputError("some camera rays miss every plane; add a background plane")
    return best, which, hits


def _shade(planes, textures, which, hits, dtype):
    h, w = which.shape
    image = torch.zeros(3, h, w, dtype=dtype)
    flat = torch.zeros(1, h, w, dtype=dtype)
    for i, (plane, (tex, tex_flat)) in enumerate(zip(planes, textures)):
        sel = which == i
        if not bool(sel.any()):
            continue
        x, y = hits[i]
        x0, _, y0, _ = plane.extent
        size = tex.shape[-1]
        # textures tile with period ``size`` texels starting at the plane's corner
        u = torch.remainder((x - x0) / plane.texel, size)
        v = torch.remainder((y - y0) / plane.texel, size)
        padded = torch.cat([tex, tex_flat], 0).to(dtype)
        padded = F.pad(padded[None], (0, 1, 0, 1), mode="circular")
        grid = torch.stack([u, v], -1)[None]
        sampled = geometry.bilinear_sample(padded, grid)[0]
        image = torch.where(sel, sampled[:3], image)
        flat = torch.where(sel, sampled[3:], flat)
    return image, flat


@dataclass
class SyntheticSequence:
    frames: torch.Tensor          # N x 3 x H x W
    depths: torch.Tensor          # N x 1 x H x W
    poses: list                   # camera-to-world RigidTransform per frame
    intrinsics: Intrinsics
    flat_masks: torch.Tensor      # N x 1 x H x W, 1 inside texture-free regions

    def relative_transform(self, target, source):
        """Transform mapping points in the ``target`` camera frame into the ``source`` camera frame."""
        return geometry.compose(geometry.invert(self.poses[source]), self.poses[target])

    def triplets(self, sequence="synthetic"):
        for j in range(1, len(self.frames) - 1):
            yield TrainingTriplet(self.frames[j - 1:j + 2].clone(), self.intrinsics, sequence, j,
                                  self.depths[j].clone())


def generate_synthetic(scene, dtype=torch.float64):
    """Render every frame of ``scene`` at ``supersample``x resolution and box-downsample it.

    GT depth is evaluated analytically at the output pixel centres.
    """
    scene.validate()
    rng = np.random.default_rng(scene.seed)
    textures = [make_texture(rng, 128, p.tint, p.flat_patches, p.textured) for p in scene.planes]
    k = scene.intrinsics
    fine = _supersampled_intrinsics(k, scene.supersample)
    frames, depths, flats = [], [], []
    poses = scene.poses(dtype)
    for pose in poses:
        _, which, hits = _ray_cast(scene.planes, pose, fine, dtype)
        image, flat = _shade(scene.planes, textures, which, hits, dtype)
        s = scene.supersample
        image = F.avg_pool2d(image[None], s)[0]
        flat = F.avg_pool2d(flat[None], s)[0]
        depth, _, _ = _ray_cast(scene.planes, pose, k, dtype)
        if scene.noise_std > 0:
            noise = rng.standard_normal(image.shape) * scene.noise_std
            image = (image + torch.from_numpy(noise).to(dtype)).clamp(0, 1)
        frames.append(image)
        depths.append(depth[None])
        flats.append((flat > 0.999).to(dtype))
    return SyntheticSequence(torch.stack(frames), torch.stack(depths), poses, k, torch.stack(flats))


def default_scene(frame_count=60, seed=0, noise_std=0.0, start_x=0.0, height=64, width=96):
    """Layered desk-scale scene: a far textured wall, mid and near boxes, flat patches and flat boxes."""
    rng = np.random.default_rng(1000 + seed)
    fx = 0.6 * width
    k = Intrinsics(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height)
    planes = [Plane(depth=12.0, tint=(0.75, 0.85, 1.15), texel=0.12, flat_patches=3)]
    x = -6.0
    while x < 30.0:
        near = rng.random() < 0.5
        z = float(rng.uniform(3.5, 4.5) if near else rng.uniform(6.0, 7.5))
        w = float(rng.uniform(1.2, 2.5))
        y0 = float(rng.uniform(-2.0, 0.0))
        y1 = float(rng.uniform(0.5, 2.5))
        tint = (1.2, 0.8, 0.7) if near else (0.8, 1.15, 0.75)
        textured = rng.random() >= 0.3  # some boxes are constant-colour throughout
        planes.append(Plane(depth=z, extent=(x, x + w, y0, y1), tint=tint, texel=0.04 if near else 0.06,
                            flat_patches=1, textured=textured))
        x += w + float(rng.uniform(0.8, 2.5))
    return SyntheticScene(planes, k, frame_count=frame_count, step=(0.15, 0.0, 0.0),
                          start=(start_x, 0.0, 0.0), noise_std=noise_std, seed=seed)


def write_synthetic(seq, out_dir, sequence="synthetic", scene=None):
    """Emit ``out_dir/<sequence>/<index>.png``, ``intrinsics.json``, ``depth/<index>.f32``, ``poses.json``.

    A ``<sequence>_split.txt`` listing every frame with both neighbours is
    written next to the sequence directory.
    """
    out_dir = Path(out_dir)
    seq_dir = out_dir / sequence
    (seq_dir / "depth").mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(seq.frames):
        write_image(seq_dir / f"{j:06d}.png", frame)
        write_f32(seq_dir / "depth" / f"{j:06d}.f32", seq.depths[j, 0].numpy())
        write_image(seq_dir / "depth" / f"{j:06d}_flat.png", seq.flat_masks[j].expand(3, -1, -1))
    with open(seq_dir / "intrinsics.json", "w") as fh:
        json.dump(seq.intrinsics.to_dict(), fh, indent=2)
    poses = [{"rotation": p.rotation.tolist(), "translation": p.translation.tolist()} for p in seq.poses]
    with open(seq_dir / "poses.json", "w") as fh:
        json.dump({"convention": "camera_to_world", "poses": poses}, fh, indent=2)
    if scene is not None:
        with open(seq_dir / "scene.json", "w") as fh:
            json.dump(scene.to_dict(), fh, indent=2)
    with open(out_dir / f"{sequence}_split.txt", "w") as fh:
        for j in range(1, len(seq.frames) - 1):
            fh.write(f"{sequence} {j}\n")
    return seq_dir
