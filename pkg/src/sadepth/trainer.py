"""Joint optimisation of the depth and pose networks."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import geometry, losses
from .data import AugmentationConfig, augment
from .errors import InvalidInputError, NonFiniteLossError
from .evaluation import EvalProtocol, evaluate_split
from .networks import (DepthNet, DepthNetConfig, PoseNet, PoseNetConfig, desk_config, load_state,
                       read_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    lr_after_decay: float = 1e-5
    decay_epoch: int = 15
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 12
    smoothness_weight: float = 1e-3
    seed: int = 0
    attention_on: bool = True
    ddv_on: bool = True
    max_steps_per_epoch: int = 0  # 0 = one pass over the data
    automask: bool = True
    identity_tiebreak_noise: float = 0.0
    static_threshold: float = 0.01
    dtype: str = "float64"
    depth: DepthNetConfig = field(default_factory=DepthNetConfig)
    pose: PoseNetConfig = field(default_factory=PoseNetConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def __post_init__(self):
        if isinstance(self.depth, dict):
            self.depth = DepthNetConfig.from_dict(self.depth)
        if isinstance(self.pose, dict):
            self.pose = PoseNetConfig(**self.pose)
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        if isinstance(self.protocol, dict):
            self.protocol = EvalProtocol(**self.protocol)
        # the top-level ablation flags are authoritative
        if self.depth.attention_on != self.attention_on or self.depth.ddv_on != self.ddv_on:
            self.depth = DepthNetConfig.from_dict({**asdict(self.depth), "attention_on": self.attention_on,
                                                   "ddv_on": self.ddv_on})
        if not (0 < self.lr_after_decay <= self.lr):
            raise InvalidInputError("need 0 < lr_after_decay <= lr")
        if self.epochs > 0 and not self.decay_epoch < self.epochs:
            raise InvalidInputError("decay_epoch must be smaller than epochs")
        if self.dtype not in DTYPES:
            raise InvalidInputError(f"dtype must be one of {sorted(DTYPES)}")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


def desk_train_config(**overrides):
    """CPU recipe for the synthetic scene: 20 epochs of batch 4 with a 10x decay at epoch 15.

    Horizontal flips are off because the synthetic camera only ever moves one
    way; flipping doubles the motion range the small pose net has to cover.
    """
    cfg = dict(epochs=20, lr=1e-3, lr_after_decay=1e-4, decay_epoch=15, batch_size=4,
               depth=desk_config(), pose=PoseNetConfig(widths=(8, 16, 32, 32)),
               augment=AugmentationConfig(flip_prob=0.0))
    cfg.update(overrides)
    return TrainConfig(**cfg)


def lr_schedule(epoch, cfg):
    """Single step decay: ``lr`` before ``decay_epoch``, ``lr_after_decay`` from then on."""
    return cfg.lr if epoch < cfg.decay_epoch else cfg.lr_after_decay


@dataclass
class Batch:
    net_frames: torch.Tensor      # B x 3 x 3 x H x W, augmented network input
    target_frames: torch.Tensor   # B x 3 x 3 x H x W, frames the loss is computed on
    intrinsics: list
    ids: list


def collate(pairs, dtype=torch.float64):
    net = torch.stack([n.frames for n, _ in pairs]).to(dtype)
    tgt = torch.stack([t.frames for _, t in pairs]).to(dtype)
    return Batch(net, tgt, [t.intrinsics for _, t in pairs], [(t.sequence, t.index) for _, t in pairs])


@dataclass
class TrainState:
    depth_net: DepthNet
    pose_net: PoseNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None
    generator: torch.Generator = None

    def named_parameters(self):
        for name, p in self.depth_net.named_parameters():
            yield f"depth/{name}", p
        for name, p in self.pose_net.named_parameters():
            yield f"pose/{name}", p


def init_state(cfg):
    dtype = DTYPES[cfg.dtype]
    torch.manual_seed(cfg.seed)
    depth_net = DepthNet(cfg.depth).to(dtype)
    pose_net = PoseNet(cfg.pose).to(dtype)
    params = list(depth_net.parameters()) + list(pose_net.parameters())
    optimizer = torch.optim.Adam(params, lr=lr_schedule(0, cfg), betas=(cfg.adam_beta1, cfg.adam_beta2))
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainState(depth_net, pose_net, optimizer, cfg, rng=np.random.default_rng(cfg.seed),
                      generator=generator)


def _synthesize(source, depth, t, intrinsics):
    if all(k == intrinsics[0] for k in intrinsics):
        return losses.synthesize_view(source, depth, t, intrinsics[0])
    out = []
    for i, k in enumerate(intrinsics):
        ti = geometry.RigidTransform(t.rotation[i:i + 1], t.translation[i:i + 1])
        out.append(losses.synthesize_view(source[i:i + 1], depth[i:i + 1], ti, k))
    return torch.cat(out)


def compute_loss(depth_net, pose_net, batch, cfg, generator=None, depth_out=None, masks=None):
    """Assemble the multi-scale photometric + smoothness objective for one batch.

    ``masks`` replaces the per-scale automasks (used to hold them fixed in
    finite-difference checks); the masks actually used are attached to the
    returned breakdown as ``breakdown.masks``.
    """
    net = batch.net_frames
    tgt = batch.target_frames
    if depth_out is None:
        depth_out = depth_net(net[:, 1])
    transforms = [pose_net.transform(net[:, 1], net[:, 0]), pose_net.transform(net[:, 1], net[:, 2])]
    target = tgt[:, 1]
    sources = [tgt[:, 0], tgt[:, 2]]
    terms, smooth, density, used = [], [], [], []
    identity_min = None
    if masks is None and cfg.automask:
        with torch.no_grad():
            identity_min = losses.min_photometric_error(target, sources)
    for s, disp in enumerate(depth_out.upsampled):
        depth = 1.0 / disp
        synthesized = [_synthesize(src, depth, t, batch.intrinsics) for src, t in zip(sources, transforms)]
        warped_min = losses.min_photometric_error(target, synthesized)
        mask = None
        if masks is not None:
            mask = masks[s]
        elif cfg.automask:
            mask = losses.mask_from_errors(warped_min.detach(), identity_min, cfg.identity_tiebreak_noise,
                                           generator)
        if mask is not None:
            density.append(mask.mean())
        used.append(mask)
        terms.append(losses.masked_mean(warped_min, mask))
        smooth.append(losses.smoothness_loss(disp, target))
    lp = sum(terms) / len(terms)
    ls = sum(smooth) / len(smooth)
    breakdown = losses.total_loss(lp, ls, cfg.smoothness_weight, terms, density)
    breakdown.masks = used
    return breakdown, depth_out


def probe_batch(triplets, dtype=torch.float64):
    """Un-augmented batch (network input == loss target) over ``triplets``."""
    return collate([(t, t) for t in triplets], dtype)


@torch.no_grad()
def probe_loss(depth_net, pose_net, batch, cfg):
    """Objective on a fixed batch in eval mode, without touching any RNG."""
    modes = depth_net.training, pose_net.training
    depth_net.eval()
    pose_net.eval()
    try:
        breakdown, _ = compute_loss(depth_net, pose_net, batch, cfg)
    finally:
        depth_net.train(modes[0])
        pose_net.train(modes[1])
    return breakdown


def _dump_batch(batch, path):
    np.savez(path, net_frames=batch.net_frames.detach().numpy(),
             target_frames=batch.target_frames.detach().numpy(),
             ids=np.array([f"{s}:{i}" for s, i in batch.ids]))


def _abort(state, batch, dump_dir, what):
    batch_id = f"epoch{state.epoch}_step{state.step}"
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / f"nonfinite_{batch_id}.npz"
        _dump_batch(batch, dump)
    raise NonFiniteLossError(f"{what} at {batch_id} (frames {batch.ids})", batch_id, dump)


def train_step(state, batch, dump_dir=None):
    """One Adam update of both networks; returns ``(state, LossBreakdown)``."""
    cfg = state.config
    state.depth_net.train()
    state.pose_net.train()
    for group in state.optimizer.param_groups:
        group["lr"] = lr_schedule(state.epoch, cfg)
    state.optimizer.zero_grad(set_to_none=False)
    depth_out = state.depth_net(batch.net_frames[:, 1])
    # a NaN disparity would otherwise surface as a depth-positivity error inside the warp
    if not all(bool(torch.isfinite(d).all()) for d in depth_out.upsampled):
        _abort(state, batch, dump_dir, "non-finite disparity")
    breakdown, _ = compute_loss(state.depth_net, state.pose_net, batch, cfg, state.generator, depth_out)
    if not math.isfinite(float(breakdown.total.detach())):
        _abort(state, batch, dump_dir, "non-finite loss")
    breakdown.total.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def iterate_batches(dataset, cfg, rng):
    """Shuffle, augment and collate one epoch; the order depends only on ``rng``."""
    order = rng.permutation(len(dataset))
    bs = cfg.batch_size
    n_batches = math.ceil(len(order) / bs)
    if cfg.max_steps_per_epoch:
        n_batches = min(n_batches, cfg.max_steps_per_epoch)
    for b in range(n_batches):
        pairs = [augment(dataset[i], cfg.augment, rng) for i in order[b * bs:(b + 1) * bs]]
        yield collate(pairs, DTYPES[cfg.dtype])


def validation_items(triplets):
    return [(t.target, t.depth) for t in triplets if t.depth is not None]


@dataclass
class FitResult:
    state: TrainState
    history: list
    best_epoch: int = -1
    best_checkpoint: Path = None
    step_log: list = field(default_factory=list)
    best_weights: tuple = None


def _snapshot(state):
    return copy.deepcopy(state.depth_net.state_dict()), copy.deepcopy(state.pose_net.state_dict())


def fit(cfg, dataset, val_items=(), out_dir=None, state=None, progress=None):
    """Train for ``cfg.epochs`` epochs and keep the epoch with the lowest validation AbsRel.

    Writes ``steps.jsonl``, per-epoch checkpoints and ``best.npz`` when
    ``out_dir`` is given. ``state`` resumes a previous run.
    """
    if len(dataset) == 0:
        raise InvalidInputError("training dataset is empty")
    state = state or init_state(cfg)
    val_items = list(val_items)
    history, step_log = [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "steps.jsonl", "a")
    else:
        log_fh = None
    best = (math.inf, -1, _snapshot(state))
    try:
        while state.epoch < cfg.epochs:
            epoch_losses = []
            for batch in iterate_batches(dataset, cfg, state.rng):
                state, breakdown = train_step(state, batch, out_dir)
                record = {"epoch": state.epoch, "step": state.step, **breakdown.as_dict()}
                step_log.append(record)
                epoch_losses.append(record["photometric"])
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if progress is not None:
                    progress(record)
            entry = {"epoch": state.epoch, "mean_photometric": float(np.mean(epoch_losses)),
                     "lr": lr_schedule(state.epoch, cfg)}
            if val_items:
                metrics, _ = evaluate_split(state.depth_net, val_items, cfg.protocol)
                entry["val"] = metrics.as_dict()
                score = metrics.abs_rel
            else:
                score = entry["mean_photometric"]
            history.append(entry)
            state.epoch += 1
            if out_dir is not None:
                save_train_state(state, out_dir / "checkpoints" / f"epoch_{state.epoch - 1:03d}.npz")
            if score < best[0]:
                best = (score, state.epoch - 1, _snapshot(state))
            log.info("epoch %d: %s", state.epoch - 1, entry)
    finally:
        if log_fh is not None:
            log_fh.close()
    result = FitResult(state, history, best[1], step_log=step_log, best_weights=best[2])
    if out_dir is not None:
        depth_net, pose_net = best_networks(result)
        result.best_checkpoint = save_checkpoint(out_dir / "best.npz", depth_net, pose_net)
        with open(out_dir / "history.json", "w") as fh:
            json.dump({"history": history, "best_epoch": best[1]}, fh, indent=2)
    return result


def best_networks(result):
    """Copies of the networks restored to the best validation epoch."""
    depth_net = copy.deepcopy(result.state.depth_net)
    pose_net = copy.deepcopy(result.state.pose_net)
    depth_net.load_state_dict(result.best_weights[0])
    pose_net.load_state_dict(result.best_weights[1])
    return depth_net, pose_net


# --------------------------------------------------------------------------
# full train-state checkpoints

def save_train_state(state, path):
    extra = {}
    names = dict((id(p), n) for n, p in state.named_parameters())
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            extra[f"optim/{name}/exp_avg"] = st["exp_avg"].detach().numpy()
            extra[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
            extra[f"optim/{name}/step"] = np.asarray(float(st["step"]))
    meta = {"epoch": state.epoch, "step": state.step, "config": state.config.to_dict(),
            "rng": state.rng.bit_generator.state,
            "generator": state.generator.get_state().numpy().tolist()}
    extra["__train_state__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    return save_checkpoint(path, state.depth_net, state.pose_net, extra)


def load_train_state(path):
    """Restore a :class:`TrainState` (networks, Adam moments, RNGs, counters) from ``path``."""
    _, arrays = read_checkpoint(path)
    meta = json.loads(arrays.pop("__train_state__").tobytes().decode())
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    load_state(state.depth_net, arrays, "depth")
    load_state(state.pose_net, arrays, "pose")
    dtype = DTYPES[cfg.dtype]
    for name, p in state.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{name}/step"])),
                "exp_avg": torch.from_numpy(np.array(arrays[key])).to(dtype),
                "exp_avg_sq": torch.from_numpy(np.array(arrays[f"optim/{name}/exp_avg_sq"])).to(dtype),
            }
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.rng.bit_generator.state = meta["rng"]
    state.generator.set_state(torch.tensor(meta["generator"], dtype=torch.uint8))
    return state
