"""``sadepth`` command line: synth, train, eval, infer and gradcheck.

Exit codes are 0 on success, 1 when inputs or configs fail validation and
2 on usage errors. Failures print one JSON line on stderr before anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import config as cfgmod
from .data import (SplitParseError, default_scene, generate_synthetic, load_depth_items, load_triplets,
                   read_image, write_synthetic, SyntheticScene)
from .errors import InvalidInputError, NonFiniteLossError, ProtocolError
from .evaluation import (EvalProtocol, default_query_positions, evaluate_split, export_prediction,
                         format_table, predict, write_report)
from .networks import load_checkpoint

log = logging.getLogger("sadepth")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
COMMANDS = ("train", "eval", "infer", "synth", "gradcheck")


class UsageError(Exception):
    pass


def _error_line(kind, message):
    return json.dumps({"error": kind, "message": " ".join(str(message).split())})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# per-command configs

@dataclass
class DataConfig:
    train_split: str = "synthetic_split.txt"
    val_split: str = "synthetic_val_split.txt"  # skipped with a warning when the file is missing


@dataclass
class SynthConfig:
    sequence: str = "synthetic"
    frame_count: int = 60
    val_frame_count: int = 12
    seed: int = 0
    noise_std: float = 0.0
    height: int = 64
    width: int = 96
    scene: dict = None  # explicit scene description replacing the default layered scene

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EvalConfig:
    split: str = "synthetic_val_split.txt"
    export: bool = False
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "protocol" in d:
            d["protocol"] = EvalProtocol(**d["protocol"])
        return cls(**d)


@dataclass
class InferConfig:
    attention_positions: list = None  # (row, col) on the 1/8 lattice; None picks four defaults

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GradcheckConfig:
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _train_schema():
    from .trainer import TrainConfig
    keys = cfgmod.valid_keys(TrainConfig) + cfgmod.valid_keys(DataConfig, "data.")

    def build(d):
        d = dict(d)
        data = DataConfig(**d.pop("data", {}))
        return TrainConfig.from_dict(d), data
    return keys, build


# --------------------------------------------------------------------------
# commands

def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command} requires --{n}")


def _overrides(args, seed_key="seed"):
    items = list(args.set or [])
    if args.seed is not None:
        items.append(f"{seed_key}={args.seed}")
    return items


def cmd_synth(args):
    cfg = cfgmod.resolve(SynthConfig.from_dict, cfgmod.valid_keys(SynthConfig), args.config, _overrides(args))
    out = Path(args.out)
    if cfg.scene is not None:
        scene = SyntheticScene.from_dict(cfg.scene)
        val_scene = None
    else:
        scene = default_scene(cfg.frame_count, cfg.seed, cfg.noise_std, 0.0, cfg.height, cfg.width)
        # the held-out sequence continues the camera path past the training frames
        start_x = cfg.frame_count * scene.step[0]
        val_scene = default_scene(cfg.val_frame_count, cfg.seed, cfg.noise_std, start_x, cfg.height, cfg.width)
    scene.validate()
    write_synthetic(generate_synthetic(scene), out, cfg.sequence, scene)
    written = [cfg.sequence]
    if val_scene is not None and cfg.val_frame_count >= 3:
        write_synthetic(generate_synthetic(val_scene), out, f"{cfg.sequence}_val", val_scene)
        written.append(f"{cfg.sequence}_val")
    cfgmod.write_resolved(out, "synth_config.json", cfg)
    print(f"wrote {', '.join(written)} to {out}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import fit, load_train_state, validation_items
    _require(args, "data")
    keys, build = _train_schema()
    cfg, data_cfg = cfgmod.resolve(build, keys, args.config, _overrides(args))
    data = Path(args.data)
    train = list(load_triplets(data, data / data_cfg.train_split, cfg.static_threshold))
    if not train:
        raise InvalidInputError(f"no usable training triplets in {data / data_cfg.train_split}")
    val = []
    if (data / data_cfg.val_split).exists():
        val = validation_items(load_triplets(data, data / data_cfg.val_split, with_depth=True))
    else:
        log.warning("validation split %s not found; selecting by training loss", data / data_cfg.val_split)
    out = Path(args.out)
    cfgmod.write_resolved(out, "resolved_config.json", {**cfg.to_dict(), "data": asdict(data_cfg)})
    state = None
    if args.checkpoint is not None:
        state = load_train_state(args.checkpoint)
        if state.config.to_dict() != cfg.to_dict():
            raise InvalidInputError("resume checkpoint was written with a different config")

    def progress(record):
        log.info("epoch %d step %d: photometric %.5f total %.5f", record["epoch"], record["step"],
                 record["photometric"], record["total"])
    result = fit(cfg, train, val, out, state, progress)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"best_epoch": result.best_epoch, "best_checkpoint": str(result.best_checkpoint),
                      "final": last}))
    return EXIT_OK


def cmd_eval(args):
    _require(args, "checkpoint", "data")
    cfg = cfgmod.resolve(EvalConfig.from_dict, cfgmod.valid_keys(EvalConfig), args.config, list(args.set or []))
    data = Path(args.data)
    items = load_depth_items(data, data / cfg.split)
    depth_net, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    export = out / "maps" if cfg.export else None
    aggregate, per_image = evaluate_split(depth_net, items, cfg.protocol, export)
    cfgmod.write_resolved(out, "resolved_config.json", cfg)
    write_report(out, aggregate, per_image, title=f"{args.checkpoint} on {data / cfg.split}")
    print(format_table(aggregate), end="")
    return EXIT_OK


def _images(path):
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise InvalidInputError(f"{path} is neither an image nor a directory")
    images = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not images:
        raise InvalidInputError(f"no images in {path}")
    return images


def cmd_infer(args):
    _require(args, "checkpoint", "data")
    cfg = cfgmod.resolve(InferConfig.from_dict, cfgmod.valid_keys(InferConfig), args.config,
                         list(args.set or []))
    depth_net, _, _ = load_checkpoint(args.checkpoint)
    net_cfg = depth_net.cfg
    lattice = (net_cfg.input_height // 8, net_cfg.input_width // 8)
    positions = [tuple(p) for p in cfg.attention_positions] if cfg.attention_positions else \
        default_query_positions(*lattice)
    out = Path(args.out)
    cfgmod.write_resolved(out, "resolved_config.json", cfg)
    for path in _images(args.data):
        image = read_image(path)
        if tuple(image.shape[-2:]) != (net_cfg.input_height, net_cfg.input_width):
            image = torch.nn.functional.interpolate(image[None], size=(net_cfg.input_height, net_cfg.input_width),
                                                    mode="bilinear", align_corners=False)[0]
        export_prediction(out, path.stem, predict(depth_net, image), positions, lattice)
        print(f"{path} -> {out / path.stem}_*")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    cfg = cfgmod.resolve(GradcheckConfig.from_dict, cfgmod.valid_keys(GradcheckConfig), args.config,
                         _overrides(args))
    results = run_suite(cfg.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<28} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
              f"({r.seconds:.1f}s)")
    if args.out is not None:
        cfgmod.write_resolved(args.out, "gradcheck.json", {"config": asdict(cfg),
                                                           "results": [asdict(r) for r in results]})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ProtocolError(f"gradient checks failed: {', '.join(failed)}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def build_parser():
    parser = _Parser(prog="sadepth", description="Self-supervised monocular depth with attention and DDV.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--data", help="data root (or image / image directory for infer)")
        p.add_argument("--checkpoint", help="checkpoint to evaluate, run or resume from")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if args.seed is not None and args.command in ("eval", "infer"):
            raise UsageError(f"--seed has no effect for {args.command}")
        cfgmod.num_workers()
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(_error_line("usage", exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, ProtocolError, SplitParseError, FileNotFoundError, NonFiniteLossError) as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return EXIT_INVALID


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
