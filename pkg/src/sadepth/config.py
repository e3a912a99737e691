"""Config files (JSON or TOML), dotted ``key=value`` overrides and strict key checking."""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from .errors import InvalidInputError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

WORKERS_ENV = "SADEPTH_NUM_WORKERS"

# alternative spellings accepted on the command line and in files
ALIASES = {
    "attention.scale_scores": "depth.scale_scores",
    "ddv.spacing": "depth.bin_spacing",
    "ddv.bins": "depth.ddv_bins",
    "loss.identity_tiebreak_noise": "identity_tiebreak_noise",
    "loss.smoothness_weight": "smoothness_weight",
}


def num_workers():
    """Worker cap from ``SADEPTH_NUM_WORKERS`` (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def load_file(path):
    """Parse a ``.toml`` or JSON config into a nested dict."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file {path} does not exist")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise InvalidInputError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: top level must be a mapping")
    return data


def parse_value(text):
    """JSON literal when it parses (numbers, booleans, lists), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.strip().lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text


def parse_override(item):
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise InvalidInputError(f"override {item!r} is not of the form key=value")
    return key.strip(), parse_value(value)


def flatten(d, prefix="", leaves=()):
    """Dotted view of a nested dict; keys listed in ``leaves`` keep dict values intact."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and _canonical(key) not in leaves:
            out.update(flatten(v, key + ".", leaves))
        else:
            out[key] = v
    return out


def _canonical(key):
    for alias, target in ALIASES.items():
        if key == alias or key.startswith(alias + "."):
            return target + key[len(alias):]
    return key


def set_dotted(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = d.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise InvalidInputError(f"cannot set {key!r}: {p!r} is not a section")
        d = nxt
    d[parts[-1]] = value


def valid_keys(cls, prefix=""):
    """Dotted leaf keys of dataclass ``cls``; nested dataclass fields become sections."""
    keys = []
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            keys.extend(valid_keys(type(default), f"{prefix}{f.name}."))
        else:
            keys.append(f"{prefix}{f.name}")
    return keys


def merge(base, overrides, allowed):
    """Apply ``overrides`` (iterable of ``(key, value)``) to ``base`` and check every dotted key.

    Returns a nested dict containing only keys from ``allowed``. Unknown keys
    raise :class:`InvalidInputError` listing the complete set of valid keys.
    """
    sections = {k.rsplit(".", 1)[0] for k in allowed if "." in k}
    resolved = {}
    items = list(flatten(base, leaves=set(allowed)).items()) + list(overrides)
    unknown = []
    for raw, value in items:
        key = _canonical(raw)
        if key in sections and isinstance(value, dict) and not value:
            continue
        if key not in allowed:
            unknown.append(raw)
            continue
        set_dotted(resolved, key, value)
    if unknown:
        raise InvalidInputError(f"unknown config keys {sorted(set(unknown))}; valid keys: {', '.join(allowed)}")
    return resolved


def resolve(build, allowed, path=None, overrides=()):
    """Config file, then ``key=value`` overrides, checked against ``allowed`` and passed to ``build``."""
    base = load_file(path) if path is not None else {}
    data = merge(base, [parse_override(o) if isinstance(o, str) else o for o in overrides], allowed)
    try:
        return build(data)
    except InvalidInputError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"invalid config: {exc}") from None


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return obj


def write_resolved(out_dir, name, obj):
    """Echo a resolved config into ``out_dir/<name>``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
    return out_dir / name
