"""Map export formats: 16-bit PNG with a scale sidecar, raw float32, attention heat maps."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

PNG16_MAX = 65535


def _sidecar(path):
    # full file name + ".json" so x.png and x.f32 never share a sidecar
    return Path(f"{path}.json")


def write_f32(path, array):
    """Raw little-endian float32 plus a JSON sidecar recording the shape."""
    array = np.ascontiguousarray(array, dtype="<f4")
    array.tofile(path)
    with open(_sidecar(path), "w") as fh:
        json.dump({"dtype": "float32", "byte_order": "little", "shape": list(array.shape)}, fh)


def read_f32(path, shape=None):
    data = np.fromfile(path, dtype="<f4")
    if shape is None and _sidecar(path).exists():
        with open(_sidecar(path)) as fh:
            shape = json.load(fh)["shape"]
    return data.reshape(shape) if shape is not None else data


def write_png16(path, array, scale=None):
    """Store ``round(array * scale)`` as 16-bit grey; ``value = pixel / scale`` per the sidecar.

    Without an explicit ``scale`` the largest value maps to 65535.
    """
    array = np.asarray(array, dtype=np.float64)
    if scale is None:
        peak = float(array.max()) if array.size else 0.0
        scale = PNG16_MAX / peak if peak > 0 else 1.0
    pixels = np.clip(np.round(array * scale), 0, PNG16_MAX).astype(np.uint16)
    Image.fromarray(pixels).save(path)
    with open(_sidecar(path), "w") as fh:
        json.dump({"scale": scale, "decode": "value = pixel / scale"}, fh)
    return scale


def read_png16(path):
    with Image.open(path) as im:
        pixels = np.asarray(im, dtype=np.float64)
    with open(_sidecar(path)) as fh:
        scale = json.load(fh)["scale"]
    return pixels / scale


def write_attention_maps(out_dir, maps, positions, prefix="attention"):
    """Write each map as an 8-bit PNG normalised by its own peak, plus ``<prefix>_index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (m, (r, c)) in enumerate(zip(maps, positions)):
        m = np.asarray(m, dtype=np.float64)
        peak = float(m.max())
        pixels = np.round(255.0 * m / peak).astype(np.uint8) if peak > 0 else np.zeros(m.shape, np.uint8)
        name = f"{prefix}_{i:03d}.png"
        Image.fromarray(pixels).save(out_dir / name)
        index.append({"file": name, "query_row": int(r), "query_col": int(c), "peak_weight": peak,
                      "height": int(m.shape[0]), "width": int(m.shape[1])})
    with open(out_dir / f"{prefix}_index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    return index
