"""PNG and raw-map input/output."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import FACES, Cubemap


def read_image(path) -> np.ndarray:
    """8- or 16-bit grayscale/RGB PNG as floats in [0, 1] (HxW or HxWx3)."""
    path = Path(path)
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0, 1)
        if mode == "RGBA":
            im = im.convert("RGB")
        elif mode not in ("L", "RGB"):
            im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        return arr / 65535.0
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """Binary mask: image intensity (channel mean for RGB) thresholded at 0.5."""
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr >= 0.5


def to_uint8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.uint8) * 255
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)


def write_png(path, arr, bits: int = 8):
    path = Path(path)
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if bits == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit output is supported for grayscale images only")
        data = np.round(np.clip(arr.astype(np.float64), 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(data).save(path)
        return path
    Image.fromarray(to_uint8(arr)).save(path)
    return path


def write_cubemap(cube: Cubemap, out_dir, stem: str) -> list[Path]:
    """Six ``<stem>_<face>.png`` files plus ``<stem>_cross.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_png(out_dir / f"{stem}_{face}.png", cube.faces[face]) for face in FACES]
    paths.append(write_png(out_dir / f"{stem}_cross.png", cube.cross()))
    return paths


def read_saliency(path) -> np.ndarray:
    """Single-channel PNG, or raw little-endian float32 with a JSON sidecar.

    The sidecar is ``<path>.json`` or ``<stem>.json`` holding ``width`` and
    ``height``.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = read_image(path)
        if arr.ndim == 3:
            raise ValueError(f"{path}: saliency map must be single-channel")
        return arr
    for side in (path.with_name(path.name + ".json"), path.with_suffix(".json")):
        if side.exists():
            meta = json.loads(side.read_text())
            break
    else:
        raise FileNotFoundError(f"{path}: raw saliency map needs a JSON sidecar with width/height")
    w, h = int(meta["width"]), int(meta["height"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} float32 values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_saliency_raw(path, arr):
    path = Path(path)
    arr = np.asarray(arr, dtype="<f4")
    arr.tofile(path)
    Path(str(path) + ".json").write_text(json.dumps({"width": arr.shape[1], "height": arr.shape[0]}))
    return path
