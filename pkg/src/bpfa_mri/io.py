"""File formats: grayscale images, float64 binary arrays with JSON sidecars."""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit grayscale PNG or PGM as float64 on the [0, 255] scale.

    16-bit files are mapped linearly so that 65535 becomes 255.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        if mode in ("RGB", "RGBA"):
            arr = arr[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        else:
            arr = arr[..., 0]
    arr = arr.astype(np.float64)
    if mode in ("I;16", "I;16B", "I;16L", "I") or arr.max(initial=0) > 255:
        arr *= 255.0 / 65535.0
    return arr


def save_image(path, img, bits: int = 8) -> None:
    """Write magnitudes of ``img`` (assumed [0, 255]) as grayscale PNG or PGM.

    The format follows the suffix; values are clipped to the range.
    """
    path = Path(path)
    mag = np.clip(np.abs(np.asarray(img)), 0.0, 255.0)
    if bits == 8:
        im = Image.fromarray(np.rint(mag).astype(np.uint8), mode="L")
    elif bits == 16:
        im = Image.fromarray(np.rint(mag * (65535.0 / 255.0)).astype(np.uint16))
    else:
        raise ConfigError(f"bits must be 8 or 16, got {bits}")
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def save_array(path, arr, description: str = "", **extra) -> Path:
    """Store an array as little-endian float64 plus a ``<path>.json`` header.

    Complex arrays are interleaved (re, im). The header records ``side`` (or
    ``shape``), ``mode`` and ``description``.
    """
    path = Path(path)
    arr = np.asarray(arr)
    mode = "complex" if np.iscomplexobj(arr) else "real"
    data = arr.astype("<c16" if mode == "complex" else "<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    data.tofile(path)
    header = {"shape": list(arr.shape), "mode": mode, "description": description}
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        header["side"] = arr.shape[0]
    header.update(extra)
    sidecar(path).write_text(json.dumps(header, indent=2))
    return path


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta_path = sidecar(path)
    try:
        header = json.loads(meta_path.read_text())
        raw = np.fromfile(path, dtype="<f8")
    except OSError as exc:
        raise OSError(f"cannot read array {path}: {exc}") from exc
    if header.get("mode") == "complex":
        raw = raw.view("<c16")
    if "shape" in header:
        shape = tuple(header["shape"])
    else:
        shape = (header["side"], header["side"])
    if int(np.prod(shape)) != raw.size:
        raise ConfigError(f"{path}: header shape {shape} does not match {raw.size} stored values")
    return raw.reshape(shape).astype(raw.dtype.newbyteorder("=")), header


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
