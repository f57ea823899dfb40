"""File formats: LMF1 latent container, binary PGM/PPM images, null tables, keys.

LMF1 layout: b"LMF1", u32 LE c, h, w, then c*h*w float64 LE values in
row-major order. Images whose channel count has no netpbm equivalent are
stored in the same container followed by a b"BDEP" + u32 LE bit-depth
trailer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from wmforge.errors import ConfigError, ShapeError
from wmforge.gaussian_shading import GsKey
from wmforge.tree_ring import TrKey

LMF_MAGIC = b"LMF1"
BDEP_MAGIC = b"BDEP"
_HEADER = struct.Struct("<4s3I")
_TRAILER = struct.Struct("<4sI")


def lmf1_bytes(z: np.ndarray, bit_depth: int | None = None) -> bytes:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"LMF1 stores one (c, h, w) tensor, got shape {z.shape}")
    body = _HEADER.pack(LMF_MAGIC, *z.shape) + np.ascontiguousarray(z, dtype="<f8").tobytes()
    if bit_depth is not None:
        body += _TRAILER.pack(BDEP_MAGIC, bit_depth)
    return body


def parse_lmf1(buf: bytes) -> tuple[np.ndarray, int | None]:
    """Tensor and optional bit depth from LMF1 bytes."""
    if len(buf) < _HEADER.size:
        raise ValueError("truncated LMF1 header")
    magic, c, h, w = _HEADER.unpack_from(buf)
    if magic != LMF_MAGIC:
        raise ValueError(f"bad LMF1 magic {magic!r}")
    n = c * h * w
    end = _HEADER.size + 8 * n
    if len(buf) < end:
        raise ValueError(f"LMF1 payload holds {len(buf) - _HEADER.size} bytes, expected {8 * n}")
    z = np.frombuffer(buf, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64).reshape(c, h, w)
    rest = buf[end:]
    if not rest:
        return z, None
    if len(rest) != _TRAILER.size or rest[:4] != BDEP_MAGIC:
        raise ValueError("unexpected bytes after LMF1 payload")
    return z, _TRAILER.unpack(rest)[1]


def save_latent(path: str | Path, z: np.ndarray) -> None:
    Path(path).write_bytes(lmf1_bytes(z))


def load_latent(path: str | Path) -> np.ndarray:
    return parse_lmf1(Path(path).read_bytes())[0]


def image_suffix(channels: int) -> str:
    return {1: ".pgm", 3: ".ppm"}.get(channels, ".lmf1")


def save_image(path: str | Path, x: np.ndarray) -> Path:
    """Write a (c, h, w) uint8 image as P5/P6, or LMF1 with a bit-depth trailer.

    The suffix of ``path`` is replaced by the one matching the channel count;
    the path actually written is returned.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"image must be (c, h, w), got {x.shape}")
    if x.dtype != np.uint8:
        raise ValueError("images must be uint8")
    path = Path(path).with_suffix(image_suffix(x.shape[0]))
    if x.shape[0] == 1:
        Image.fromarray(x[0]).save(path, format="PPM")
    elif x.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(np.moveaxis(x, 0, -1))).save(path, format="PPM")
    else:
        path.write_bytes(lmf1_bytes(x.astype(np.float64), bit_depth=8))
    return path


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == LMF_MAGIC:
        z, depth = parse_lmf1(raw)
        if depth != 8:
            raise ValueError(f"{path} is a latent, not an 8-bit image")
        return z.astype(np.uint8)
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)[None]
        if im.mode == "RGB":
            return np.moveaxis(np.asarray(im, dtype=np.uint8), -1, 0).copy()
        raise ValueError(f"{path}: unsupported image mode {im.mode}")


def save_null_table(path: str | Path, values: np.ndarray) -> None:
    vals = np.sort(np.asarray(values, dtype=np.float64))
    Path(path).write_text("distance\n" + "".join(f"{v!r}\n" for v in vals.tolist()))


def load_null_table(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().split()
    if lines and lines[0] == "distance":
        lines = lines[1:]
    return np.sort(np.array([float(v) for v in lines], dtype=np.float64))


def key_to_json(key: GsKey | TrKey) -> dict:
    doc = key.to_json()
    doc["scheme"] = "gs" if isinstance(key, GsKey) else "tr"
    return doc


def key_from_json(doc: dict, plane: tuple[int, int] | None = None) -> GsKey | TrKey:
    scheme = doc.get("scheme", "tr" if "radius" in doc else "gs")
    try:
        if scheme == "gs":
            return GsKey.from_json(doc)
        if scheme == "tr":
            if plane is None:
                raise ConfigError("a tree-ring key needs the latent plane size")
            return TrKey.from_json(doc, plane)
    except KeyError as exc:
        raise ConfigError(f"key document is missing field {exc.args[0]!r}") from None
    raise ConfigError(f"unknown key scheme {scheme!r}")


def save_key(path: str | Path, key: GsKey | TrKey) -> None:
    Path(path).write_text(json.dumps(key_to_json(key), indent=2) + "\n")


def load_key(path: str | Path, plane: tuple[int, int] | None = None) -> GsKey | TrKey:
    return key_from_json(json.loads(Path(path).read_text()), plane)
