"""Array checkpoints and 8-bit frame files.

Checkpoint layout (little-endian)::

    b"FOURDARR"                 8-byte magic
    uint64                      manifest length in bytes
    manifest                    UTF-8 JSON {"arrays": [{name, shape, offset}], "meta": {...}}
    data                        float64 arrays, offsets relative to the start of data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

MAGIC = b"FOURDARR"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InputError(f"{path}: not an array checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    data = memoryview(raw)[16 + n :]
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        buf = data[start : start + 8 * count]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})


# ----------------------------------------------------------------- frames
def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = image if image.dtype == np.uint8 else to_uint8(image)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise InputError(f"{path}: unsupported PPM header")
    w, h = (int(x) for x in parts[1].split())
    body = parts[3]
    if len(body) != w * h * 3:
        raise InputError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_png(path, image: np.ndarray) -> None:
    img = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(np.ascontiguousarray(img[..., :3]), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def export_frames(frames, directory, fmt: str = "png") -> list[Path]:
    """Write ``frame_0000.<fmt>`` ... for each frame; returns the written paths."""
    if fmt not in ("png", "ppm"):
        raise InputError(f"unknown frame format {fmt!r}")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{directory}: {exc.strerror}") from exc
    writer = write_png if fmt == "png" else write_ppm
    paths = []
    for i, frame in enumerate(frames):
        p = directory / f"frame_{i:04d}.{fmt}"
        try:
            writer(p, np.asarray(frame))
        except OSError as exc:
            raise OSError(f"{p}: {exc.strerror or exc}") from exc
        paths.append(p)
    return paths


def import_frames(directory, fmt: str = "png") -> np.ndarray:
    """Inverse of :func:`export_frames`; returns ``(n, H, W, 3)`` uint8."""
    paths = sorted(Path(directory).glob(f"frame_*.{fmt}"))
    reader = read_png if fmt == "png" else read_ppm
    if not paths:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8)
    return np.stack([reader(p) for p in paths])
