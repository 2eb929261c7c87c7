"""File I/O helpers: atomic writes, canonical JSON, PNG conversion."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write-then-rename so readers never observe a half-written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str | Path, payload: object, indent: int | None = 2) -> None:
    atomic_write_bytes(path, json.dumps(payload, indent=indent, sort_keys=True).encode())


def canonical_json_bytes(payload: object) -> bytes:
    """Canonical JSON: UTF-8, sorted keys, compact separators, no trailing newline."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Encode a (C, H, W) float image in [-1, 1] as PNG (L for C=1, RGB for C=3)."""
    arr = np.clip((image + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB")
    else:
        raise ValueError(f"unsupported channel count {arr.shape[0]}")
    import io

    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_image(payload: bytes, channels: int | None = None) -> np.ndarray:
    """Decode PNG bytes to a (C, H, W) float image in [-1, 1]."""
    import io

    pil = Image.open(io.BytesIO(payload))
    if channels == 1 or (channels is None and pil.mode in ("L", "I", "1", "P")):
        arr = np.asarray(pil.convert("L"), dtype=np.float32)[None, :, :]
    else:
        arr = np.moveaxis(np.asarray(pil.convert("RGB"), dtype=np.float32), 2, 0)
    return arr / 127.5 - 1.0


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(path, image_to_png_bytes(image))


def load_image_png(path: str | Path, channels: int | None = None) -> np.ndarray:
    return png_bytes_to_image(Path(path).read_bytes(), channels=channels)


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    """Encode a binary (H, W) mask as 8-bit PNG with 255 = editable."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    import io

    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_mask(payload: bytes) -> np.ndarray:
    """Decode an 8-bit mask PNG (255 = editable) to a binary (H, W) array."""
    import io

    arr = np.asarray(Image.open(io.BytesIO(payload)).convert("L"))
    return (arr >= 128).astype(np.uint8)
