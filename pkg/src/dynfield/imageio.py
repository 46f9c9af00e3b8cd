"""PNG read/write helpers (8-bit RGB/RGBA/gray and 16-bit)."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


class ImageIOError(IOError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round an image in [0, 1] to the nearest 8-bit level, keeping float32."""
    return to_uint8(img).astype(np.float32) / np.float32(255.0)


def _swap_rb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr[..., ::-1]
    if arr.ndim == 3 and arr.shape[2] == 4:
        return arr[..., [2, 1, 0, 3]]
    return arr


def encode_png(arr: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(_swap_rb(arr)))
    if not ok:
        raise ImageIOError("PNG encoding failed")
    return buf.tobytes()


def decode_png(data: bytes) -> np.ndarray:
    arr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageIOError("not a PNG stream")
    return np.ascontiguousarray(_swap_rb(arr))


def write_png(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_png(arr))
    return path


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"missing image {path}")
    return decode_png(path.read_bytes())


def write_rgb8(path, img: np.ndarray, alpha: np.ndarray | None = None) -> Path:
    arr = to_uint8(img)
    if alpha is not None:
        arr = np.concatenate([arr, to_uint8(alpha)[..., None]], axis=-1)
    return write_png(path, arr)


def read_rgb8(path) -> np.ndarray:
    """Float32 RGB in [0, 1]; an alpha channel, if present, is dropped."""
    arr = read_png(path)
    if arr.dtype != np.uint8:
        raise ImageIOError(f"{path} is not an 8-bit image")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr[..., :3].astype(np.float32) / np.float32(255.0)


def write_gray8(path, img: np.ndarray) -> Path:
    return write_png(path, to_uint8(img))


def read_gray8(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float32) / np.float32(255.0)


def write_depth16(path, depth: np.ndarray, near: float, far: float) -> Path:
    """Depth scaled linearly from [near, far] to the full 16-bit range."""
    scaled = (np.asarray(depth, dtype=np.float64) - near) / (far - near)
    arr = np.clip(np.rint(scaled * 65535.0), 0, 65535).astype(np.uint16)
    return write_png(path, arr)


def read_depth16(path, near: float, far: float) -> np.ndarray:
    arr = read_png(path).astype(np.float64) / 65535.0
    return near + arr * (far - near)


def encode_signed16(arr: np.ndarray, limit: float) -> bytes:
    """Pack values in [-limit, limit] into a 16-bit PNG (RGB or gray)."""
    scaled = (np.asarray(arr, dtype=np.float64) + limit) / (2.0 * limit)
    return encode_png(np.clip(np.rint(scaled * 65535.0), 0, 65535).astype(np.uint16))


def decode_signed16(data: bytes, limit: float) -> np.ndarray:
    arr = decode_png(data)
    if arr.dtype != np.uint16:
        raise ImageIOError("expected a 16-bit PNG")
    return arr.astype(np.float64) / 65535.0 * (2.0 * limit) - limit
