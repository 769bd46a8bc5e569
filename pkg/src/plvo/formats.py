"""Binary and text file formats.

  .dmap   "PLVO" | u8 kind (0=depth, 1=disparity) | u32le H | u32le W |
          H*W float32le row-major; non-finite values mean invalid.
  .dmap3  "PLV3" | u32le H | u32le W | H*W*3 float32le (x,y,z) row-major |
          ceil(H*W/8) validity bitmask bytes, LSB-first within each byte.
  .plvw   "PLVW" | u32le tensor count | per tensor: u32le name length,
          UTF-8 name, u32le rank, u32le dims..., float64le data.
  calib   single text line "f_u f_v c_u c_v baseline cam_height".
  images  binary PGM (P5) and PPM (P6), 8-bit, scaled to [0, 1] floats.

All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .geometry import CameraIntrinsics, DepthMap, PointMap

DMAP_MAGIC = b"PLVO"
DMAP3_MAGIC = b"PLV3"
CKPT_MAGIC = b"PLVW"

KIND_DEPTH = 0
KIND_DISPARITY = 1


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


# ---------------------------------------------------------------------------
# .dmap

def save_dmap(path, data: np.ndarray, kind: int, valid: np.ndarray | None = None):
    """Write a depth/disparity map; invalid pixels are stored as NaN."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise FormatError(f"dmap wants a 2-D map, got shape {data.shape}")
    if kind not in (KIND_DEPTH, KIND_DISPARITY):
        raise FormatError(f"unknown dmap kind {kind}")
    out = data.copy()
    if valid is not None:
        out[~np.asarray(valid, dtype=bool)] = np.nan
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<BII", kind, data.shape[0], data.shape[1]))
        fh.write(out.astype("<f4").tobytes())


def load_dmap(path):
    """Read a .dmap file; returns (kind, data float32 [H,W], valid [H,W])."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != DMAP_MAGIC:
            raise FormatError(f"{path}: bad magic, expected PLVO")
        kind, h, w = struct.unpack("<BII", _read_exact(fh, 9, "header"))
        if kind not in (KIND_DEPTH, KIND_DISPARITY):
            raise FormatError(f"{path}: unknown kind byte {kind}")
        if h == 0 or w == 0:
            raise FormatError(f"{path}: zero dimension {h}x{w}")
        raw = _read_exact(fh, h * w * 4, f"{h}x{w} float payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {h}x{w} payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
    valid = np.isfinite(data)
    data = np.where(valid, data, np.float32(0.0))
    return kind, data, valid


def load_depth(path, intr: CameraIntrinsics, eps: float = 1e-3) -> DepthMap:
    """Load a .dmap as metric depth, converting disparity via Z = f*b/d."""
    kind, data, valid = load_dmap(path)
    if kind == KIND_DISPARITY:
        from .geometry import disparity_to_depth
        return disparity_to_depth(data.astype(np.float64), intr, valid=valid, eps=eps)
    ok = valid & (data > 0)
    return DepthMap(np.where(ok, data, 0.0).astype(np.float64), ok)


# ---------------------------------------------------------------------------
# .dmap3

def save_dmap3(path, pm: PointMap):
    h, w = pm.size
    bits = np.packbits(pm.valid.reshape(-1), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(DMAP3_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(pm.points.astype("<f4").tobytes())
        fh.write(bits.tobytes())


def load_dmap3(path) -> PointMap:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != DMAP3_MAGIC:
            raise FormatError(f"{path}: bad magic, expected PLV3")
        h, w = struct.unpack("<II", _read_exact(fh, 8, "dims"))
        if h == 0 or w == 0:
            raise FormatError(f"{path}: zero dimension {h}x{w}")
        pts = np.frombuffer(_read_exact(fh, h * w * 12, "xyz payload"),
                            dtype="<f4").reshape(h, w, 3)
        nbytes = -(-(h * w) // 8)
        bits = np.frombuffer(_read_exact(fh, nbytes, "validity bitmask"), dtype=np.uint8)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    valid = np.unpackbits(bits, count=h * w, bitorder="little").astype(bool).reshape(h, w)
    pts = np.where(valid[:, :, None], pts.astype(np.float64), 0.0)
    return PointMap(pts, valid)


# ---------------------------------------------------------------------------
# weight checkpoints

def save_checkpoint(path, params: dict):
    """Write named float64 tensors; names are sorted for determinism."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = params[name]
            arr = np.ascontiguousarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr,
                                       dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into {name: float64 ndarray}."""
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic, expected PLVW")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for i in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * n, f"tensor {name!r} payload")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return out


# ---------------------------------------------------------------------------
# calibration

def load_calib(path) -> CameraIntrinsics:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    tokens = text.split()
    if len(tokens) != 6:
        raise FormatError(f"{path}: calibration wants 6 values "
                          f"(f_u f_v c_u c_v baseline cam_height), got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return CameraIntrinsics(*vals)


def save_calib(path, intr: CameraIntrinsics):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(f"{v:.17g}" for v in
                          (intr.f_u, intr.f_v, intr.c_u, intr.c_v,
                           intr.baseline, intr.cam_height)) + "\n")


# ---------------------------------------------------------------------------
# PGM / PPM images

def save_image(path, img: np.ndarray):
    """Write [H,W] or [H,W,1] as P5, [H,W,3] as P6; input floats in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n"
    else:
        raise FormatError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def load_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into floats in [0,1], shape [H,W,1] or [H,W,3]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image magic {magic!r}")
    # header = magic, width, height, maxval as whitespace/comment-separated tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PNM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise FormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return img.astype(np.float64) / 255.0
