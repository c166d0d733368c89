"""Tensor and image file formats.

The flat tensor format is a 16-byte header (magic ``ECALLTNS`` followed by a
little-endian uint32 version and uint32 header-line length), one UTF-8 JSON
metadata line such as ``{"dtype":"f64","shape":[1,64,64]}`` terminated by a
newline, then the raw little-endian values in C order.

Complex tensors use dtype ``c128`` and are stored as interleaved (re, im)
float64 pairs.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ecall.errors import DataError

MAGIC = b"ECALLTNS"
VERSION = 1
_HEADER = struct.Struct("<8sII")

_DTYPES = {"f64": np.dtype("<f8"), "c128": np.dtype("<c16")}


def write_tensor(path, array, **meta):
    """Write ``array`` (real or complex) to ``path``; extra ``meta`` keys are
    stored in the JSON line."""
    arr = np.asarray(array)
    code = "c128" if np.iscomplexobj(arr) else "f64"
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    info = {"dtype": code, "shape": list(arr.shape), **meta}
    line = json.dumps(info, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(line)))
        fh.write(line)
        fh.write(arr.tobytes())


def read_tensor_with_meta(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, nline = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: not a tensor file")
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        info = json.loads(fh.read(nline).decode())
        payload = fh.read()
    dtype = _DTYPES.get(info.get("dtype"))
    if dtype is None:
        raise DataError(f"{path}: unknown dtype {info.get('dtype')!r}")
    shape = tuple(info["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != count * dtype.itemsize:
        raise DataError(f"{path}: payload size does not match shape {shape}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, info


def read_tensor(path):
    return read_tensor_with_meta(path)[0]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _tokens(data):
    """Yield whitespace-separated header tokens of a netpbm file, skipping
    comments, and the offset just past the single whitespace after the last."""
    pos = 0
    fields = []
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    return fields, pos + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) file as a ``(c, H, W)`` image in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: only binary PGM/PPM are supported")
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 1 if magic == b"P5" else 3
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    pix = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    img = pix.reshape(h, w, channels).transpose(2, 0, 1)
    return img.astype(np.float64) / maxval


def write_pnm(path, img):
    """Write an image to 8-bit PGM (1 channel) or PPM (3 channels).

    Values are clipped to [0, 1] and mapped linearly to 0..255.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[np.newaxis]
    c, h, w = img.shape
    if c not in (1, 3):
        raise DataError(f"PNM output needs 1 or 3 channels, got {c}")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(pix.transpose(1, 2, 0).tobytes())


def read_image(path):
    """Read a tensor file or PGM/PPM image, dispatching on the suffix."""
    if Path(path).suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    return read_tensor(path)


def write_image(path, img):
    if Path(path).suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, img)
    else:
        write_tensor(path, img)
