"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CIVT"
    version u32      currently 1
    count   u32      number of tensor records
    record  repeated count times:
        name_len u32, name bytes (utf-8)
        rank     u32
        extents  rank * u32
        dtype    u8   (0 = float32, the only defined tag)
        payload  prod(extents) little-endian float32
    crc32   u32      zlib.crc32 of everything above

Model checkpoints store the architecture as ``__spec__/...`` records
(ints round-trip exactly through float32 at these magnitudes), so a
checkpoint rebuilds its own model.  Any other ``__``-prefixed records
(normalization stats, for instance) ride along as extras.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataFormatError
from .layers import Module
from .models import FAMILIES, ModelSpec, build

MAGIC = b"CIVT"
VERSION = 1
_DTYPE_F32 = 0

_SPEC_INT_FIELDS = (
    "image_size", "channels", "classes", "width", "depth", "heads", "patch",
    "mixer_token_hidden", "blocks_per_stage", "gn_groups", "inv_kernel",
    "inv_groups", "inv_reduction",
)


def save_tensors(path: str, named: dict) -> None:
    """Write name -> array records in the given order."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float32)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<B", _DTYPE_F32))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise DataFormatError(
                f"{self.path}: truncated {what} at byte offset {self.off} "
                f"(needed {n} bytes, {len(self.buf) - self.off} left)")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_tensors(path: str) -> dict:
    """Read a checkpoint back into name -> float32 array (order preserved)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint: {exc}") from exc
    if len(blob) < 4 + 4 + 4 + 4:
        raise DataFormatError(f"{path}: too short to be a checkpoint ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != crc:
        raise DataFormatError(
            f"{path}: checksum mismatch (stored {crc:#010x}, computed {actual:#010x})")
    r = _Reader(body, path)
    if r.take(4, "magic") != MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    count = r.u32("tensor count")
    out = {}
    for i in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        rank = r.u32("rank")
        if rank > 8:
            raise DataFormatError(
                f"{path}: implausible rank {rank} for '{name}' at byte offset {r.off - 4}")
        shape = tuple(r.u32("extent") for _ in range(rank))
        (tag,) = struct.unpack("<B", r.take(1, "dtype tag"))
        if tag != _DTYPE_F32:
            raise DataFormatError(f"{path}: unknown dtype tag {tag} for '{name}'")
        n_elems = 1
        for e in shape:
            n_elems *= e
        payload = r.take(4 * n_elems, f"payload of '{name}'")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.off != len(body):
        raise DataFormatError(
            f"{path}: {len(body) - r.off} trailing bytes at offset {r.off}")
    return out


def _spec_records(spec: ModelSpec) -> dict:
    rec = {"__spec__/family": np.float32(FAMILIES.index(spec.family))}
    for f in _SPEC_INT_FIELDS:
        rec[f"__spec__/{f}"] = np.float32(getattr(spec, f))
    rec["__spec__/stage_widths"] = np.asarray(spec.stage_widths, dtype=np.float32)
    return rec


def _spec_from_records(rec: dict, path: str) -> ModelSpec:
    try:
        family = FAMILIES[int(rec["__spec__/family"])]
        kwargs = {f: int(rec[f"__spec__/{f}"]) for f in _SPEC_INT_FIELDS}
        widths = tuple(int(w) for w in rec["__spec__/stage_widths"])
    except (KeyError, IndexError) as exc:
        raise DataFormatError(f"{path}: incomplete model spec in checkpoint: {exc}") from exc
    return ModelSpec(family=family, stage_widths=widths, **kwargs)


def save_model(path: str, model: Module, extras: dict | None = None) -> None:
    """Write spec records, then parameters, then sorted extras."""
    named = _spec_records(model.spec)
    for name, p in model.named_parameters():
        named[name] = p.data
    for key in sorted(extras or {}):
        if not key.startswith("__"):
            raise DataFormatError(f"extra record '{key}' must start with '__'")
        named[key] = extras[key]
    save_tensors(path, named)


def load_model(path: str, dtype=np.float32):
    """Rebuild (model, extras) from a checkpoint written by save_model."""
    rec = load_tensors(path)
    spec = _spec_from_records(rec, path)
    model = build(spec, seed=0, dtype=dtype)
    extras = {}
    params = {k: v for k, v in rec.items() if not k.startswith("__")}
    for k, v in rec.items():
        if k.startswith("__") and not k.startswith("__spec__/"):
            extras[k] = v
    wanted = dict(model.named_parameters())
    missing = sorted(set(wanted) - set(params))
    surplus = sorted(set(params) - set(wanted))
    if missing or surplus:
        raise DataFormatError(
            f"{path}: parameter names do not match the embedded spec "
            f"(missing {missing[:3]}, surplus {surplus[:3]})")
    for name, p in wanted.items():
        arr = params[name]
        if arr.shape != p.data.shape:
            raise DataFormatError(
                f"{path}: '{name}' has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.astype(dtype)
    return model, extras
