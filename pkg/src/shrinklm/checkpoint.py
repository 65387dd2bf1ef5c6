"""Binary tensor container and model checkpoint I/O.

Layout (all integers little-endian):

    magic "TLMC" | u32 version | u32 meta_len | meta JSON (utf-8)
    then repeated tensor records:
    u32 name_len | name utf-8 | u8 dtype tag | u8 ndim | u32 dims... | raw bytes

dtype tags: 1 = float64, 2 = float32. Raw data is the array's C-order
little-endian bytes, so a save/load round trip is bit-exact.

Writes are atomic: a temp file in the target directory is renamed over
the destination only after a successful flush.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ValidationError
from .model import ModelConfig, TinyLM, TrainConfig, param_names, param_shape

MAGIC = b"TLMC"
VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_TAG_FOR = {np.dtype("float64"): 1, np.dtype("float32"): 2}


def atomic_write_bytes(path: str, payload: bytes):
    """Write payload to path via temp file + rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_container(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, arr in tensors.items():
        dt = np.dtype(arr.dtype)
        if dt not in _TAG_FOR:
            raise ValidationError(f"tensor {name!r}: unsupported dtype {dt}")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", _TAG_FOR[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


def unpack_container(blob: bytes, source: str = "container") -> tuple[dict, dict[str, np.ndarray]]:
    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValidationError(f"{source}: truncated file while reading {what}")
        out = blob[off : off + n]
        off += n
        return out

    off = 0
    if take(4, "magic") != MAGIC:
        raise ValidationError(f"{source}: bad magic bytes, not a TLMC container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise ValidationError(f"{source}: unsupported container version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    try:
        meta = json.loads(take(meta_len, "meta block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{source}: corrupt meta block: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if tag not in _DTYPE_TAGS:
            raise ValidationError(f"{source}: tensor {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(take(nbytes, f"{name} data"), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    return meta, tensors


def save_checkpoint(model: TinyLM, path: str, train_config: TrainConfig | None = None,
                    extra_meta: dict | None = None):
    """Write a dense model checkpoint (format version, config, tensors)."""
    meta = {
        "kind": "tinylm",
        "config": model.config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    atomic_write_bytes(path, pack_container(meta, model.params))


def load_checkpoint(path: str) -> tuple[TinyLM, dict]:
    """Read a dense checkpoint, validating every expected tensor and shape."""
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, tensors = unpack_container(blob, source=path)
    if meta.get("kind") != "tinylm":
        raise ValidationError(f"{path}: not a dense model checkpoint (kind={meta.get('kind')!r})")
    config = ModelConfig.from_dict(meta["config"])
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        if name not in tensors:
            raise ValidationError(f"{path}: missing tensor {name!r}")
        expect = param_shape(config, name)
        if tensors[name].shape != expect:
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {expect}"
            )
        params[name] = np.asarray(tensors[name], dtype=np.float64)
    unknown = set(tensors) - set(params)
    if unknown:
        raise ValidationError(f"{path}: unexpected tensors {sorted(unknown)}")
    return TinyLM(config=config, params=params), meta


def save_grads(model: TinyLM, path: str, extra_meta: dict | None = None):
    """Persist populated gradient buffers in the same container format."""
    if model.grads is None:
        raise ValidationError("save_grads: model has no gradient buffers")
    meta = {"kind": "tinylm-grads", "config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    atomic_write_bytes(path, pack_container(meta, model.grads))


def load_grads(path: str, model: TinyLM) -> dict:
    """Load gradient buffers into `model.grads`; shapes must match the model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, tensors = unpack_container(blob, source=path)
    if meta.get("kind") != "tinylm-grads":
        raise ValidationError(f"{path}: not a gradient artifact (kind={meta.get('kind')!r})")
    if meta["config"] != model.config.to_dict():
        raise ValidationError(f"{path}: gradient artifact config does not match model config")
    grads: dict[str, np.ndarray] = {}
    for name in param_names(model.config):
        if name not in tensors:
            raise ValidationError(f"{path}: missing gradient tensor {name!r}")
        if tensors[name].shape != model.params[name].shape:
            raise ValidationError(f"{path}: gradient {name!r} shape mismatch")
        grads[name] = np.asarray(tensors[name], dtype=np.float64)
    model.grads = grads
    return meta
