"""Binary checkpoint format.

Layout, all integers little-endian::

    b"XMS1" | u32 version | u32 kind tag
    | u32 len + config text (sorted ``key=value`` lines)
    | u32 record count | records
    | u8 optimizer flag [| u32 optimizer count | per optimizer:
        u32 len + name | u32 len + config text | u32 record count | records]
    | 8-byte blake2b digest of every preceding byte

A record is ``u32 len + name | u8 dtype tag | u8 rank | u32 dims... | payload``.
Parameters come first, then batch-norm running statistics, each in the
registration order of a freshly built bundle, so saving is canonical.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointFormatError, DataError, IntegrityError, KindMismatchError, ValidationError
from .models import MODEL_KINDS, ModelBundle, build_bundle
from .optim import AdamState
from .tensor import precision

MAGIC = b"XMS1"
VERSION = 1
KIND_TAGS = {"pix2pix": 1, "cyclegan": 2, "vae": 3}
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}
DIGEST_SIZE = 8
_INT_KEYS = ("image_size", "in_channels", "base_channels", "latent_dim", "seed")


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def _text(values: Dict[str, object]) -> bytes:
    lines = []
    for key in sorted(values):
        value = values[key]
        lines.append(f"{key}={repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines).encode("utf-8")


def _parse_text(blob: bytes) -> Dict[str, str]:
    out = {}
    for line in blob.decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed config line {line!r}")
        out[key] = value
    return out


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def blob(self, b: bytes):
        self.u32(len(b))
        self.parts.append(b)

    def record(self, name: str, arr: np.ndarray):
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise ValidationError(f"cannot serialize {name} with dtype {arr.dtype}")
        self.blob(name.encode("utf-8"))
        self.u8(DTYPE_TAGS[dt])
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())

    def records(self, items: List[Tuple[str, np.ndarray]]):
        self.u32(len(items))
        for name, arr in items:
            self.record(name, arr)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, start: int = 0):
        self.data = data
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def record(self) -> Tuple[str, np.ndarray]:
        name = self.blob().decode("utf-8", errors="replace")
        tag = self.u8()
        if tag not in TAG_DTYPES:
            raise CheckpointFormatError(f"record {name}: unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        shape = tuple(self.u32() for _ in range(self.u8()))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="))

    def records(self) -> List[Tuple[str, np.ndarray]]:
        return [self.record() for _ in range(self.u32())]


def _state_items(bundle: ModelBundle) -> List[Tuple[str, np.ndarray]]:
    return [(k, p.data) for k, p in bundle.params.items()] + list(bundle.buffers.items())


def encode_checkpoint(bundle: ModelBundle, include_optimizer: bool = True) -> bytes:
    """Serialize ``bundle`` (and optionally its Adam states) to bytes."""
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    w.u32(KIND_TAGS[bundle.kind])
    w.blob(_text(bundle.config()))
    w.records(_state_items(bundle))
    optimizers = bundle.optimizers if include_optimizer else {}
    w.u8(1 if optimizers else 0)
    if optimizers:
        w.u32(len(optimizers))
        for name, st in optimizers.items():
            w.blob(name.encode("utf-8"))
            w.blob(_text({"lr": float(st.lr), "beta1": float(st.beta1), "beta2": float(st.beta2), "eps": float(st.eps), "t": int(st.t)}))
            w.records([(f"m/{k}", v) for k, v in st.m.items()] + [(f"v/{k}", v) for k, v in st.v.items()])
    body = w.bytes()
    return body + _digest(body)


def save_checkpoint(bundle: ModelBundle, path, include_optimizer: bool = True) -> Path:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    path = Path(path)
    data = encode_checkpoint(bundle, include_optimizer)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _restore(bundle: ModelBundle, items: List[Tuple[str, np.ndarray]]):
    params, buffers = bundle.params, bundle.buffers
    expected = [name for name, _ in _state_items(bundle)]
    names = [name for name, _ in items]
    if names != expected:
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        detail = f"missing {missing[:5]}, unexpected {extra[:5]}" if missing or extra else "records out of order"
        raise IntegrityError(f"checkpoint parameters do not match the {bundle.kind} architecture: {detail}")
    for name, arr in items:
        target = params[name].data if name in params else buffers[name]
        if arr.shape != target.shape:
            raise IntegrityError(f"{name}: checkpoint shape {arr.shape} != architecture shape {target.shape}")
        if name in params:
            params[name].data = arr.copy()
        else:
            target[...] = arr


def _optimizer(config: Dict[str, str], items, params) -> AdamState:
    try:
        st = AdamState(float(config["lr"]), float(config["beta1"]), float(config["beta2"]), float(config["eps"]), int(config["t"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed optimizer config: {exc}") from exc
    for name, arr in items:
        slot, _, pname = name.partition("/")
        if slot not in ("m", "v") or pname not in params:
            raise IntegrityError(f"optimizer record {name} names no parameter")
        if arr.shape != params[pname].shape:
            raise IntegrityError(f"optimizer record {name}: shape {arr.shape} != {params[pname].shape}")
        getattr(st, slot)[pname] = arr.copy()
    return st


def decode_checkpoint(data: bytes, expect_kind: Optional[str] = None) -> ModelBundle:
    if len(data) < 12 + DIGEST_SIZE:
        raise DataError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}; not an XMS1 checkpoint")
    r = _Reader(data[:-DIGEST_SIZE], 4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tag = r.u32()
    kinds = {v: k for k, v in KIND_TAGS.items()}
    if tag not in kinds:
        raise CheckpointFormatError(f"unknown model kind tag {tag}")
    config = _parse_text(r.blob())
    items = r.records()
    opt_sections = []
    if r.u8():
        for _ in range(r.u32()):
            opt_sections.append((r.blob().decode("utf-8"), _parse_text(r.blob()), r.records()))
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} unexpected trailing bytes")
    if _digest(data[:-DIGEST_SIZE]) != data[-DIGEST_SIZE:]:
        raise IntegrityError("checkpoint checksum mismatch; the file is corrupted")
    kind = kinds[tag]
    if config.get("kind") != kind:
        raise IntegrityError(f"kind tag {kind} disagrees with config kind {config.get('kind')!r}")
    if expect_kind is not None and expect_kind != kind:
        raise KindMismatchError(f"checkpoint holds a {kind} model, expected {expect_kind}")
    try:
        values = {k: int(config[k]) for k in _INT_KEYS}
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint config: {exc}") from exc
    dtypes = {arr.dtype for _, arr in items}
    with precision(dtypes.pop() if len(dtypes) == 1 else np.float32):
        bundle = build_bundle(kind, **values)
    _restore(bundle, items)
    params = bundle.params
    bundle.optimizers = {name: _optimizer(cfg, recs, params) for name, cfg, recs in opt_sections}
    return bundle


def load_checkpoint(path, expect_kind: Optional[str] = None) -> ModelBundle:
    """Read and verify a checkpoint, rebuilding the architecture it declares.

    Raises
    ------
    CheckpointFormatError
        Bad magic, version, or structure.
    IntegrityError
        Checksum mismatch or a record that does not fit the architecture.
    KindMismatchError
        ``expect_kind`` is given and differs from the stored kind.
    DataError
        Unreadable or truncated file.
    """
    if expect_kind is not None and expect_kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model {expect_kind!r}")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, expect_kind)
