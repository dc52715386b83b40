"""Binary task checkpoints (``.nola`` files).

A checkpoint holds, per adapted layer, everything needed to rebuild the
weight delta on top of the shared base model: the seed, the dimensions and
the coefficient vectors.  All integers are little-endian, there is no
padding, and the byte stream is a pure function of the checkpoint.

Layout::

    magic      4s   b"NOLA"
    version    u16
    id_len     u16  followed by id_len bytes of UTF-8 model id
    n_layers   u32
    per layer:
      header   <IBIIIIIdQBBBB  layer_id, method, m, n, r, k, l, c,
                               base_seed, sharing, encoding, bits, has_bias
      vectors  NOLA: alpha (k), beta (l); LoRA: A (m*r), B (r*n),
               row-major; PRANC: theta (k; l = r = 0)
               float64 | float32 | quantized: f64 scale, f64 zero_point,
               ceil(len*bits/8) bytes of codes packed LSB first
      bias     n values, float64 under float64 encoding, float32 otherwise

"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError, FormatError, VersionError
from .layers import AdaptedLinear, LoraFactor, Method, NolaFactor, PrancFactor
from .quant import QuantizedVector, dequantize
from .rand_basis import SeedSpec, Sharing

MAGIC = b"NOLA"
FORMAT_VERSION = 1
FILE_SUFFIX = ".nola"

_PREAMBLE = struct.Struct("<4sH")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_LAYER = struct.Struct("<IBIIIIIdQBBBB")
_QHEAD = struct.Struct("<dd")


class Encoding(enum.IntEnum):
    FLOAT64 = 0
    FLOAT32 = 1
    QUANTIZED = 2

    @classmethod
    def parse(cls, text: str) -> tuple["Encoding", int]:
        """``float64``, ``float32`` or ``quantized:<bits>``."""
        text = text.strip().lower()
        if text == "float64":
            return cls.FLOAT64, 0
        if text == "float32":
            return cls.FLOAT32, 0
        if text.startswith("quantized:") and text[len("quantized:"):].isdigit():
            return cls.QUANTIZED, int(text[len("quantized:"):])
        raise DomainError(f"unknown encoding {text!r}")


def _describe_encoding(encoding: Encoding, bits: int) -> str:
    return f"quantized:{bits}" if encoding == Encoding.QUANTIZED else encoding.name.lower()


@dataclass
class LayerRecord:
    layer_id: int
    method: Method
    m: int
    n: int
    r: int
    k: int
    l: int
    c: float = 1.0
    base_seed: int = 0
    sharing: Sharing = Sharing.UNIQUE
    encoding: Encoding = Encoding.FLOAT32
    vectors: list = field(default_factory=list)
    bits: int = 0
    bias: Optional[np.ndarray] = None

    def vector_lengths(self) -> tuple[int, ...]:
        if self.method == Method.NOLA:
            return (self.k, self.l)
        if self.method == Method.LORA:
            return (self.m * self.r, self.r * self.n)
        return (self.k,)

    @property
    def num_params(self) -> int:
        return sum(self.vector_lengths())

    def coefficients(self) -> list[np.ndarray]:
        if self.encoding == Encoding.QUANTIZED:
            return [dequantize(q) for q in self.vectors]
        return [np.asarray(v, dtype=np.float64) for v in self.vectors]

    def seed_spec(self) -> SeedSpec:
        return SeedSpec(self.base_seed, layer_id=self.layer_id, sharing=self.sharing)

    def to_factor(self, cache: bool = False):
        coeffs = self.coefficients()
        if self.method == Method.NOLA:
            return NolaFactor(self.m, self.n, self.r, self.k, self.l, coeffs[0], coeffs[1], self.seed_spec(), self.c, cache=cache)
        if self.method == Method.LORA:
            return LoraFactor(self.m, self.n, self.r, coeffs[0].reshape(self.m, self.r), coeffs[1].reshape(self.r, self.n), self.c)
        return PrancFactor(self.m, self.n, self.k, coeffs[0], self.seed_spec(), cache=cache)

    @classmethod
    def from_factor(cls, factor, layer_id: Optional[int] = None, bias=None, encoding: Encoding = Encoding.FLOAT32) -> "LayerRecord":
        if encoding == Encoding.QUANTIZED:
            raise DomainError("build a float record first and quantize it with ptq_checkpoint")
        cast = (lambda v: np.asarray(v, dtype=np.float32).astype(np.float64)) if encoding == Encoding.FLOAT32 else (lambda v: np.array(v, dtype=np.float64))
        vectors = [cast(np.ravel(p)) for p in factor.params()]
        if bias is not None:
            bias = cast(bias)
        if isinstance(factor, NolaFactor):
            spec = factor.seed_spec
            return cls(spec.layer_id if layer_id is None else layer_id, Method.NOLA, factor.m, factor.n, factor.r, factor.k, factor.l,
                       factor.c, spec.base_seed, spec.sharing, encoding, vectors, 0, bias)
        if isinstance(factor, PrancFactor):
            spec = factor.seed_spec
            return cls(spec.layer_id if layer_id is None else layer_id, Method.PRANC, factor.m, factor.n, 0, factor.p, 0,
                       1.0, spec.base_seed, spec.sharing, encoding, vectors, 0, bias)
        if isinstance(factor, LoraFactor):
            return cls(layer_id or 0, Method.LORA, factor.m, factor.n, factor.r, 0, 0, factor.c, 0, Sharing.UNIQUE, encoding, vectors, 0, bias)
        raise DomainError(f"cannot store factor of type {type(factor).__name__}")


@dataclass
class TaskCheckpoint:
    base_model_id: str
    layers: list[LayerRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def num_params(self) -> int:
        return sum(rec.num_params for rec in self.layers)


def checkpoint_from_layers(layers: Sequence[AdaptedLinear], base_model_id: str, encoding: Encoding = Encoding.FLOAT32) -> TaskCheckpoint:
    records = []
    for index, layer in enumerate(layers):
        if layer.delta is None:
            raise DomainError(f"layer {index} has no delta to export")
        records.append(LayerRecord.from_factor(layer.delta, index if isinstance(layer.delta, LoraFactor) else None, layer.bias, encoding))
    return TaskCheckpoint(base_model_id, records)


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    planes = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def _unpack_codes(raw: bytes, count: int, bits: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if flat[count * bits :].any():
        raise ValueError("non-zero padding bits")
    planes = flat[: count * bits].reshape(count, bits).astype(np.uint8)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def _vector_bytes(encoding: Encoding, bits: int, length: int) -> int:
    if encoding == Encoding.FLOAT64:
        return 8 * length
    if encoding == Encoding.FLOAT32:
        return 4 * length
    return _QHEAD.size + (length * bits + 7) // 8


def _bias_dtype(encoding: Encoding) -> str:
    return "<f8" if encoding == Encoding.FLOAT64 else "<f4"


def _check_record(rec: LayerRecord) -> None:
    lengths = rec.vector_lengths()
    if len(rec.vectors) != len(lengths):
        raise DomainError(f"layer {rec.layer_id}: expected {len(lengths)} vectors, got {len(rec.vectors)}")
    for v, length in zip(rec.vectors, lengths):
        if len(v) != length:
            raise DomainError(f"layer {rec.layer_id}: vector of length {len(v)}, expected {length}")
    if rec.encoding == Encoding.QUANTIZED:
        if not 2 <= rec.bits <= 8 or any(not isinstance(q, QuantizedVector) or q.bits != rec.bits for q in rec.vectors):
            raise DomainError(f"layer {rec.layer_id}: inconsistent quantization metadata")
    elif rec.bits != 0:
        raise DomainError(f"layer {rec.layer_id}: bits must be 0 for float encodings")
    if rec.bias is not None and len(rec.bias) != rec.n:
        raise DomainError(f"layer {rec.layer_id}: bias length {len(rec.bias)} != {rec.n}")


def serialize(ckpt: TaskCheckpoint) -> bytes:
    model_id = ckpt.base_model_id.encode("utf-8")
    if len(model_id) > 0xFFFF:
        raise DomainError("model id longer than 65535 bytes")
    parts = [_PREAMBLE.pack(MAGIC, ckpt.format_version), _U16.pack(len(model_id)), model_id, _U32.pack(len(ckpt.layers))]
    for rec in ckpt.layers:
        _check_record(rec)
        parts.append(_LAYER.pack(rec.layer_id, int(rec.method), rec.m, rec.n, rec.r, rec.k, rec.l, float(rec.c),
                                 rec.base_seed, int(rec.sharing), int(rec.encoding), rec.bits, rec.bias is not None))
        for v in rec.vectors:
            if rec.encoding == Encoding.QUANTIZED:
                parts.append(_QHEAD.pack(v.scale, v.zero_point))
                parts.append(_pack_codes(v.codes, rec.bits))
            elif rec.encoding == Encoding.FLOAT32:
                parts.append(np.asarray(v, dtype="<f4").tobytes())
            else:
                parts.append(np.asarray(v, dtype="<f8").tobytes())
        if rec.bias is not None:
            parts.append(np.asarray(rec.bias, dtype=_bias_dtype(rec.encoding)).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0
        self.layer_id = None
        self.layer_index = None

    def take(self, size: int, what: str) -> memoryview:
        if self.pos + size > len(self.blob):
            raise FormatError(f"truncated {what}: need {size} bytes, {len(self.blob) - self.pos} left", self.pos, self.layer_id, self.layer_index)
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def fail(self, message: str):
        raise FormatError(message, self.pos, self.layer_id, self.layer_index)


def deserialize(blob: bytes) -> TaskCheckpoint:
    rd = _Reader(bytes(blob))
    magic, version = rd.unpack(_PREAMBLE, "preamble")
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}", 4)
    (id_len,) = rd.unpack(_U16, "model id length")
    try:
        model_id = bytes(rd.take(id_len, "model id")).decode("utf-8")
    except UnicodeDecodeError:
        rd.fail("model id is not valid UTF-8")
    (count,) = rd.unpack(_U32, "layer count")
    layers = []
    for index in range(count):
        rd.layer_id, rd.layer_index = None, index
        start = rd.pos
        (layer_id, method, m, n, r, k, l, c, seed, sharing, encoding, bits, has_bias) = rd.unpack(_LAYER, "layer header")
        rd.layer_id = layer_id
        try:
            method, sharing, encoding = Method(method), Sharing(sharing), Encoding(encoding)
        except ValueError:
            raise FormatError("unknown method, sharing or encoding tag", start, layer_id, index) from None
        if has_bias not in (0, 1):
            raise FormatError(f"bad bias flag {has_bias}", start, layer_id, index)
        if (encoding == Encoding.QUANTIZED) != (2 <= bits <= 8) or (encoding != Encoding.QUANTIZED and bits != 0):
            raise FormatError(f"bits {bits} invalid for encoding {encoding.name}", start, layer_id, index)
        rec = LayerRecord(layer_id, method, m, n, r, k, l, c, seed, sharing, encoding, [], bits, None)
        for length in rec.vector_lengths():
            raw = rd.take(_vector_bytes(encoding, bits, length), "coefficient payload")
            if encoding == Encoding.QUANTIZED:
                scale, zero_point = _QHEAD.unpack(raw[: _QHEAD.size])
                try:
                    codes = _unpack_codes(bytes(raw[_QHEAD.size :]), length, bits)
                except ValueError as exc:
                    raise FormatError(str(exc), rd.pos, layer_id, index) from None
                rec.vectors.append(QuantizedVector(codes, scale, zero_point, bits))
            elif encoding == Encoding.FLOAT32:
                rec.vectors.append(np.frombuffer(raw, dtype="<f4").astype(np.float64))
            else:
                rec.vectors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
        if has_bias:
            width = 8 if encoding == Encoding.FLOAT64 else 4
            raw = rd.take(width * n, "bias")
            rec.bias = np.frombuffer(raw, dtype=_bias_dtype(encoding)).astype(np.float64)
        layers.append(rec)
    rd.layer_id = rd.layer_index = None
    if rd.pos != len(rd.blob):
        rd.fail(f"{len(rd.blob) - rd.pos} trailing bytes")
    return TaskCheckpoint(model_id, layers, version)


def write_checkpoint(path, ckpt: TaskCheckpoint) -> int:
    """Atomically write ``ckpt``; returns the number of bytes written."""
    blob = serialize(ckpt)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=FILE_SUFFIX, dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def read_checkpoint(path) -> TaskCheckpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def layer_delta(rec: LayerRecord, chunk_size: int = 16) -> np.ndarray:
    return rec.to_factor().delta(chunk_size)


def reconstruct(ckpt: TaskCheckpoint, base: Sequence[np.ndarray], chunk_size: int = 16) -> list[np.ndarray]:
    """Merged ``W + delta`` for every layer, in checkpoint order."""
    if len(base) != len(ckpt.layers):
        raise DomainError(f"{len(ckpt.layers)} layer records but {len(base)} base matrices")
    merged = []
    for rec, w in zip(ckpt.layers, base):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (rec.m, rec.n):
            raise DomainError(f"layer {rec.layer_id}: base shape {w.shape} != {(rec.m, rec.n)}")
        merged.append(w + layer_delta(rec, chunk_size))
    return merged


def dump(ckpt: TaskCheckpoint) -> str:
    """Canonical text listing, one line per layer."""
    lines = [f"model {ckpt.base_model_id} version {ckpt.format_version} layers {len(ckpt.layers)}"]
    for rec in ckpt.layers:
        lines.append(
            f"layer {rec.layer_id} {rec.method.name.lower()} {rec.m}x{rec.n} r={rec.r} k={rec.k} l={rec.l} "
            f"params={rec.num_params} encoding={_describe_encoding(rec.encoding, rec.bits)}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class ManifestEntry:
    task: str
    size_bytes: int
    params: int
    compression_ratio: float


@dataclass
class StoreManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(e.size_bytes for e in self.entries)


def report(store: Mapping[str, TaskCheckpoint] | Iterable[tuple[str, TaskCheckpoint]], dense_param_counts: Optional[Mapping[str, int]] = None) -> StoreManifest:
    """Per-task size, trainable coefficient count and ``sum(mn) / sum(params)``.

    ``dense_param_counts`` overrides the dense size per task; by default it
    is the sum of ``m*n`` over the task's layers.  Biases are not counted
    as trainable delta parameters.
    """
    items = store.items() if isinstance(store, Mapping) else store
    entries = []
    for name, ckpt in items:
        dense = sum(rec.m * rec.n for rec in ckpt.layers)
        if dense_param_counts is not None and name in dense_param_counts:
            dense = dense_param_counts[name]
        params = ckpt.num_params
        entries.append(ManifestEntry(name, len(serialize(ckpt)), params, dense / params if params else float("inf")))
    return StoreManifest(entries)
