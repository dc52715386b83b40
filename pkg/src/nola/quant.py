"""Uniform affine quantization of coefficient vectors.

Each vector is quantized on its own: ``zero_point = min(v)``,
``scale = (max(v) - min(v)) / (2**bits - 1)`` (1.0 for a constant vector),
codes rounded half away from zero.  Quantization-aware training uses the
dequantized values in the forward pass and hands the resulting gradients
to the full-precision master coefficients unchanged (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .layers import coeff_gradients

MIN_BITS, MAX_BITS = 2, 8
PASSTHROUGH_BITS = 16


@dataclass(frozen=True)
class QuantSpec:
    bits: int

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise DomainError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")

    @property
    def levels(self) -> int:
        return 1 << self.bits


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    codes: np.ndarray
    scale: float
    zero_point: float
    bits: int

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.scale == other.scale
            and self.zero_point == other.zero_point
            and np.array_equal(self.codes, other.codes)
        )

    def __len__(self):
        return len(self.codes)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(v, spec: QuantSpec | int) -> QuantizedVector:
    if isinstance(spec, int):
        spec = QuantSpec(spec)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("cannot quantize an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("cannot quantize non-finite values")
    lo, hi = float(v.min()), float(v.max())
    top = spec.levels - 1
    scale = (hi - lo) / top if hi > lo else 1.0
    codes = np.clip(round_half_away((v - lo) / scale), 0, top).astype(np.uint8)
    return QuantizedVector(codes, scale, lo, spec.bits)


def dequantize(q: QuantizedVector) -> np.ndarray:
    codes = np.asarray(q.codes)
    if codes.size and int(codes.max()) >= (1 << q.bits):
        raise DomainError(f"code {int(codes.max())} out of range for {q.bits} bits")
    return q.zero_point + codes.astype(np.float64) * q.scale


def fake_quantize(v, spec: QuantSpec | int) -> np.ndarray:
    """``dequantize(quantize(v))`` keeping the input's shape."""
    v = np.asarray(v, dtype=np.float64)
    return dequantize(quantize(v, spec)).reshape(v.shape)


def fake_quantized_factor(factor, spec: QuantSpec):
    """Copy of ``factor`` whose trainable arrays are replaced by their fake-quantized values."""
    return factor.with_params([fake_quantize(p, spec) for p in factor.params()])


def qat_step(f, spec: QuantSpec, g) -> tuple[np.ndarray, np.ndarray]:
    """NOLA coefficient gradients evaluated at the quantized coefficients (STE)."""
    return coeff_gradients(fake_quantized_factor(f, spec), g)


class FakeQuant:
    """Callable used as :attr:`AdaptedLinear.view` during quantization-aware training."""

    def __init__(self, spec: QuantSpec):
        self.spec = spec

    def __call__(self, factor):
        return fake_quantized_factor(factor, self.spec)


def ptq_checkpoint(ckpt, bits: int):
    """Quantize every coefficient vector of a task checkpoint after training.

    Biases are left in floating point.  ``bits == 16`` is a passthrough that
    returns the checkpoint unchanged.
    """
    from .store import Encoding

    if bits == PASSTHROUGH_BITS:
        return ckpt
    spec = QuantSpec(bits)
    layers = []
    for rec in ckpt.layers:
        if rec.encoding == Encoding.QUANTIZED:
            raise DomainError(f"layer {rec.layer_id} is already quantized")
        vectors = [quantize(v, spec) for v in rec.vectors]
        layers.append(replace(rec, encoding=Encoding.QUANTIZED, bits=bits, vectors=vectors))
    return replace(ckpt, layers=layers)
