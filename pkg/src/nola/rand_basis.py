"""Seeded pseudo-random basis matrices.

Every basis matrix is generated from its own SplitMix64 stream whose seed is
derived from a base seed and a namespace ``(role, layer_id, basis_index,
chunk_index)``.  Because SplitMix64 is counter based (the n-th output only
depends on ``seed + n * GOLDEN_GAMMA``), a whole matrix, or a stack of them,
can be produced with vectorized numpy arithmetic and still match the
one-draw-at-a-time :class:`RngStream` bit for bit.

Normals come from Box-Muller on pairs of consecutive outputs.  Both the
scalar and the vectorized paths evaluate the transcendental functions with
numpy ufuncs so they agree exactly on a given machine.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DomainError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_NEG_53 = 2.0**-53

_GAMMA_U64 = np.uint64(GOLDEN_GAMMA)
_MIX1_U64 = np.uint64(_MIX1)
_MIX2_U64 = np.uint64(_MIX2)


class Role(enum.IntEnum):
    A = 0
    B = 1


class Sharing(enum.IntEnum):
    UNIQUE = 0
    SHARED_ACROSS_LAYERS = 1


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> int:
    """First SplitMix64 output of a stream whose state is ``state``."""
    return _mix64((state + GOLDEN_GAMMA) & MASK64)


@dataclass(frozen=True)
class SeedSpec:
    """Base seed plus the namespace that selects one basis stream.

    Labels are folded into the seed in this fixed order, each as an unsigned
    64-bit value: ``role``, ``layer_id`` (omitted when the basis is shared
    across layers), ``basis_index``, ``chunk_index``.  ``chunk_index`` is
    reserved for splitting one matrix over several streams; basis generation
    here always uses 0.
    """

    base_seed: int
    role: Role = Role.A
    layer_id: int = 0
    basis_index: int = 0
    chunk_index: int = 0
    sharing: Sharing = Sharing.UNIQUE

    def labels(self) -> tuple[int, ...]:
        if self.sharing == Sharing.SHARED_ACROSS_LAYERS:
            return (int(self.role), self.basis_index, self.chunk_index)
        return (int(self.role), self.layer_id, self.basis_index, self.chunk_index)

    def with_(self, **changes) -> "SeedSpec":
        return replace(self, **changes)


def derive_seed(spec: SeedSpec | int, labels: Optional[Sequence[int]] = None) -> int:
    """Fold namespace labels into the base seed.

    ``state = splitmix64_next(base)`` then, per label,
    ``state = splitmix64_next(state ^ label)``.  Passing a plain integer
    with explicit ``labels`` (possibly empty) exposes the raw fold.
    """
    if isinstance(spec, SeedSpec):
        base = spec.base_seed
        labels = spec.labels() if labels is None else labels
    else:
        base = spec
        labels = () if labels is None else labels
    state = splitmix64_next(base & MASK64)
    for label in labels:
        state = splitmix64_next(state ^ (int(label) & MASK64))
    return state


def _box_muller(u1, u2):
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = u2 * (2.0 * np.pi)
    return radius * np.cos(angle), radius * np.sin(angle)


class RngStream:
    """SplitMix64 generator with a Box-Muller normal sampler."""

    __slots__ = ("state", "cached_normal")

    def __init__(self, seed: int):
        self.state = seed & MASK64
        self.cached_normal: Optional[float] = None

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def next_uniform(self) -> float:
        """Uniform draw in (0, 1] from the top 53 bits; 0 maps to 1."""
        u = (self.next_u64() >> 11) * _TWO_NEG_53
        return 1.0 if u == 0.0 else u

    def sample_standard_normal(self) -> float:
        if self.cached_normal is not None:
            z, self.cached_normal = self.cached_normal, None
            return z
        u1 = np.array([self.next_uniform()])
        u2 = np.array([self.next_uniform()])
        z0, z1 = _box_muller(u1, u2)
        self.cached_normal = float(z1[0])
        return float(z0[0])


def box_muller_pair(u1: float, u2: float) -> tuple[float, float]:
    z0, z1 = _box_muller(np.array([u1], dtype=np.float64), np.array([u2], dtype=np.float64))
    return float(z0[0]), float(z1[0])


_S11, _S27, _S30, _S31 = (np.uint64(v) for v in (11, 27, 30, 31))
_BLOCK = 1 << 13
_ODD_STEPS = np.arange(1, 2 * _BLOCK, 2, dtype=np.uint64) * _GAMMA_U64


def _fill_normals(seed: int, out: np.ndarray) -> None:
    """Write the first ``len(out)`` normals of the stream ``seed`` into ``out``.

    Works in cache-sized blocks of pairs; within a block the first and
    second uniform of every pair are produced as separate contiguous arrays
    so the ufuncs stay on their vectorized paths.
    """
    count = out.shape[0]
    pairs = (count + 1) // 2
    x = np.empty(_BLOCK, dtype=np.uint64)
    tmp = np.empty(_BLOCK, dtype=np.uint64)
    u1 = np.empty(_BLOCK)
    u2 = np.empty(_BLOCK)
    cos_part = np.empty(_BLOCK)
    for p0 in range(0, pairs, _BLOCK):
        n = min(_BLOCK, pairs - p0)
        base = (seed + 2 * p0 * GOLDEN_GAMMA) & MASK64
        for offset, u in ((base, u1), ((base + GOLDEN_GAMMA) & MASK64, u2)):
            xs, ts, us = x[:n], tmp[:n], u[:n]
            np.add(_ODD_STEPS[:n], np.uint64(offset), out=xs)
            np.right_shift(xs, _S30, out=ts)
            xs ^= ts
            xs *= _MIX1_U64
            np.right_shift(xs, _S27, out=ts)
            xs ^= ts
            xs *= _MIX2_U64
            np.right_shift(xs, _S31, out=ts)
            xs ^= ts
            np.right_shift(xs, _S11, out=xs)
            np.multiply(xs, _TWO_NEG_53, out=us, casting="unsafe")
            us[us == 0.0] = 1.0
        radius, angle, c = u1[:n], u2[:n], cos_part[:n]
        np.log(radius, out=radius)
        radius *= -2.0
        np.sqrt(radius, out=radius)
        angle *= 2.0 * np.pi
        np.cos(angle, out=c)
        c *= radius
        np.sin(angle, out=angle)
        angle *= radius
        k = min(2 * n, count - 2 * p0)
        dst = out[2 * p0 : 2 * p0 + k]
        dst[0::2] = c[: (k + 1) // 2]
        dst[1::2] = angle[: k // 2]


def standard_normal_block(seeds, count: int) -> np.ndarray:
    """First ``count`` normals of each stream, in RngStream draw order.

    Returns shape ``(len(seeds), count)``.
    """
    if isinstance(seeds, (int, np.integer)):
        seeds = [seeds]
    seeds = [int(s) & MASK64 for s in seeds]
    out = np.empty((len(seeds), count), dtype=np.float64)
    for row, seed in zip(out, seeds):
        _fill_normals(seed, row)
    return out


@dataclass(frozen=True)
class BasisSpec:
    """Shape and count of a family of i.i.d. Normal(0, entry_std**2) matrices.

    ``entry_std`` defaults to ``1/sqrt(rows)``.
    """

    rows: int
    cols: int
    count: int
    entry_std: Optional[float] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.count < 1:
            raise DomainError(f"basis dimensions must be positive, got {self}")
        if self.entry_std is not None and self.entry_std < 0:
            raise DomainError("entry_std must be non-negative")

    @property
    def std(self) -> float:
        return 1.0 / math.sqrt(self.rows) if self.entry_std is None else float(self.entry_std)


def basis_seeds(seed_spec: SeedSpec, start: int, stop: int) -> list[int]:
    return [derive_seed(seed_spec.with_(basis_index=i, chunk_index=0)) for i in range(start, stop)]


def generate_basis_stack(spec: BasisSpec, seed_spec: SeedSpec, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Basis matrices ``start..stop-1`` as an array of shape (stop-start, rows, cols)."""
    stop = spec.count if stop is None else stop
    if not 0 <= start <= stop <= spec.count:
        raise DomainError(f"basis range [{start}, {stop}) outside [0, {spec.count})")
    if start == stop:
        return np.zeros((0, spec.rows, spec.cols))
    z = standard_normal_block(basis_seeds(seed_spec, start, stop), spec.rows * spec.cols)
    z *= spec.std
    return z.reshape(stop - start, spec.rows, spec.cols)


def generate_basis_matrix(spec: BasisSpec, seed_spec: SeedSpec, index: int) -> np.ndarray:
    if not 0 <= index < spec.count:
        raise DomainError(f"basis index {index} outside [0, {spec.count})")
    return generate_basis_stack(spec, seed_spec, index, index + 1)[0]


def iter_basis_chunks(spec: BasisSpec, seed_spec: SeedSpec, chunk_size: int, workers: int = 1) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(start, stack)`` chunks in ascending index order.

    With ``workers > 1`` chunks are generated on a thread pool a few at a
    time; the consumer still sees them in order.
    """
    if chunk_size < 1:
        raise DomainError("chunk_size must be positive")
    starts = range(0, spec.count, chunk_size)
    if workers <= 1:
        for s in starts:
            yield s, generate_basis_stack(spec, seed_spec, s, min(s + chunk_size, spec.count))
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for s in starts:
            pending.append((s, pool.submit(generate_basis_stack, spec, seed_spec, s, min(s + chunk_size, spec.count))))
            if len(pending) >= workers:
                s0, fut = pending.pop(0)
                yield s0, fut.result()
        for s0, fut in pending:
            yield s0, fut.result()


def mix_stack(stack: np.ndarray, coeffs, out: Optional[np.ndarray] = None, offset: int = 0) -> np.ndarray:
    """Add ``sum_i coeffs[offset + i] * stack[i]`` into ``out`` in ascending i."""
    if out is None:
        out = np.zeros(stack.shape[1:])
    for i in range(stack.shape[0]):
        out += coeffs[offset + i] * stack[i]
    return out


def accumulate_mixture(spec: BasisSpec, seed_spec: SeedSpec, coeffs, chunk_size: int = 16, workers: int = 1) -> np.ndarray:
    """``sum_i coeffs[i] * basis(i)`` holding at most ``chunk_size`` bases at once.

    The reduction runs strictly in ascending index order, so the result is
    bitwise independent of ``chunk_size`` and ``workers``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (spec.count,):
        raise DomainError(f"expected {spec.count} coefficients, got shape {coeffs.shape}")
    out = np.zeros((spec.rows, spec.cols))
    for start, stack in iter_basis_chunks(spec, seed_spec, chunk_size, workers):
        mix_stack(stack, coeffs, out, start)
    return out
