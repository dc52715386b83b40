"""Reparameterized weight deltas and the linear layer that carries them.

Three parameterizations of the ``m x n`` update added to a frozen weight:

* :class:`NolaFactor` - ``(c/r) * (sum_i alpha_i A_i) @ (sum_j beta_j B_j)``
  with frozen seeded bases ``A_i`` (m x r) and ``B_j`` (r x n); only
  ``alpha`` (k values) and ``beta`` (l values) are trained.
* :class:`LoraFactor` - ``(c/r) * A @ B`` with both factors trained.
* :class:`PrancFactor` - ``sum_i theta_i V_i`` over seeded m x n bases.

Factors share a small duck-typed interface used by :class:`AdaptedLinear`:
``params()``, ``with_params()``, ``delta()``, ``forward_terms()`` and
``backward_terms()``.  Bases are regenerated chunk by chunk on every pass
unless ``cache=True``, in which case each basis stack is generated once and
kept on the factor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import DomainError
from .rand_basis import BasisSpec, Role, SeedSpec, iter_basis_chunks, mix_stack, generate_basis_stack

DEFAULT_CHUNK = 16


class Method(enum.IntEnum):
    NOLA = 0
    LORA = 1
    PRANC = 2

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise DomainError(f"unknown method {value!r}") from None


def _vector(v, length: int, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (length,):
        raise DomainError(f"{name} must have shape ({length},), got {a.shape}")
    return a


class _BasisSource:
    """Chunks of one basis family, streamed or from a per-factor cache."""

    def __init__(self, spec: BasisSpec, seed_spec: SeedSpec, cache: Optional[dict], key, chunk_size: int):
        self.spec, self.seed_spec = spec, seed_spec
        self.cache, self.key, self.chunk_size = cache, key, chunk_size

    def chunks(self, chunk_size: Optional[int] = None) -> Iterator[tuple[int, np.ndarray]]:
        if self.cache is not None:
            stack = self.cache.get(self.key)
            if stack is None:
                stack = self.cache[self.key] = generate_basis_stack(self.spec, self.seed_spec)
            yield 0, stack
            return
        yield from iter_basis_chunks(self.spec, self.seed_spec, chunk_size or self.chunk_size)

    def mix(self, coeffs, chunk_size: Optional[int] = None) -> np.ndarray:
        out = np.zeros((self.spec.rows, self.spec.cols))
        for start, stack in self.chunks(chunk_size):
            mix_stack(stack, coeffs, out, start)
        return out

    def inner(self, target: np.ndarray) -> np.ndarray:
        """``<basis_i, target>_F`` for every i."""
        out = np.empty(self.spec.count)
        for start, stack in self.chunks():
            out[start : start + stack.shape[0]] = np.tensordot(stack, target, axes=([1, 2], [0, 1]))
        return out


@dataclass
class NolaFactor:
    m: int
    n: int
    r: int
    k: int
    l: int
    alpha: np.ndarray
    beta: np.ndarray
    seed_spec: SeedSpec = field(default_factory=lambda: SeedSpec(0))
    c: float = 1.0
    cache: bool = False
    chunk_size: int = DEFAULT_CHUNK
    _stacks: dict = field(default_factory=dict, repr=False, compare=False)

    method = Method.NOLA

    def __post_init__(self):
        if min(self.m, self.n, self.r, self.k, self.l) < 1:
            raise DomainError("NOLA dimensions and basis counts must be positive")
        if self.r > min(self.m, self.n):
            raise DomainError(f"rank {self.r} exceeds min({self.m}, {self.n})")
        self.alpha = _vector(self.alpha, self.k, "alpha")
        self.beta = _vector(self.beta, self.l, "beta")

    @classmethod
    def init(cls, m, n, r, k, l, seed_spec: SeedSpec, rng: np.random.Generator, **kw) -> "NolaFactor":
        """alpha ~ N(0, 1/k), beta = 0, so the delta starts at exactly zero."""
        return cls(m, n, r, k, l, rng.normal(0.0, 1.0 / np.sqrt(k), size=k), np.zeros(l), seed_spec, **kw)

    @property
    def scale(self) -> float:
        return self.c / self.r

    @property
    def num_params(self) -> int:
        return self.k + self.l

    def source(self, role: Role, chunk_size: Optional[int] = None) -> _BasisSource:
        if role == Role.A:
            spec = BasisSpec(self.m, self.r, self.k)
        else:
            spec = BasisSpec(self.r, self.n, self.l)
        cache = self._stacks if self.cache else None
        return _BasisSource(spec, self.seed_spec.with_(role=role), cache, role, chunk_size or self.chunk_size)

    def params(self) -> list[np.ndarray]:
        return [self.alpha, self.beta]

    def with_params(self, params) -> "NolaFactor":
        alpha, beta = params
        return replace(self, alpha=alpha, beta=beta, _stacks=self._stacks)

    def mixtures(self, chunk_size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        a = self.source(Role.A, chunk_size).mix(self.alpha)
        b = self.source(Role.B, chunk_size).mix(self.beta)
        return a, b

    def delta(self, chunk_size: Optional[int] = None) -> np.ndarray:
        a, b = self.mixtures(chunk_size)
        return self.scale * (a @ b)

    def grads_from_products(self, g_bt: np.ndarray, at_g: np.ndarray) -> list[np.ndarray]:
        """Coefficient gradients given ``G @ B.T`` (m x r) and ``A.T @ G`` (r x n)."""
        s = self.scale
        return [s * self.source(Role.A).inner(g_bt), s * self.source(Role.B).inner(at_g)]

    def gradients(self, g: np.ndarray, mixtures=None) -> list[np.ndarray]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.m, self.n):
            raise DomainError(f"upstream gradient must be {(self.m, self.n)}, got {g.shape}")
        a, b = self.mixtures() if mixtures is None else mixtures
        return self.grads_from_products(g @ b.T, a.T @ g)

    def forward_terms(self, x: np.ndarray):
        a, b = self.mixtures()
        xa = x @ a
        return self.scale * (xa @ b), (a, b, xa)

    def backward_terms(self, x, grad_out, ctx, need_input_grad: bool):
        a, b, xa = ctx
        gout_bt = grad_out @ b.T
        grads = self.grads_from_products(x.T @ gout_bt, xa.T @ grad_out)
        grad_x = self.scale * (gout_bt @ a.T) if need_input_grad else None
        return grads, grad_x


@dataclass
class LoraFactor:
    m: int
    n: int
    r: int
    a: np.ndarray
    b: np.ndarray
    c: float = 1.0

    method = Method.LORA

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != (self.m, self.r) or self.b.shape != (self.r, self.n):
            raise DomainError(f"LoRA factors must be {(self.m, self.r)} and {(self.r, self.n)}, got {self.a.shape}, {self.b.shape}")

    @classmethod
    def init(cls, m, n, r, rng: np.random.Generator, c: float = 1.0) -> "LoraFactor":
        """A ~ N(0, 1/m), B = 0."""
        return cls(m, n, r, rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, r)), np.zeros((r, n)), c)

    @property
    def scale(self) -> float:
        return self.c / self.r

    @property
    def num_params(self) -> int:
        return self.r * (self.m + self.n)

    def params(self) -> list[np.ndarray]:
        return [self.a, self.b]

    def with_params(self, params) -> "LoraFactor":
        a, b = params
        return replace(self, a=a, b=b)

    def delta(self, chunk_size: Optional[int] = None) -> np.ndarray:
        return self.scale * (self.a @ self.b)

    def gradients(self, g: np.ndarray) -> list[np.ndarray]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.m, self.n):
            raise DomainError(f"upstream gradient must be {(self.m, self.n)}, got {g.shape}")
        s = self.scale
        return [s * (g @ self.b.T), s * (self.a.T @ g)]

    def forward_terms(self, x):
        xa = x @ self.a
        return self.scale * (xa @ self.b), xa

    def backward_terms(self, x, grad_out, xa, need_input_grad: bool):
        s = self.scale
        gout_bt = grad_out @ self.b.T
        grads = [s * (x.T @ gout_bt), s * (xa.T @ grad_out)]
        grad_x = s * (gout_bt @ self.a.T) if need_input_grad else None
        return grads, grad_x


@dataclass
class PrancFactor:
    m: int
    n: int
    p: int
    theta: np.ndarray
    seed_spec: SeedSpec = field(default_factory=lambda: SeedSpec(0))
    cache: bool = False
    chunk_size: int = DEFAULT_CHUNK
    _stacks: dict = field(default_factory=dict, repr=False, compare=False)

    method = Method.PRANC

    def __post_init__(self):
        if min(self.m, self.n, self.p) < 1:
            raise DomainError("PRANC dimensions and basis count must be positive")
        self.theta = _vector(self.theta, self.p, "theta")

    @classmethod
    def init(cls, m, n, p, seed_spec: SeedSpec, **kw) -> "PrancFactor":
        return cls(m, n, p, np.zeros(p), seed_spec, **kw)

    @property
    def num_params(self) -> int:
        return self.p

    def source(self, chunk_size: Optional[int] = None) -> _BasisSource:
        cache = self._stacks if self.cache else None
        return _BasisSource(BasisSpec(self.m, self.n, self.p), self.seed_spec.with_(role=Role.A), cache, Role.A, chunk_size or self.chunk_size)

    def params(self) -> list[np.ndarray]:
        return [self.theta]

    def with_params(self, params) -> "PrancFactor":
        (theta,) = params
        return replace(self, theta=theta, _stacks=self._stacks)

    def delta(self, chunk_size: Optional[int] = None) -> np.ndarray:
        # the m x n basis matrices are the reshaped random mn-vectors
        return self.source(chunk_size).mix(self.theta)

    def gradients(self, g: np.ndarray) -> list[np.ndarray]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.m, self.n):
            raise DomainError(f"upstream gradient must be {(self.m, self.n)}, got {g.shape}")
        return [self.source().inner(g)]

    def forward_terms(self, x):
        d = self.delta()
        return x @ d, d

    def backward_terms(self, x, grad_out, d, need_input_grad: bool):
        grads = self.gradients(x.T @ grad_out)
        grad_x = grad_out @ d.T if need_input_grad else None
        return grads, grad_x


Factor = NolaFactor | LoraFactor | PrancFactor


def nola_delta(f: NolaFactor, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    return f.delta(chunk_size)


def coeff_gradients(f: NolaFactor, g) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<G, delta>`` with respect to ``alpha`` and ``beta``."""
    ga, gb = f.gradients(g)
    return ga, gb


def lora_delta(f: LoraFactor) -> np.ndarray:
    return f.delta()


def pranc_delta(f: PrancFactor, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    return f.delta(chunk_size)


def pranc_gradients(f: PrancFactor, g) -> np.ndarray:
    return f.gradients(g)[0]


@dataclass
class AdaptedLinear:
    """``y = x @ (W + delta) + bias`` with ``W`` frozen unless ``train_weight``.

    ``view`` optionally maps the master factor to the factor actually used in
    the forward pass (fake quantization); its gradients are applied to the
    master parameters unchanged.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    delta: Optional[Factor] = None
    train_weight: bool = False
    view: Optional[Callable[[Factor], Factor]] = None
    grads: list = field(default_factory=list, repr=False)
    _ctx: tuple = field(default=(), repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DomainError("weight must be a matrix")
        m, n = self.weight.shape
        if self.bias is not None:
            self.bias = _vector(self.bias, n, "bias")
        if self.delta is not None and (self.delta.m, self.delta.n) != (m, n):
            raise DomainError(f"delta shape {(self.delta.m, self.delta.n)} does not match weight {(m, n)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def parameters(self) -> list[np.ndarray]:
        params = [] if self.delta is None else list(self.delta.params())
        if self.bias is not None:
            params.append(self.bias)
        if self.train_weight:
            params.append(self.weight)
        return params

    def _active_delta(self):
        if self.delta is None or self.view is None:
            return self.delta
        return self.view(self.delta)

    def forward(self, x, keep: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise DomainError(f"input shape {x.shape} incompatible with weight {self.weight.shape}")
        out = x @ self.weight
        factor = self._active_delta()
        ctx = None
        if factor is not None:
            term, ctx = factor.forward_terms(x)
            out += term
        if self.bias is not None:
            out += self.bias
        if keep:
            self._ctx = (x, factor, ctx)
        return out

    def backward(self, grad_out, need_input_grad: bool = True) -> Optional[np.ndarray]:
        """Fill ``self.grads`` (aligned with ``parameters()``) from the last kept forward."""
        x, factor, ctx = self._ctx
        grads = []
        grad_x = None
        if factor is not None:
            fgrads, grad_x = factor.backward_terms(x, grad_out, ctx, need_input_grad)
            grads.extend(fgrads)
        if self.bias is not None:
            grads.append(grad_out.sum(axis=0))
        if self.train_weight:
            grads.append(x.T @ grad_out)
        if need_input_grad:
            base = grad_out @ self.weight.T
            grad_x = base if grad_x is None else grad_x + base
        self.grads = grads
        self._ctx = ()
        return grad_x

    def merge(self) -> np.ndarray:
        if self.delta is None:
            raise DomainError("layer has no delta to merge")
        return self.weight + self._active_delta().delta()

    def merged_forward(self, x) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64) @ self.merge()
        if self.bias is not None:
            out += self.bias
        return out


def forward(layer: AdaptedLinear, x) -> np.ndarray:
    return layer.forward(x)


def merge(layer: AdaptedLinear) -> np.ndarray:
    return layer.merge()


def param_count(method, m: int, n: int, r: int = 1, k: int = 0, l: int = 0, p: int = 0, num_layers: int = 1) -> int:
    """Trainable delta parameters: LoRA ``r(m+n)``, NOLA ``k+l``, PRANC ``p``, per layer."""
    method = Method.parse(method)
    if method == Method.LORA:
        per_layer = r * (m + n)
    elif method == Method.NOLA:
        per_layer = k + l
    else:
        per_layer = p
    return num_layers * per_layer


def compression_ratio(method, m: int, n: int, r: int = 1, k: int = 0, l: int = 0, p: int = 0) -> float:
    """Dense delta size ``m*n`` over trainable parameter count."""
    return (m * n) / param_count(method, m, n, r=r, k=k, l=l, p=p)


@dataclass(frozen=True)
class CostReport:
    pranc_flops: int
    nola_flops: int

    @property
    def speedup(self) -> float:
        return self.pranc_flops / self.nola_flops


def cost_model(d: int, k: int, r: int) -> CostReport:
    """Generation plus mixing work for a d x d layer with k basis elements in total.

    PRANC touches ``k`` bases of ``d*d`` entries plus the result; NOLA
    splits ``k`` between the two factors (``k/2`` each, ``d*r`` entries)
    plus the two ``d x r`` mixtures.
    """
    if min(d, k, r) < 1:
        raise DomainError("cost_model arguments must be positive")
    return CostReport(pranc_flops=k * d * d + d * d, nola_flops=k * d * r + 2 * d * r)
