"""Desk-scale training: a 784-256-10 MLP whose layers carry reparameterized deltas.

The base weights are a seeded standard initialization and stay frozen for
the NOLA, LoRA and PRANC variants; ``dense`` trains them directly.  Biases
are always trainable.
"""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError
from .layers import AdaptedLinear, LoraFactor, NolaFactor, PrancFactor
from .quant import FakeQuant, QuantSpec
from .rand_basis import SeedSpec, Sharing
from .store import Encoding, TaskCheckpoint, checkpoint_from_layers

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
METHODS = ("dense", "nola", "lora", "pranc")
MODEL_ID = "mlp-784-256-10"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DomainError(f"features {self.features.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.features[:n], self.labels[:n])


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header", 0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    offset = 4 + 4 * ndim
    size = math.prod(dims)
    if len(raw) - offset != size:
        raise FormatError(f"{path}: expected {size} data bytes, found {len(raw) - offset}", offset)
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DomainError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DomainError("label outside [0, 10)")
    return Dataset(images.reshape(images.shape[0], -1) / 255.0, labels)


_MNIST_NAMES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
)


def find_mnist(directory) -> Optional[tuple[Path, Path]]:
    """Locate the MNIST training files (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    for images, labels in _MNIST_NAMES:
        for suffix in ("", ".gz"):
            pi, pl = directory / (images + suffix), directory / (labels + suffix)
            if pi.is_file() and pl.is_file():
                return pi, pl
    return None


def synth_dataset(classes: int = 10, per_class: int = 500, seed: int = 0, dim: int = 784) -> Dataset:
    """Gaussian blobs: class centers are seeded random unit vectors times 3, unit isotropic noise."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= 3.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    features = centers[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order])


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DomainError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(batch)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= batch
    return float(loss), grad


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    params_per_layer: int = 32
    rank: int = 4
    seed: int = 0
    c: float = 1.0
    lora_rank: int = 1
    qat_bits: Optional[int] = None
    shared_basis: bool = False
    cache_basis: bool = True
    # per-layer coefficient counts overriding params_per_layer (NOLA, PRANC)
    layer_params: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise DomainError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.params_per_layer < 1 or self.rank < 1 or self.lora_rank < 1:
            raise DomainError("params_per_layer and ranks must be positive")
        if self.layer_params is not None:
            self.layer_params = tuple(int(p) for p in self.layer_params)
            if min(self.layer_params, default=1) < 1:
                raise DomainError("layer_params must be positive")

    def params_for(self, layer_id: int) -> int:
        if self.layer_params is None:
            return self.params_per_layer
        return self.layer_params[layer_id]


class MlpModel:
    """``relu(x @ W1' + b1) @ W2' + b2`` with adapted layers."""

    def __init__(self, layer1: AdaptedLinear, layer2: AdaptedLinear, method: str = "dense"):
        self.layer1, self.layer2 = layer1, layer2
        self.method = method
        self._hidden = None

    @property
    def layers(self) -> list[AdaptedLinear]:
        return [self.layer1, self.layer2]

    def parameters(self) -> list[np.ndarray]:
        return self.layer1.parameters() + self.layer2.parameters()

    def grads(self) -> list[np.ndarray]:
        return self.layer1.grads + self.layer2.grads

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters())

    def num_delta_params(self) -> int:
        return sum(layer.delta.num_params for layer in self.layers if layer.delta is not None)

    def forward(self, x, keep: bool = False) -> np.ndarray:
        pre = self.layer1.forward(x, keep)
        hidden = np.maximum(pre, 0.0)
        if keep:
            self._hidden = hidden
        return self.layer2.forward(hidden, keep)

    def backward(self, grad_logits) -> None:
        grad_hidden = self.layer2.backward(grad_logits, need_input_grad=True)
        grad_hidden[self._hidden <= 0.0] = 0.0
        self.layer1.backward(grad_hidden, need_input_grad=False)
        self._hidden = None

    def set_view(self, view) -> None:
        for layer in self.layers:
            layer.view = view


def _base_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def make_factor(method: str, m: int, n: int, cfg: TrainConfig, layer_id: int, rng: np.random.Generator):
    sharing = Sharing.SHARED_ACROSS_LAYERS if cfg.shared_basis else Sharing.UNIQUE
    seed_spec = SeedSpec(cfg.seed, layer_id=layer_id, sharing=sharing)
    budget = cfg.params_for(layer_id)
    if method == "nola":
        k = (budget + 1) // 2
        l = budget - k
        if l < 1:
            raise DomainError("NOLA needs at least 2 parameters per layer")
        return NolaFactor.init(m, n, cfg.rank, k, l, seed_spec, rng, c=cfg.c, cache=cfg.cache_basis)
    if method == "pranc":
        return PrancFactor.init(m, n, budget, seed_spec, cache=cfg.cache_basis)
    if method == "lora":
        return LoraFactor.init(m, n, cfg.lora_rank, rng, c=cfg.c)
    if method == "dense":
        return None
    raise DomainError(f"unknown method {method!r}")


def build_mlp(method: str, cfg: TrainConfig, in_dim: int = 784, hidden: int = 256, classes: int = 10) -> MlpModel:
    rng = np.random.default_rng([cfg.seed, 0])
    w1, b1 = _base_linear(rng, in_dim, hidden)
    w2, b2 = _base_linear(rng, hidden, classes)
    layers = []
    for layer_id, (w, b) in enumerate(((w1, b1), (w2, b2))):
        factor = make_factor(method, w.shape[0], w.shape[1], cfg, layer_id, rng)
        layers.append(AdaptedLinear(w, b, factor, train_weight=(method == "dense")))
    return MlpModel(*layers, method=method)


class SGD:
    def __init__(self, params, lr: float):
        self.params, self.lr = params, lr

    def state_size(self) -> int:
        return sum(p.size for p in self.params)

    def step(self, grads) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def state_size(self) -> int:
        return sum(m.size for m in self.m)

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model: MlpModel, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.parameters(), cfg.learning_rate)
    return SGD(model.parameters(), cfg.learning_rate)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    ms_per_batch: float


@dataclass
class TrainTrace:
    initial_loss: float
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")
    epochs: list[EpochStats] = field(default_factory=list)
    total_seconds: float = 0.0

    @property
    def ms_per_batch(self) -> float:
        if not self.epochs:
            return float("nan")
        return float(np.mean([e.ms_per_batch for e in self.epochs]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "acc", "ms_per_batch"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), repr(e.accuracy), f"{e.ms_per_batch:.4f}"])


def evaluate(model: MlpModel, data: Dataset, batch_size: int = 4096) -> tuple[float, float]:
    """Mean loss and accuracy over the whole dataset."""
    if len(data) == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.features[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = model.forward(x)
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


def train(model: MlpModel, data: Dataset, cfg: TrainConfig, log=None) -> TrainTrace:
    """Mini-batch training; the final loss is evaluated on the full dataset afterwards."""
    if cfg.qat_bits is not None:
        model.set_view(FakeQuant(QuantSpec(cfg.qat_bits)))
    opt = make_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    trace = TrainTrace(initial_loss=evaluate(model, data)[0])
    start_all = time.perf_counter()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, correct, batches = 0.0, 0, 0
        t0 = time.perf_counter()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = model.forward(data.features[idx], keep=True)
            loss, grad = cross_entropy(logits, data.labels[idx])
            model.backward(grad)
            opt.step(model.grads())
            losses += loss * len(idx)
            correct += int((logits.argmax(axis=1) == data.labels[idx]).sum())
            batches += 1
        elapsed = time.perf_counter() - t0
        stats = EpochStats(epoch, losses / n, correct / n, 1000.0 * elapsed / max(batches, 1))
        trace.epochs.append(stats)
        if log is not None:
            log(stats)
    trace.total_seconds = time.perf_counter() - start_all
    trace.final_loss, trace.final_accuracy = evaluate(model, data)
    return trace


def export_checkpoint(model: MlpModel, encoding: Encoding = Encoding.FLOAT32) -> TaskCheckpoint:
    """Task checkpoint of the trained adaptation (coefficients and biases)."""
    if model.method == "dense":
        raise DomainError("dense models have no adaptation to export")
    return checkpoint_from_layers(model.layers, MODEL_ID, encoding)


def apply_checkpoint(model: MlpModel, ckpt: TaskCheckpoint) -> MlpModel:
    """New model sharing ``model``'s frozen base weights, adapted by ``ckpt``."""
    if len(ckpt.layers) != len(model.layers):
        raise DomainError(f"checkpoint has {len(ckpt.layers)} layers, model has {len(model.layers)}")
    layers = []
    for layer, rec in zip(model.layers, ckpt.layers):
        bias = layer.bias if rec.bias is None else rec.bias
        layers.append(AdaptedLinear(layer.weight, bias, rec.to_factor(cache=True)))
    return MlpModel(*layers, method=rec.method.name.lower())
