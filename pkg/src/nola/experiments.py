"""Desk-scale experiment drivers behind the ``nola`` subcommands.

Each driver returns an :class:`ExperimentResult`; the command line layer
only parses flags and writes the result, its table and its figure to disk.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UsageError
from .layers import AdaptedLinear, NolaFactor, PrancFactor, compression_ratio, cost_model, param_count
from .linalg import numerical_rank
from .quant import MAX_BITS, MIN_BITS, PASSTHROUGH_BITS, ptq_checkpoint
from .rand_basis import BasisSpec, Role, SeedSpec, generate_basis_stack
from .store import Encoding, dump, read_checkpoint, report, serialize, write_checkpoint
from .train import (
    Dataset,
    TrainConfig,
    apply_checkpoint,
    build_mlp,
    evaluate,
    export_checkpoint,
    find_mnist,
    load_idx,
    synth_dataset,
    train,
)

log = logging.getLogger("nola")

DATA_ENV = "NOLA_DATA_DIR"
CI_EPOCHS = 10
CI_SAMPLES = 5000
FULL_EPOCHS = 200
TOY_SHAPES = ((784, 256), (256, 10))
RESULT_KEYS = ("name", "params", "metrics", "artifacts")


@dataclass
class ExperimentResult:
    name: str
    params: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    # table written as CSV; not part of the JSON summary
    columns: tuple = ()
    rows: list = field(default_factory=list, repr=False)
    text: str = ""

    def to_dict(self) -> dict:
        metrics = {k: (None if v is None or math.isnan(v) else float(v)) for k, v in self.metrics.items()}
        return {"name": self.name, "params": dict(self.params), "metrics": metrics, "artifacts": [str(a) for a in self.artifacts]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def validate_summary(obj: dict) -> None:
    """Raise ``ValueError`` unless ``obj`` has the fixed summary shape."""
    if sorted(obj) != sorted(RESULT_KEYS):
        raise ValueError(f"summary keys {sorted(obj)} != {sorted(RESULT_KEYS)}")
    if not isinstance(obj["name"], str) or not isinstance(obj["params"], dict) or not isinstance(obj["artifacts"], list):
        raise ValueError("summary field types are wrong")
    for key, value in obj["metrics"].items():
        if value is not None and not isinstance(value, (int, float)):
            raise ValueError(f"metric {key} is not a number")


# data


def load_data(spec: Optional[str] = None, full: bool = False, samples: Optional[int] = None, synth_fallback: bool = False, seed: int = 0) -> tuple[Dataset, str]:
    """Resolve ``--data``: ``synth``, ``mnist`` (directory from $NOLA_DATA_DIR) or ``mnist:<dir>``.

    Without ``--data`` the CI default is synthetic data and ``--full``
    selects MNIST.  Returns the dataset and a short description.
    """
    if spec is None:
        spec = "mnist" if full else "synth"
    if samples is not None and samples < 1:
        raise UsageError("--samples must be positive")
    if spec == "synth":
        count = samples if samples is not None else (60_000 if full else CI_SAMPLES)
        per_class = max(count // 10, 1)
        return synth_dataset(10, per_class, seed=seed).subset(count), f"synth:{count}"
    if spec == "mnist" or spec.startswith("mnist:"):
        directory = spec[len("mnist:"):] if spec.startswith("mnist:") else os.environ.get(DATA_ENV, "")
        found = find_mnist(directory) if directory else None
        if found is None:
            if synth_fallback:
                log.warning("MNIST not found in %r, falling back to synthetic data", directory)
                return load_data("synth", full, samples, False, seed)
            raise UsageError(f"MNIST training files not found in {directory!r} (set {DATA_ENV}, pass --data mnist:<dir>, or --synth-fallback)")
        data = load_idx(*found)
        if samples is not None:
            data = data.subset(samples)
        return data, f"mnist:{len(data)}"
    raise UsageError(f"--data must be synth, mnist or mnist:<dir>, got {spec!r}")


def _train_params(method: str, cfg: TrainConfig, data_desc: str) -> dict:
    return {
        "method": method,
        "data": data_desc,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.learning_rate,
        "optimizer": cfg.optimizer,
        "params_per_layer": list(cfg.layer_params) if cfg.layer_params else cfg.params_per_layer,
        "rank": cfg.rank,
        "lora_rank": cfg.lora_rank,
        "seed": cfg.seed,
    }


def _epoch_logger(stats) -> None:
    log.info("epoch %d loss %.4f acc %.3f %.1f ms/batch", stats.epoch, stats.loss, stats.accuracy, stats.ms_per_batch)


def train_toy(method: str, cfg: TrainConfig, data: Dataset, data_desc: str = "") -> tuple[ExperimentResult, object]:
    """Train the toy MLP; returns the result and the trained model."""
    model = build_mlp(method, cfg)
    trace = train(model, data, cfg, log=_epoch_logger)
    res = ExperimentResult("train-toy", _train_params(method, cfg, data_desc))
    res.metrics = {
        "initial_train_loss": trace.initial_loss,
        "final_train_loss": trace.final_loss,
        "final_train_accuracy": trace.final_accuracy,
        "total_seconds": trace.total_seconds,
        "ms_per_batch": trace.ms_per_batch,
        "trainable_params": float(model.num_trainable()),
        "delta_params": float(model.num_delta_params()),
    }
    res.columns = ("epoch", "loss", "acc", "ms_per_batch")
    res.rows = [(e.epoch, e.loss, e.accuracy, e.ms_per_batch) for e in trace.epochs]
    return res, model


# rank coverage


def delta_samples(method: str, d: int, total_params: int, rank: int, samples: int, seed: int = 0) -> np.ndarray:
    """``samples x d*d`` matrix of vectorized deltas with standard normal coefficients."""
    if samples < 1:
        raise UsageError("--samples must be at least 1")
    rng = np.random.default_rng(seed)
    seed_spec = SeedSpec(seed)
    if method == "pranc":
        stack = generate_basis_stack(BasisSpec(d, d, total_params), seed_spec.with_(role=Role.A))
        theta = rng.standard_normal((samples, total_params))
        return theta @ stack.reshape(total_params, d * d)
    if method == "nola":
        k = (total_params + 1) // 2
        l = total_params - k
        if l < 1:
            raise UsageError("NOLA needs at least 2 parameters")
        if rank > d:
            raise UsageError(f"rank {rank} exceeds d={d}")
        a_stack = generate_basis_stack(BasisSpec(d, rank, k), seed_spec.with_(role=Role.A))
        b_stack = generate_basis_stack(BasisSpec(rank, d, l), seed_spec.with_(role=Role.B))
        alpha = rng.standard_normal((samples, k))
        beta = rng.standard_normal((samples, l))
        a = np.einsum("sk,kdr->sdr", alpha, a_stack)
        b = np.einsum("sl,lrd->srd", beta, b_stack)
        return (a @ b).reshape(samples, d * d)
    raise UsageError(f"rank coverage supports nola and pranc, not {method!r}")


def default_param_sweep(d: int) -> list[int]:
    top = 2 * d * d
    sweep, p = [], 2
    while p <= top:
        sweep.append(p)
        p *= 2
    return sweep


def rank_coverage(d: int = 16, total_params: Optional[Sequence[int]] = None, rank: int = 2, samples: Optional[int] = None,
                  methods: Sequence[str] = ("nola", "pranc"), seed: int = 0) -> ExperimentResult:
    if d < 1:
        raise UsageError("--d must be positive")
    samples = 4 * d * d if samples is None else samples
    if samples < 1:
        raise UsageError("--samples must be at least 1")
    sweep = sorted(total_params) if total_params else default_param_sweep(d)
    res = ExperimentResult("rank-coverage", {"d": d, "rank": rank, "samples": samples, "methods": list(methods), "seed": seed,
                                             "total_params": list(sweep)})
    res.columns = ("method", "total_params", "rank", "coverage")
    t0 = time.perf_counter()
    for method in methods:
        for p in sweep:
            rk = numerical_rank(delta_samples(method, d, p, rank, samples, seed))
            cov = rk / (d * d)
            res.rows.append((method, p, rk, cov))
            res.metrics[f"{method}_rank_p{p}"] = float(rk)
            res.metrics[f"{method}_coverage_p{p}"] = cov
    res.metrics["seconds"] = time.perf_counter() - t0
    return res


# bench


def _bench_layer(method: str, d: int, k: int, rank: int, chunk_size: int, seed: int) -> AdaptedLinear:
    seed_spec = SeedSpec(seed)
    if method == "nola":
        ka = (k + 1) // 2
        rng = np.random.default_rng(seed)
        factor = NolaFactor(d, d, rank, ka, k - ka, rng.standard_normal(ka), rng.standard_normal(k - ka), seed_spec, chunk_size=chunk_size)
    elif method == "pranc":
        factor = PrancFactor(d, d, k, np.random.default_rng(seed).standard_normal(k), seed_spec, chunk_size=chunk_size)
    else:
        raise UsageError(f"bench supports nola and pranc, not {method!r}")
    return AdaptedLinear(np.zeros((d, d)), np.zeros(d), factor)


def bench(d: int = 1024, k: int = 1000, rank: int = 8, batches: int = 1, chunk_size: int = 16, batch_rows: int = 128,
          methods: Sequence[str] = ("nola", "pranc"), seed: int = 0) -> ExperimentResult:
    """Forward+backward wall time of one ``d x d`` layer, bases regenerated every pass."""
    if min(d, k, rank, chunk_size, batch_rows) < 1 or batches < 0:
        raise UsageError("--d, --k, --rank, --chunk-size, --batch-rows must be positive and --batches >= 0")
    if rank > d:
        raise UsageError(f"rank {rank} exceeds d={d}")
    cost = cost_model(d, k, rank)
    res = ExperimentResult("bench", {"d": d, "k": k, "rank": rank, "batches": batches, "chunk_size": chunk_size,
                                     "batch_rows": batch_rows, "methods": list(methods), "seed": seed})
    res.columns = ("method", "batch", "ms")
    res.metrics = {"analytic_speedup": cost.speedup, "pranc_flops": float(cost.pranc_flops), "nola_flops": float(cost.nola_flops)}
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch_rows, d))
    grad = rng.standard_normal((batch_rows, d))
    for method in methods:
        layer = _bench_layer(method, d, k, rank, chunk_size, seed)
        times = []
        for b in range(batches):
            t0 = time.perf_counter()
            layer.forward(x, keep=True)
            layer.backward(grad)
            times.append(1000.0 * (time.perf_counter() - t0))
            res.rows.append((method, b, times[-1]))
            log.info("%s batch %d: %.1f ms", method, b, times[-1])
        res.metrics[f"{method}_ms_per_batch"] = float(np.mean(times)) if times else float("nan")
    nola_ms = res.metrics.get("nola_ms_per_batch", float("nan"))
    pranc_ms = res.metrics.get("pranc_ms_per_batch", float("nan"))
    res.metrics["measured_speedup"] = pranc_ms / nola_ms if batches else float("nan")
    return res


# quantization


def check_bits(bits: Sequence[int], mode: str) -> list[int]:
    out = []
    for b in bits:
        if mode == "ptq" and b == PASSTHROUGH_BITS:
            out.append(b)
        elif MIN_BITS <= b <= MAX_BITS:
            out.append(b)
        else:
            raise UsageError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}] (or {PASSTHROUGH_BITS} for ptq passthrough), got {b}")
    return out


def matched_layer_params(lora_rank: int) -> tuple[int, ...]:
    """NOLA coefficient budget per toy layer equal to LoRA's ``r(m+n)``."""
    return tuple(param_count("lora", m, n, r=lora_rank) for m, n in TOY_SHAPES)


def quant_sweep(bits: Sequence[int], mode: str, cfg: TrainConfig, data: Dataset, data_desc: str = "",
                methods: Sequence[str] = ("nola", "lora"), matched: bool = True) -> ExperimentResult:
    """Loss against bits for NOLA and LoRA, post-training or quantization-aware.

    With ``matched`` the NOLA budget per layer equals LoRA's parameter count.
    """
    if mode not in ("ptq", "qat"):
        raise UsageError(f"--mode must be ptq or qat, got {mode!r}")
    bits = check_bits(bits, mode)
    if matched:
        cfg = replace(cfg, layer_params=matched_layer_params(cfg.lora_rank))
    res = ExperimentResult("quant-sweep", {**_train_params("nola,lora", cfg, data_desc), "mode": mode, "bits": list(bits), "matched": matched})
    res.columns = ("method", "mode", "bits", "loss", "fp_loss", "delta")
    for method in methods:
        model = build_mlp(method, cfg)
        fp_trace = train(model, data, cfg, log=_epoch_logger)
        res.metrics[f"{method}_params"] = float(model.num_delta_params())
        if mode == "ptq":
            ckpt = export_checkpoint(model, Encoding.FLOAT64)
            fp_loss = evaluate(apply_checkpoint(model, ckpt), data)[0]
        else:
            fp_loss = fp_trace.final_loss
        res.metrics[f"{method}_fp_loss"] = fp_loss
        for b in bits:
            if mode == "ptq":
                loss = evaluate(apply_checkpoint(model, ptq_checkpoint(ckpt, b)), data)[0]
            else:
                qmodel = build_mlp(method, cfg)
                loss = train(qmodel, data, replace(cfg, qat_bits=b), log=_epoch_logger).final_loss
            res.rows.append((method, mode, b, loss, fp_loss, loss - fp_loss))
            res.metrics[f"{method}_loss_{b}bit"] = loss
            res.metrics[f"{method}_delta_{b}bit"] = loss - fp_loss
    return res


# rank ablation


def check_ranks(ranks: Sequence[int]) -> list[int]:
    limit = min(min(s) for s in TOY_SHAPES)
    if not ranks:
        raise UsageError("no ranks given")
    for r in ranks:
        if not 1 <= r <= limit:
            raise UsageError(f"rank {r} outside [1, {limit}] for the toy layers")
    return list(ranks)


def check_encoding(encoding: str) -> tuple[Encoding, int]:
    enc, bits = Encoding.parse(encoding)
    if enc == Encoding.QUANTIZED:
        check_bits([bits], "qat")
    return enc, bits


def rank_ablation(ranks: Sequence[int], cfg: TrainConfig, data: Dataset, data_desc: str = "") -> ExperimentResult:
    check_ranks(ranks)
    res = ExperimentResult("rank-ablation", {**_train_params("nola", cfg, data_desc), "ranks": list(ranks)})
    res.columns = ("rank", "params", "bytes", "loss")
    for r in ranks:
        rcfg = replace(cfg, rank=r)
        model = build_mlp("nola", rcfg)
        trace = train(model, data, rcfg, log=_epoch_logger)
        size = len(serialize(export_checkpoint(model, Encoding.FLOAT32)))
        res.rows.append((r, model.num_delta_params(), size, trace.final_loss))
        res.metrics[f"loss_r{r}"] = trace.final_loss
    if len({row[1] for row in res.rows}) > 1 or len({row[2] for row in res.rows}) > 1:
        raise RuntimeError(f"parameter count or size changed with rank: {res.rows}")
    if res.rows:
        res.metrics["params"] = float(res.rows[0][1])
        res.metrics["bytes"] = float(res.rows[0][2])
    return res


# export / info


def export(path, method: str, cfg: TrainConfig, data: Dataset, encoding: str = "float32", data_desc: str = "") -> ExperimentResult:
    if method == "dense":
        raise UsageError("dense training has no adaptation to export")
    enc, bits = check_encoding(encoding)
    _, model = train_toy(method, cfg, data, data_desc)
    ckpt = export_checkpoint(model, Encoding.FLOAT64 if enc == Encoding.FLOAT64 else Encoding.FLOAT32)
    if enc == Encoding.QUANTIZED:
        ckpt = ptq_checkpoint(ckpt, bits)
    size = write_checkpoint(path, ckpt)
    counts = [layer_param_count(rec) for rec in ckpt.layers]
    res = ExperimentResult("export", {**_train_params(method, cfg, data_desc), "encoding": encoding, "out": str(path)})
    res.artifacts.append(str(path))
    res.metrics = {"size_bytes": float(size), "params": float(ckpt.num_params), "param_count": float(sum(counts)),
                   "final_train_loss": evaluate(model, data)[0]}
    res.columns = ("layer_id", "method", "m", "n", "params")
    res.rows = [(rec.layer_id, rec.method.name.lower(), rec.m, rec.n, rec.num_params) for rec in ckpt.layers]
    return res


def layer_param_count(rec) -> int:
    return param_count(rec.method, rec.m, rec.n, r=rec.r, k=rec.k, l=rec.l, p=rec.k)


def info(path) -> ExperimentResult:
    ckpt = read_checkpoint(path)
    entry = report({Path(path).name: ckpt}).entries[0]
    res = ExperimentResult("info", {"file": str(path)})
    res.metrics = {"size_bytes": float(entry.size_bytes), "params": float(entry.params), "compression_ratio": entry.compression_ratio,
                   "layers": float(len(ckpt.layers))}
    res.text = dump(ckpt) + f"\nsize={entry.size_bytes} params={entry.params} ratio={entry.compression_ratio:.6g}"
    res.columns = ("layer_id", "method", "m", "n", "params", "ratio")
    res.rows = [(rec.layer_id, rec.method.name.lower(), rec.m, rec.n, rec.num_params,
                 compression_ratio(rec.method, rec.m, rec.n, r=rec.r, k=rec.k, l=rec.l, p=rec.k)) for rec in ckpt.layers]
    return res
