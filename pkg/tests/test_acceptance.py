"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line (see conftest.py) before asserting,
so the summary lists all criteria even when some fail.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from nola import experiments as ex
from nola.errors import FormatError
from nola.layers import (
    AdaptedLinear,
    LoraFactor,
    Method,
    NolaFactor,
    PrancFactor,
    coeff_gradients,
    compression_ratio,
    cost_model,
    param_count,
)
from nola.quant import QuantSpec, fake_quantize, ptq_checkpoint, qat_step
from nola.rand_basis import BasisSpec, Role, SeedSpec, Sharing, accumulate_mixture, generate_basis_matrix
from nola.store import Encoding, LayerRecord, TaskCheckpoint, deserialize, read_checkpoint, reconstruct, serialize, write_checkpoint
from nola.train import TrainConfig, apply_checkpoint, build_mlp, cross_entropy, evaluate, export_checkpoint, synth_dataset, train

CI_DATA = synth_dataset(10, 500, seed=0)


def test_c1_gradient_exactness(record):
    rng = np.random.default_rng(2024)
    h = 1e-5
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(20):
        r = (1, 2, 4)[i % 3]
        f = NolaFactor(12, 12, r, 5, 5, rng.standard_normal(5), rng.standard_normal(5), SeedSpec(int(rng.integers(2**63)), layer_id=i))
        g = rng.standard_normal((12, 12))
        analytic = np.concatenate(coeff_gradients(f, g))

        def loss(theta):
            return float(np.sum(g * replace(f, alpha=theta[:5], beta=theta[5:]).delta()))

        theta = np.concatenate([f.alpha, f.beta])
        numeric = np.empty(10)
        for j in range(10):
            e = np.zeros(10)
            e[j] = h
            numeric[j] = (loss(theta + e) - loss(theta - e)) / (2 * h)
        worst = max(worst, np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 5.0
    record(1, ok, f"max rel err {worst:.2e} (<= 1e-6), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_c2_determinism_and_parallel_invariance(record):
    cases = [(BasisSpec(12, 3, 20), SeedSpec(7, Role.A, layer_id=2)), (BasisSpec(5, 40, 9), SeedSpec(2**64 - 1, Role.B, layer_id=0)),
             (BasisSpec(30, 30, 13), SeedSpec(11, Role.A, sharing=Sharing.SHARED_ACROSS_LAYERS))]
    ok = True
    for spec, seed_spec in cases:
        coeffs = np.random.default_rng(spec.count).standard_normal(spec.count)
        for i in range(spec.count):
            ok &= np.array_equal(generate_basis_matrix(spec, seed_spec, i), generate_basis_matrix(spec, seed_spec, i))
        ref = accumulate_mixture(spec, seed_spec, coeffs, chunk_size=spec.count)
        for _ in range(2):
            for chunk in (1, 7, spec.count):
                for workers in (1, 4):
                    ok &= np.array_equal(accumulate_mixture(spec, seed_spec, coeffs, chunk_size=chunk, workers=workers), ref)
    record(2, bool(ok), "bitwise identical over 2 runs x chunks {1,7,count} x workers {1,4}")
    assert ok


def test_c3_merge_equivalence(record):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(10):
        m, n = 2 ** int(rng.integers(3, 9)), int(rng.integers(4, 257))
        m = n = min(max(m, 4), 256) if i % 2 else n
        r = int(rng.integers(1, 9))
        kind = i % 3
        if kind == 0:
            f = NolaFactor(m, n, r, 20, 20, rng.standard_normal(20), rng.standard_normal(20), SeedSpec(i, layer_id=i), c=2.0)
        elif kind == 1:
            f = LoraFactor(m, n, r, rng.standard_normal((m, r)), rng.standard_normal((r, n)), c=2.0)
        else:
            f = PrancFactor(m, n, 16, rng.standard_normal(16), SeedSpec(i, layer_id=i))
        layer = AdaptedLinear(rng.standard_normal((m, n)), rng.standard_normal(n), f)
        x = rng.standard_normal((32, m))
        worst = max(worst, float(np.max(np.abs(layer.forward(x) - layer.merged_forward(x)))))
    ok = worst <= 1e-10
    record(3, ok, f"max |factored - merged| {worst:.2e} (<= 1e-10) over 10 layers, m=n<=256")
    assert ok


def test_c4_rank_coverage(record):
    t0 = time.perf_counter()
    pranc = ex.rank_coverage(16, [16], 2, 1024, ("pranc",)).metrics["pranc_rank_p16"]
    nola = ex.rank_coverage(16, [16, 32], 2, 1024, ("nola",)).metrics
    elapsed = time.perf_counter() - t0
    got = (int(pranc), int(nola["nola_rank_p16"]), int(nola["nola_rank_p32"]))
    ok = got == (16, 64, 256) and elapsed < 30.0
    record(4, ok, f"ranks PRANC p=16 / NOLA k=l=8 / NOLA k=l=16 = {got} (want (16, 64, 256)), {elapsed:.2f} s (< 30 s)")
    assert ok


def _toy_pair(data, cfg):
    out = {}
    for method in ("nola", "pranc"):
        out[method] = train(build_mlp(method, cfg), data, cfg)
    return out


def test_c5_toy_ordering_ci_scale(record):
    cfg = TrainConfig(epochs=20, batch_size=512, learning_rate=0.05, params_per_layer=32, rank=4)
    res = _toy_pair(CI_DATA, cfg)
    nola, pranc = res["nola"], res["pranc"]
    loss_ok = nola.final_loss <= pranc.final_loss - 0.02
    time_ok = nola.ms_per_batch < pranc.ms_per_batch
    record(5, loss_ok and time_ok,
           f"CI synth 5K/20 epochs: NOLA loss {nola.final_loss:.4f} vs PRANC {pranc.final_loss:.4f} (need NOLA <= PRANC - 0.02); "
           f"ms/batch {nola.ms_per_batch:.1f} vs {pranc.ms_per_batch:.1f}")
    assert loss_ok and time_ok


@pytest.mark.slow
def test_c5_toy_ordering_full_mnist(record):
    try:
        data, desc = ex.load_data("mnist", full=True)
    except ex.UsageError as err:
        data, missing = None, str(err)
    if data is None:
        record(5, False, f"full MNIST run not possible: {missing}")
        pytest.fail(f"MNIST unavailable: {missing}")
    cfg = TrainConfig(epochs=200, batch_size=512, learning_rate=0.05, params_per_layer=32, rank=4)
    res = _toy_pair(data, cfg)
    nola, pranc = res["nola"], res["pranc"]
    ok = nola.final_loss <= pranc.final_loss - 0.05 and nola.ms_per_batch < pranc.ms_per_batch
    record(5, ok, f"full {desc}: NOLA loss {nola.final_loss:.4f} vs PRANC {pranc.final_loss:.4f} (need margin 0.05); "
                  f"ms/batch {nola.ms_per_batch:.1f} vs {pranc.ms_per_batch:.1f}")
    assert ok


def test_c6_analytic_speedup(record):
    d, k, r = 1024, 1000, 8
    want = (k * d * d + d * d) / (k * d * r + 2 * d * r)
    got = cost_model(d, k, r).speedup
    ok = abs(got - want) <= 1e-9 and abs(got - 127.87) < 0.01
    record(6, ok, f"analytic speedup {got:.6f} vs {want:.6f}")
    assert ok


@pytest.mark.slow
def test_c6_measured_speedup(record):
    res = ex.bench(d=1024, k=1000, rank=8, batches=1, chunk_size=16)
    speedup = res.metrics["measured_speedup"]
    ok = speedup >= 3.0
    record(6, ok, f"measured {res.metrics['nola_ms_per_batch']:.0f} vs {res.metrics['pranc_ms_per_batch']:.0f} ms/batch, "
                  f"speedup {speedup:.1f}x (>= 3x)")
    assert ok


def test_c7_quantization(record):
    cfg = TrainConfig(epochs=20)
    ptq = {}
    for method in ("nola", "lora"):
        model = build_mlp(method, cfg)
        train(model, CI_DATA, cfg)
        ckpt = export_checkpoint(model, Encoding.FLOAT64)
        fp = evaluate(apply_checkpoint(model, ckpt), CI_DATA)[0]
        for bits in (8, 4):
            ptq[method, bits] = abs(evaluate(apply_checkpoint(model, ptq_checkpoint(ckpt, bits)), CI_DATA)[0] - fp)
    ptq_ok = all(v <= 0.01 for (m, b), v in ptq.items() if b == 8) and all(v <= 0.05 for (m, b), v in ptq.items() if b == 4)

    matched = replace(cfg, layer_params=ex.matched_layer_params(1))
    degr, params = {}, {}
    for method in ("nola", "lora"):
        fp = train(build_mlp(method, matched), CI_DATA, matched).final_loss
        model = build_mlp(method, matched)
        params[method] = model.num_delta_params()
        degr[method] = train(model, CI_DATA, replace(matched, qat_bits=3)).final_loss - fp
    qat_ok = params["nola"] == params["lora"] and degr["nola"] < degr["lora"]

    rng = np.random.default_rng(7)
    f = NolaFactor(8, 8, 2, 4, 4, np.array([0.0, 1.0, 2.0, 3.0]), np.array([-1.0, 0.0, 1.0, 2.0]), SeedSpec(1))
    g = rng.standard_normal((8, 8))
    exact = all(np.array_equal(a, b) for a, b in zip(qat_step(f, QuantSpec(2), g), coeff_gradients(f, g)))
    f2 = NolaFactor(8, 8, 2, 4, 4, rng.standard_normal(4), rng.standard_normal(4), SeedSpec(2))
    sub = replace(f2, alpha=fake_quantize(f2.alpha, 3), beta=fake_quantize(f2.beta, 3))
    exact &= all(np.array_equal(a, b) for a, b in zip(qat_step(f2, QuantSpec(3), g), coeff_gradients(sub, g)))

    ok = ptq_ok and qat_ok and exact
    record(7, ok, "PTQ |dloss| " + ", ".join(f"{m} {b}-bit {v:.1e}" for (m, b), v in ptq.items())
           + f"; QAT 3-bit degradation NOLA {degr['nola']:+.4f} vs LoRA {degr['lora']:+.4f} at {params['nola']} params each"
           + f"; STE identity {'exact' if exact else 'broken'}")
    assert ok


def test_c8_parameter_accounting(record):
    medium = param_count("nola", 1024, 1024, k=1000, l=1000, num_layers=48)
    large = param_count("nola", 1280, 1280, k=1000, l=1000, num_layers=72)
    nola_ratio = compression_ratio("nola", 1024, 1024, k=128, l=128)
    lora_ratio = compression_ratio("lora", 1024, 1024, r=1)
    ok = medium == 96_000 and large == 144_000 and nola_ratio == 4096 and lora_ratio == 512 and nola_ratio > lora_ratio
    record(8, ok, f"GPT-2 M {medium}, L {large}; ratio NOLA {nola_ratio:g} > LoRA r=1 {lora_ratio:g}")
    assert ok


def _random_record(rng, layer_id):
    method = Method(int(rng.integers(3)))
    m, n = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    r = int(rng.integers(1, min(m, n) + 1))
    seed_spec = SeedSpec(int(rng.integers(2**63)), layer_id=layer_id, sharing=Sharing(int(rng.integers(2))))
    if method == Method.NOLA:
        k, l = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        f = NolaFactor(m, n, r, k, l, rng.standard_normal(k), rng.standard_normal(l), seed_spec, float(rng.uniform(0.5, 4)))
    elif method == Method.LORA:
        f = LoraFactor(m, n, r, rng.standard_normal((m, r)), rng.standard_normal((r, n)))
    else:
        p = int(rng.integers(1, 7))
        f = PrancFactor(m, n, p, rng.standard_normal(p), seed_spec)
    bias = rng.standard_normal(n) if rng.integers(2) else None
    return LayerRecord.from_factor(f, layer_id=layer_id, bias=bias, encoding=Encoding(int(rng.integers(2))))


def test_c9_checkpoint_format(record, tmp_path):
    rng = np.random.default_rng(9)
    fixed_point = truncations_ok = True
    cuts = 0
    for _ in range(1000):
        ckpt = TaskCheckpoint("fuzz" * int(rng.integers(0, 3)), [_random_record(rng, i) for i in range(int(rng.integers(0, 4)))])
        if ckpt.layers and rng.integers(2):
            ckpt = ptq_checkpoint(ckpt, int(rng.integers(2, 9)))
        blob = serialize(ckpt)
        fixed_point &= serialize(deserialize(blob)) == blob
        for cut in range(len(blob)):
            cuts += 1
            try:
                deserialize(blob[:cut])
                truncations_ok = False
            except FormatError:
                pass

    drift = 0.0
    for method in ("nola", "lora", "pranc"):
        cfg = TrainConfig(epochs=3)
        model = build_mlp(method, cfg)
        train(model, CI_DATA, cfg)
        path = tmp_path / f"{method}.nola"
        write_checkpoint(path, export_checkpoint(model, Encoding.FLOAT64))
        ckpt = read_checkpoint(path)
        w1, w2 = reconstruct(ckpt, [layer.weight for layer in model.layers])
        b1, b2 = (rec.bias for rec in ckpt.layers)
        logits = np.maximum(CI_DATA.features @ w1 + b1, 0.0) @ w2 + b2
        merged_loss = cross_entropy(logits, CI_DATA.labels)[0]
        drift = max(drift, abs(merged_loss - evaluate(model, CI_DATA)[0]))
    ok = fixed_point and truncations_ok and drift <= 1e-10
    record(9, ok, f"1000 roundtrips byte-identical: {fixed_point}; {cuts} truncations rejected: {truncations_ok}; "
                  f"train->export->reconstruct drift {drift:.1e} (<= 1e-10)")
    assert ok
