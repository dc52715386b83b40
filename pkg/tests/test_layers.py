import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nola.errors import DomainError
from nola.layers import (
    AdaptedLinear,
    LoraFactor,
    NolaFactor,
    PrancFactor,
    coeff_gradients,
    compression_ratio,
    cost_model,
    forward,
    lora_delta,
    merge,
    nola_delta,
    param_count,
    pranc_delta,
    pranc_gradients,
)
from nola.rand_basis import BasisSpec, Role, SeedSpec, generate_basis_matrix


def random_nola(rng, m=12, n=12, r=2, k=5, l=5, c=1.0, seed=3, **kw):
    return NolaFactor(m, n, r, k, l, rng.standard_normal(k), rng.standard_normal(l), SeedSpec(seed, layer_id=1), c, **kw)


def brute_nola_delta(f):
    """sum_ij (c/r) alpha_i beta_j A_i B_j from individually generated bases."""
    a_spec, b_spec = BasisSpec(f.m, f.r, f.k), BasisSpec(f.r, f.n, f.l)
    a_seed, b_seed = f.seed_spec.with_(role=Role.A), f.seed_spec.with_(role=Role.B)
    out = np.zeros((f.m, f.n))
    for i in range(f.k):
        ai = generate_basis_matrix(a_spec, a_seed, i)
        for j in range(f.l):
            out += (f.c / f.r) * f.alpha[i] * f.beta[j] * (ai @ generate_basis_matrix(b_spec, b_seed, j))
    return out


def central_diff(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_nola_zero_coefficients():
    rng = np.random.default_rng(0)
    f = random_nola(rng)
    f.alpha[:] = 0.0
    assert not nola_delta(f).any()
    f = random_nola(rng)
    f.beta[:] = 0.0
    assert not nola_delta(f).any()


def test_nola_single_basis_identity():
    f = NolaFactor(6, 4, 3, 1, 1, [1.0], [1.0], SeedSpec(9), c=3.0)
    a = generate_basis_matrix(BasisSpec(6, 3, 1), SeedSpec(9, Role.A), 0)
    b = generate_basis_matrix(BasisSpec(3, 4, 1), SeedSpec(9, Role.B), 0)
    assert np.array_equal(nola_delta(f), a @ b)


def test_nola_delta_matches_bilinear_expansion():
    f = random_nola(np.random.default_rng(1), r=2)
    assert np.linalg.norm(nola_delta(f) - brute_nola_delta(f)) <= 1e-10


def test_nola_cached_and_streamed_agree_bitwise():
    rng = np.random.default_rng(2)
    f = random_nola(rng, m=20, n=9, r=3, k=11, l=7)
    g = NolaFactor(f.m, f.n, f.r, f.k, f.l, f.alpha, f.beta, f.seed_spec, cache=True)
    assert np.array_equal(nola_delta(f, chunk_size=3), g.delta())


def test_nola_bilinear():
    rng = np.random.default_rng(3)
    f = random_nola(rng)
    doubled = NolaFactor(f.m, f.n, f.r, f.k, f.l, 2 * f.alpha, f.beta, f.seed_spec)
    np.testing.assert_allclose(nola_delta(doubled), 2 * nola_delta(f), rtol=0, atol=1e-14)
    other = rng.standard_normal(f.l)
    summed = NolaFactor(f.m, f.n, f.r, f.k, f.l, f.alpha, f.beta + other, f.seed_spec)
    split = nola_delta(f) + nola_delta(NolaFactor(f.m, f.n, f.r, f.k, f.l, f.alpha, other, f.seed_spec))
    np.testing.assert_allclose(nola_delta(summed), split, atol=1e-13)


def test_nola_rejects_bad_shapes():
    with pytest.raises(DomainError):
        NolaFactor(4, 4, 2, 3, 3, np.ones(2), np.ones(3))
    with pytest.raises(DomainError):
        NolaFactor(4, 4, 5, 3, 3, np.ones(3), np.ones(3))
    f = random_nola(np.random.default_rng(0))
    with pytest.raises(DomainError):
        coeff_gradients(f, np.ones((3, 3)))


def test_coeff_gradients_zero_cases():
    rng = np.random.default_rng(4)
    f = random_nola(rng)
    ga, gb = coeff_gradients(f, np.zeros((12, 12)))
    assert not ga.any() and not gb.any()
    f.beta[:] = 0.0
    ga, _ = coeff_gradients(f, rng.standard_normal((12, 12)))
    assert not ga.any()


@pytest.mark.parametrize("r", [1, 2, 4])
def test_coeff_gradients_finite_differences(r):
    rng = np.random.default_rng(10 + r)
    f = random_nola(rng, r=r, c=1.7)
    g = rng.standard_normal((12, 12))
    ga, gb = coeff_gradients(f, g)

    def loss_alpha(a):
        return float(np.sum(g * nola_delta(NolaFactor(12, 12, r, 5, 5, a, f.beta, f.seed_spec, f.c))))

    def loss_beta(b):
        return float(np.sum(g * nola_delta(NolaFactor(12, 12, r, 5, 5, f.alpha, b, f.seed_spec, f.c))))

    assert rel_err(ga, central_diff(loss_alpha, f.alpha)) <= 1e-6
    assert rel_err(gb, central_diff(loss_beta, f.beta)) <= 1e-6


def test_param_count_is_decoupled_from_rank_and_shape():
    rng = np.random.default_rng(0)
    sizes = {random_nola(rng, m=m, n=n, r=r, k=7, l=9).num_params for m, n, r in [(12, 12, 1), (30, 8, 4), (64, 64, 8)]}
    assert sizes == {16}


def test_lora_zero_b_and_gradients():
    rng = np.random.default_rng(5)
    f = LoraFactor.init(7, 5, 2, rng)
    assert not lora_delta(f).any()
    f = LoraFactor(7, 5, 2, rng.standard_normal((7, 2)), rng.standard_normal((2, 5)), c=3.0)
    g = rng.standard_normal((7, 5))
    ga, gb = f.gradients(g)
    fa = central_diff(lambda a: float(np.sum(g * LoraFactor(7, 5, 2, a, f.b, 3.0).delta())), f.a)
    fb = central_diff(lambda b: float(np.sum(g * LoraFactor(7, 5, 2, f.a, b, 3.0).delta())), f.b)
    assert rel_err(ga, fa) <= 1e-6 and rel_err(gb, fb) <= 1e-6


def test_pranc_one_hot_and_gradient():
    rng = np.random.default_rng(6)
    ss = SeedSpec(4, layer_id=2)
    theta = np.zeros(6)
    theta[4] = 1.0
    f = PrancFactor(5, 3, 6, theta, ss)
    assert np.array_equal(pranc_delta(f), generate_basis_matrix(BasisSpec(5, 3, 6), ss.with_(role=Role.A), 4))
    f = PrancFactor(5, 3, 6, rng.standard_normal(6), ss)
    g = rng.standard_normal((5, 3))
    fd = central_diff(lambda t: float(np.sum(g * PrancFactor(5, 3, 6, t, ss).delta())), f.theta)
    assert rel_err(pranc_gradients(f, g), fd) <= 1e-6


def make_layer(rng, kind, m, n, cache=False):
    w = rng.standard_normal((m, n))
    b = rng.standard_normal(n)
    if kind == "nola":
        delta = NolaFactor(m, n, min(4, m, n), 6, 5, rng.standard_normal(6), rng.standard_normal(5), SeedSpec(1), cache=cache)
    elif kind == "lora":
        delta = LoraFactor(m, n, 2, rng.standard_normal((m, 2)), rng.standard_normal((2, n)))
    elif kind == "pranc":
        delta = PrancFactor(m, n, 7, rng.standard_normal(7), SeedSpec(2), cache=cache)
    else:
        delta = None
    return AdaptedLinear(w, b, delta)


def test_forward_without_delta_is_affine():
    rng = np.random.default_rng(7)
    layer = make_layer(rng, None, 6, 4)
    x = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(forward(layer, x), x @ layer.weight + layer.bias)
    with pytest.raises(DomainError):
        merge(layer)
    with pytest.raises(DomainError):
        forward(layer, np.ones((3, 5)))


def test_nola_zero_alpha_forward_equals_base():
    rng = np.random.default_rng(8)
    layer = make_layer(rng, "nola", 6, 4)
    layer.delta.alpha[:] = 0.0
    x = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(forward(layer, x), x @ layer.weight + layer.bias)
    np.testing.assert_array_equal(merge(layer), layer.weight)


@pytest.mark.parametrize("kind", ["nola", "lora", "pranc"])
def test_merge_equivalence_and_inverse(kind):
    rng = np.random.default_rng(9)
    layer = make_layer(rng, kind, 17, 11)
    x = rng.standard_normal((8, 17))
    assert np.max(np.abs(forward(layer, x) - layer.merged_forward(x))) <= 1e-10
    merged = merge(layer)
    assert np.max(np.abs(merged - layer.delta.delta() - layer.weight)) <= 1e-12


@pytest.mark.parametrize("kind", ["nola", "lora", "pranc", None])
def test_layer_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(12)
    layer = make_layer(rng, kind, 6, 5, cache=True)
    layer.train_weight = kind is None
    x = rng.standard_normal((4, 6))
    target = rng.standard_normal((4, 5))

    def loss():
        return 0.5 * float(np.sum((layer.forward(x) - target) ** 2))

    out = layer.forward(x, keep=True)
    grad_x = layer.backward(out - target)
    for p, g in zip(layer.parameters(), layer.grads):
        def at(v, p=p):
            saved = p.copy()
            p[...] = v
            val = loss()
            p[...] = saved
            return val

        assert rel_err(g, central_diff(at, p.copy())) <= 1e-6
    fd_x = central_diff(lambda v: 0.5 * float(np.sum((layer.forward(v) - target) ** 2)), x)
    assert rel_err(grad_x, fd_x) <= 1e-6


def test_frozen_weight_not_in_parameters():
    layer = make_layer(np.random.default_rng(0), "nola", 5, 5)
    assert all(p is not layer.weight for p in layer.parameters())
    assert len(layer.parameters()) == 3


# GPT-2 layouts: k = l = 1000 on the query and value projections
@pytest.mark.parametrize("blocks, expected", [(24, 96_000), (36, 144_000)])
def test_param_count_gpt2_configs(blocks, expected):
    assert param_count("nola", 1024, 1024, k=1000, l=1000, num_layers=blocks * 2) == expected


def test_param_count_and_ratio_arithmetic():
    assert param_count("lora", 1024, 1024, r=1) == 2048
    assert param_count("pranc", 10, 10, p=33, num_layers=2) == 66
    assert compression_ratio("lora", 1024, 1024, r=1) == 512.0
    assert compression_ratio("nola", 1024, 1024, k=128, l=128) == 4096.0
    assert compression_ratio("nola", 300, 500, k=300, l=500) == compression_ratio("lora", 300, 500, r=1)


def test_cost_model_examples():
    rep = cost_model(1024, 1000, 8)
    assert rep.pranc_flops == 1000 * 1024**2 + 1024**2 == 1_049_624_576
    assert rep.nola_flops == 1000 * 1024 * 8 + 2 * 1024 * 8 == 8_208_384
    assert rep.speedup == pytest.approx(127.87, abs=0.01)
    small = cost_model(2, 1, 1)
    assert (small.pranc_flops, small.nola_flops) == (8, 6)
    assert cost_model(4096, 1000, 4096).speedup == pytest.approx(1.0, abs=0.01)


@settings(max_examples=15, deadline=None)
@given(
    m=st.integers(2, 10),
    n=st.integers(2, 10),
    k=st.integers(1, 5),
    l=st.integers(1, 5),
    seed=st.integers(0, 1000),
)
def test_gradient_exactness_property(m, n, k, l, seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, min(m, n) + 1))
    f = NolaFactor(m, n, r, k, l, rng.standard_normal(k), rng.standard_normal(l), SeedSpec(seed))
    g = rng.standard_normal((m, n))
    ga, gb = coeff_gradients(f, g)
    fa = central_diff(lambda a: float(np.sum(g * NolaFactor(m, n, r, k, l, a, f.beta, f.seed_spec).delta())), f.alpha)
    fb = central_diff(lambda b: float(np.sum(g * NolaFactor(m, n, r, k, l, f.alpha, b, f.seed_spec).delta())), f.beta)
    assert np.allclose(ga, fa, rtol=1e-6, atol=1e-8)
    assert np.allclose(gb, fb, rtol=1e-6, atol=1e-8)
