import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laserseg import attention as attn
from laserseg import autodiff as ad
from laserseg.autodiff import Tensor
from laserseg.errors import DimensionError
from oracles import loop_lrtq, loop_vanilla


def make_params(seed, D=5, s=3, variant="normalized", graph=True):
    rng = np.random.default_rng(seed)
    p = attn.AttentionParams.initialize(D, s, rng, variant=variant, dtype=np.float64)
    if not graph:
        for t in p.tensors().values():
            t.requires_grad = False
    return p


@pytest.mark.parametrize("graph", [True, False], ids=["graph", "inference"])
@pytest.mark.parametrize("seed", range(3))
def test_vanilla_matches_loop(seed, graph):
    p = make_params(seed, graph=graph)
    f = np.random.default_rng(seed + 10).standard_normal((9, 5))
    np.testing.assert_allclose(attn.vanilla_attention(f, p).data, loop_vanilla(f.tolist(), p), atol=1e-10, rtol=0)


@pytest.mark.parametrize("graph", [True, False], ids=["graph", "inference"])
@pytest.mark.parametrize("variant", attn.VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_lrtq_matches_loop(seed, variant, graph):
    p = make_params(seed, variant=variant, graph=graph)
    f = np.random.default_rng(seed + 20).standard_normal((11, 5))
    np.testing.assert_allclose(attn.lrtq_attention(f, p).data, loop_lrtq(f.tolist(), p), atol=1e-10, rtol=0)


def test_vanilla_blocked_inference_matches_graph():
    p_graph = make_params(3, D=4, s=2)
    p_np = make_params(3, D=4, s=2, graph=False)
    f = np.random.default_rng(5).standard_normal((300, 4))
    np.testing.assert_allclose(attn.vanilla_attention(f, p_np).data, attn.vanilla_attention(f, p_graph).data,
                               atol=1e-12)


@pytest.mark.parametrize("kind", ["vanilla", "lrtq"])
def test_permutation_equivariance(kind):
    p = make_params(7)
    f = np.random.default_rng(8).standard_normal((10, 5))
    perm = np.random.default_rng(9).permutation(10)
    fn = attn.vanilla_attention if kind == "vanilla" else attn.lrtq_attention
    np.testing.assert_allclose(fn(f[perm], p).data, fn(f, p).data[perm], atol=1e-12)


def test_single_sample_rank_one_is_value_projection():
    p = make_params(1, s=1)
    f = np.random.default_rng(2).standard_normal((1, 5))
    expected = f @ p.wv.data
    np.testing.assert_allclose(attn.lrtq_attention(f, p).data, expected, atol=1e-12)
    np.testing.assert_allclose(attn.vanilla_attention(f, p).data, expected, atol=1e-12)


def test_dimension_errors():
    p = make_params(0)
    with pytest.raises(DimensionError):
        attn.lrtq_attention(np.zeros((4, 6)), p)
    with pytest.raises(DimensionError):
        attn.AttentionParams(p.wq, p.wk, p.wv, Tensor(np.zeros((2, 4))))
    with pytest.raises(ValueError):
        attn.AttentionParams(p.wq, p.wk, p.wv, p.transient, variant="other")


@pytest.fixture
def adapter():
    return attn.AdapterParams.initialize(8, 2, np.random.default_rng(0), dtype=np.float64)


def test_adapter_alpha_boundaries(adapter):
    f = np.random.default_rng(1).standard_normal((6, 8))
    adapter.alpha = 0.0
    recon, mixed = attn.adapter_forward(f, adapter)
    np.testing.assert_array_equal(mixed.data, f)
    adapter.alpha = 1.0
    recon, mixed = attn.adapter_forward(f, adapter)
    np.testing.assert_array_equal(mixed.data, recon.data)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0))
def test_adapter_mix_is_elementwise(alpha):
    a = attn.AdapterParams.initialize(8, 2, np.random.default_rng(0), alpha=alpha, dtype=np.float64)
    f = np.random.default_rng(1).standard_normal((5, 8))
    recon, mixed = attn.adapter_forward(f, a)
    np.testing.assert_allclose(mixed.data, alpha * recon.data + (1 - alpha) * f, atol=1e-12)


def test_adapter_rejects_bad_dimensions():
    with pytest.raises(DimensionError):
        attn.AdapterParams.initialize(6, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        attn.AdapterParams.initialize(8, 2, np.random.default_rng(0), alpha=1.5)


def test_self_cross_beta_boundaries(adapter):
    rng = np.random.default_rng(3)
    dense, rend = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    fd = attn.adapter_reconstruct(dense, adapter)
    fr = attn.adapter_reconstruct(rend, adapter)

    def cos(a, b):
        return ad.cosine_similarity(a, Tensor(b)).mean().item()

    one = attn.self_cross_loss(dense, rend, adapter, beta=1.0).item()
    zero = attn.self_cross_loss(dense, rend, adapter, beta=0.0).item()
    assert one == pytest.approx(-(cos(fd, dense) + cos(fr, rend)), abs=1e-12)
    assert zero == pytest.approx(-(cos(fr, dense) + cos(fd, rend)), abs=1e-12)


def test_self_cross_identical_sources_ignore_beta(adapter):
    x = np.random.default_rng(4).standard_normal((6, 8))
    values = [attn.self_cross_loss(x, x, adapter, beta=b).item() for b in (0.0, 0.3, 1.0)]
    np.testing.assert_allclose(values, values[0], atol=1e-12)
    assert values[0] == pytest.approx(2 * attn.reconstruction_loss(x, adapter).item(), abs=1e-12)


class TestFlops:
    def test_vanilla_core_figure(self):
        core = attn.attention_flops("vanilla", 20480, 1, 32).core
        assert core / 1e9 == pytest.approx(26.91, rel=0.02)

    def test_rank_from_published_lrtq_cost(self):
        s = attn.solve_rank(1.48e9, 20480, 32)
        ratio = attn.attention_flops("vanilla", 20480, 1, 32).core / attn.attention_flops("lrtq", 20480, s, 32).core
        assert ratio == pytest.approx(18.18, rel=0.10)
        assert 200 < s < 350

    @pytest.mark.parametrize("kind,power", [("vanilla", 2), ("lrtq", 1)])
    def test_scaling_in_sequence_length(self, kind, power):
        a = attn.attention_flops(kind, 1000, 8, 32).core
        b = attn.attention_flops(kind, 4000, 8, 32).core
        assert b / a == pytest.approx(4 ** power, rel=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            attn.attention_flops("linear", 10, 2, 4)


def test_loglog_slope_recovers_power():
    sizes = np.array([10, 20, 40, 80])
    assert attn.fit_loglog_slope(sizes, 3.0 * sizes ** 1.5) == pytest.approx(1.5)
