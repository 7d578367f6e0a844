import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellmamba import autodiff as ad
from cellmamba.autodiff import ConfigurationError, ShapeError, Tensor, default_dtype
from cellmamba.mixers import TokenSequence
from cellmamba.tmac import (
    CouplingState,
    TmacParams,
    adaptive_couple,
    channel_split,
    consensus_map,
    disabled_consensus,
    idiosyncratic_map,
    tmac_forward,
    tmac_fuse,
)


def seq(rng, b=2, h=5, w=6, c=8):
    return TokenSequence(Tensor(rng.standard_normal((b, h * w, c))), h, w)


def spatial_attention_oracle(f, kernel, bias):
    """sigmoid(conv([mean_c f, max_c f])) with explicit loops, 'same' padding."""
    pooled = np.stack([f.mean(-1), f.max(-1)], axis=-1)
    k = kernel.shape[0]
    pad = k // 2
    padded = np.pad(pooled, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    b, h, w, _ = pooled.shape
    out = np.zeros((b, h, w, 1))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                out[n, i, j, 0] = np.sum(padded[n, i : i + k, j : j + k] * kernel[..., 0]) + bias[0]
    return 1 / (1 + np.exp(-out))


# --- CouplingState -------------------------------------------------------------------


def test_coupling_flag_flips_exactly_once_at_n():
    state = CouplingState(5)
    flags = [state.at_epoch(e).coupled for e in range(12)]
    assert flags == [False] * 5 + [True] * 7
    assert sum(a != b for a, b in zip(flags, flags[1:])) == 1


def test_coupling_state_validation():
    with pytest.raises(ConfigurationError):
        CouplingState(0)
    with pytest.raises(ConfigurationError):
        CouplingState(3, -1)


# --- split / maps ------------------------------------------------------------------------


def test_channel_split_roundtrip_and_halves(rng):
    x = seq(rng, c=64)
    a, b = channel_split(x)
    assert a.channels == b.channels == 32
    np.testing.assert_array_equal(np.concatenate([a.data.data, b.data.data], -1), x.data.data)
    const = TokenSequence(Tensor(np.concatenate([np.ones((1, 4, 2)), 2 * np.ones((1, 4, 2))], -1)), 2, 2)
    a, b = channel_split(const)
    assert np.all(a.data.data == 1) and np.all(b.data.data == 2)


def test_channel_split_odd_rejected(rng):
    with pytest.raises(ConfigurationError):
        channel_split(seq(rng, c=5))


def test_idiosyncratic_map_matches_loop_oracle(rng):
    p = TmacParams(rng)
    p.bias.data[:] = 0.3
    f = rng.standard_normal((2, 6, 5, 4)).astype(np.float32)
    np.testing.assert_allclose(idiosyncratic_map(Tensor(f), p).data, spatial_attention_oracle(f.astype(np.float64), p.kernel.data, p.bias.data), atol=1e-6)


def test_idiosyncratic_map_examples(rng):
    p = TmacParams(rng)
    p.bias.data[:] = 0.7
    zero = idiosyncratic_map(Tensor(np.zeros((1, 4, 4, 3))), p).data
    np.testing.assert_allclose(zero, 1 / (1 + np.exp(-0.7)), rtol=1e-6)
    p.kernel.data[:] = 0
    p.bias.data[:] = 0
    assert np.all(idiosyncratic_map(Tensor(rng.standard_normal((1, 4, 4, 3))), p).data == 0.5)


def test_channel_constant_feature_mean_equals_max(rng):
    v = rng.standard_normal((1, 3, 3, 1))
    f = Tensor(np.repeat(v, 4, axis=-1))
    np.testing.assert_allclose(ad.reduce(f, -1, "mean").data, ad.reduce(f, -1, "max").data, rtol=1e-6)


def test_consensus_is_map_of_sum(rng):
    p = TmacParams(rng)
    f1, f2 = Tensor(rng.standard_normal((1, 5, 5, 3))), Tensor(rng.standard_normal((1, 5, 5, 3)))
    np.testing.assert_array_equal(consensus_map(f1, f2, p).data, idiosyncratic_map(f1 + f2, p).data)
    p.bias.data[:] = -0.4
    cancel = consensus_map(f1, Tensor(-f1.data), p).data
    np.testing.assert_allclose(cancel, 1 / (1 + np.exp(0.4)), rtol=1e-6)
    np.testing.assert_array_equal(consensus_map(f1, f1, p).data, idiosyncratic_map(f1 * 2.0, p).data)


def test_consensus_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        consensus_map(Tensor(np.zeros((1, 2, 2, 3))), Tensor(np.zeros((1, 2, 3, 3))), TmacParams(rng))


# --- coupling / fusion -----------------------------------------------------------------------


def test_adaptive_couple_examples(rng):
    a1, a2 = Tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1))), Tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1)))
    cons = Tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1)))
    g1, g2 = adaptive_couple(a1, a2, cons, CouplingState(4, 3))
    assert g1 is a1 and g2 is a2
    g1, g2 = adaptive_couple(a1, a2, disabled_consensus(a1), CouplingState(4, 9))
    np.testing.assert_array_equal(g1.data, a1.data)
    g1, _ = adaptive_couple(Tensor(np.full((1, 1, 1, 1), 0.8)), a2[:, :1, :1], Tensor(np.full((1, 1, 1, 1), 0.5)), CouplingState(1, 1))
    assert g1.item() == pytest.approx(0.4)


def test_tmac_fuse_examples(rng):
    f1, f2 = Tensor(rng.standard_normal((1, 2, 2, 3))), Tensor(rng.standard_normal((1, 2, 2, 3)))
    ones = Tensor(np.ones((1, 2, 2, 1)))
    out = tmac_fuse(f1, f2, ones, ones)
    np.testing.assert_array_equal(out.to_map().data, np.concatenate([f1.data, f2.data], -1))
    out = tmac_fuse(f1, f2, Tensor(np.zeros((1, 2, 2, 1))), ones)
    assert np.all(out.data.data[..., :3] == 0)
    single = tmac_fuse(Tensor(np.full((1, 1, 1, 1), 4.0)), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), 0.25)), Tensor(np.ones((1, 1, 1, 1))))
    assert single.data.data[0, 0, 0] == 1.0


def test_tmac_warmup_zero_kernel_halves_everything(rng):
    p = TmacParams(rng)
    p.kernel.data[:] = 0
    x = seq(rng)
    np.testing.assert_allclose(tmac_forward(x, p, CouplingState(3, 0)).data.data, 0.5 * x.data.data, rtol=1e-6)


def _coupling_free(x, p):
    x1, x2 = channel_split(x)
    f1, f2 = x1.to_map(), x2.to_map()
    return tmac_fuse(f1, f2, idiosyncratic_map(f1, p), idiosyncratic_map(f2, p))


@pytest.mark.parametrize("epoch", [0, 1, 4])
def test_warmup_equals_coupling_free_pipeline(rng, epoch):
    p = TmacParams(rng)
    x = seq(rng)
    diff = np.abs(tmac_forward(x, p, CouplingState(5, epoch)).data.data - _coupling_free(x, p).data.data)
    assert diff.max() <= 1e-7


def test_warmup_never_evaluates_consensus(rng, monkeypatch):
    import cellmamba.tmac as tmac_mod

    def boom(*_a, **_k):
        raise AssertionError("consensus map computed during warmup")

    monkeypatch.setattr(tmac_mod, "consensus_map", boom)
    tmac_forward(seq(rng), TmacParams(rng), CouplingState(2, 1))


@pytest.mark.parametrize("trial", range(10))
def test_coupled_gates_attenuate(trial):
    rng = np.random.default_rng(trial)
    p = TmacParams(rng)
    p.bias.data[:] = rng.normal()
    f1, f2 = Tensor(rng.standard_normal((2, 6, 6, 4))), Tensor(rng.standard_normal((2, 6, 6, 4)))
    a1, a2, cons = idiosyncratic_map(f1, p), idiosyncratic_map(f2, p), consensus_map(f1, f2, p)
    g1, g2 = adaptive_couple(a1, a2, cons, CouplingState(1, 1))
    for g, a in ((g1, a1), (g2, a2)):
        assert np.all(g.data <= np.minimum(a.data, cons.data))
        assert np.all((g.data > 0) & (g.data <= 1))


def test_shared_kernel_gradient_is_sum_of_isolated_branches(rng):
    with default_dtype(np.float64):
        shared = TmacParams(rng).astype(np.float64)
        copies = [TmacParams(rng).astype(np.float64) for _ in range(3)]
        for c in copies:
            c.kernel.data = shared.kernel.data.copy()
            c.bias.data = shared.bias.data.copy()
        x = seq(rng)
        w = Tensor(rng.standard_normal(x.data.shape))

        (tmac_forward(x, shared, CouplingState(1, 1)).data * w).sum().backward()

        x1, x2 = channel_split(x)
        f1, f2 = x1.to_map(), x2.to_map()
        a1 = idiosyncratic_map(f1, copies[0])
        a2 = idiosyncratic_map(f2, copies[1])
        cons = consensus_map(f1, f2, copies[2])
        g1, g2 = adaptive_couple(a1, a2, cons, CouplingState(1, 1))
        (tmac_fuse(f1, f2, g1, g2).data * w).sum().backward()

        total = sum(c.kernel.grad for c in copies)
        assert np.max(np.abs(shared.kernel.grad - total)) < 1e-5
        assert np.max(np.abs(shared.bias.grad - sum(c.bias.grad for c in copies))) < 1e-5
        assert all(np.any(c.kernel.grad != 0) for c in copies)


def test_single_parameter_set(rng):
    assert [n for n, _ in TmacParams(rng).named_parameters()] == ["kernel", "bias"]


@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.sampled_from([2, 4, 6]), st.booleans())
def test_tmac_shape_invariance(b, h, w, c, coupled):
    rng = np.random.default_rng(h * 10 + w)
    x = TokenSequence(Tensor(rng.standard_normal((b, h * w, c))), h, w)
    out = tmac_forward(x, TmacParams(rng), CouplingState(1, int(coupled)))
    assert out.data.shape == x.data.shape and out.hw == (h, w)
