import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixercseg.autodiff import Identity, Tensor, ops
from mixercseg.exceptions import ConfigError, ShapeError
from mixercseg.ssm import ChannelSplit
from mixercseg.transmixer import (
    LocalRefinement,
    SelfAttention,
    TransMixerBlock,
    TransMixerConfig,
    TransMixerStage,
    merge,
    split,
)

from conftest import assert_grads, weighted_sum


def make_block(rng, d=8, n=3, **cfg):
    return TransMixerBlock(d, n, TransMixerConfig(**cfg), rng).astype(np.float64)


def test_split_gathers_columns(rng):
    y = Tensor(rng.standard_normal((5, 4)))
    cs = ChannelSplit(g=np.array([1, 3]), l=np.array([0, 2]))
    yg, yl = split(y, cs)
    np.testing.assert_array_equal(yg.data, y.data[:, [1, 3]])
    np.testing.assert_array_equal(yl.data, y.data[:, [0, 2]])


def test_split_with_empty_global(rng):
    y = Tensor(rng.standard_normal((5, 4)))
    cs = ChannelSplit(g=np.array([], dtype=int), l=np.arange(4))
    yg, yl = split(y, cs)
    assert yg.shape == (5, 0)
    np.testing.assert_array_equal(yl.data, y.data)


@given(st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_merge_inverts_split(d, seed):
    r = np.random.default_rng(seed)
    perm = r.permutation(d)
    k = int(r.integers(0, d + 1))
    cs = ChannelSplit(g=np.sort(perm[:k]), l=np.sort(perm[k:]))
    y = Tensor(r.standard_normal((3, d)))
    assert np.array_equal(merge(*split(y, cs), cs).data, y.data)


def test_poisoned_global_stream_lands_only_in_global_columns(rng):
    y = Tensor(rng.standard_normal((6, 5)))
    cs = ChannelSplit(g=np.array([0, 3]), l=np.array([1, 2, 4]))
    yg, yl = split(y, cs)
    merged = merge(Tensor(np.full(yg.shape, np.nan)), yl, cs).data
    assert np.isnan(merged[:, [0, 3]]).all()
    assert np.isfinite(merged[:, [1, 2, 4]]).all()


def test_attention_single_token(rng):
    attn = SelfAttention(4, 1, rng).astype(np.float64)
    y = Tensor(rng.standard_normal((1, 4)))
    expected = attn.o_proj(attn.v_proj(y)).data
    np.testing.assert_allclose(attn(y).data, expected, atol=1e-14)


def test_attention_rows_sum_to_one(rng):
    attn = SelfAttention(6, 2, rng).astype(np.float64)
    attn(Tensor(rng.standard_normal((7, 6))))
    np.testing.assert_allclose(attn.last_weights.sum(axis=-1), 1.0, atol=1e-14)


def test_attention_is_permutation_equivariant(rng):
    attn = SelfAttention(4, 2, rng).astype(np.float64)
    y = rng.standard_normal((9, 4))
    perm = rng.permutation(9)
    out = attn(Tensor(y)).data
    out_perm = attn(Tensor(y[perm])).data
    np.testing.assert_allclose(out_perm[np.argsort(perm)], out, atol=1e-12)


def test_attention_heads_must_divide(rng):
    with pytest.raises(ConfigError):
        SelfAttention(5, 2, rng)


def test_local_refinement_zero_conv_halves_normed_input(rng):
    lr = LocalRefinement(3, rng).astype(np.float64)
    lr.conv.weight.data[...] = 0.0
    y = Tensor(rng.standard_normal((12, 3)))
    normed = lr.norm(y).data
    np.testing.assert_allclose(lr(y, 3, 4).data, 0.5 * normed, atol=1e-14)


def test_local_refinement_pools_differ(rng):
    y = Tensor(rng.standard_normal((16, 3)))
    seed_rng = np.random.default_rng(5)
    a = LocalRefinement(3, seed_rng, "max").astype(np.float64)
    b = LocalRefinement(3, np.random.default_rng(5), "avg").astype(np.float64)
    out_a, out_b = a(y, 4, 4).data, b(y, 4, 4).data
    assert out_a.shape == out_b.shape == (16, 3)
    assert not np.allclose(out_a, out_b)


def test_local_refinement_shape_error(rng):
    with pytest.raises(ShapeError):
        LocalRefinement(2, rng)(Tensor(np.zeros((10, 2))), 3, 3)


@pytest.mark.parametrize("gamma", [0.0, 0.25, 0.5, 1.0])
def test_block_preserves_shape(rng, gamma):
    block = make_block(rng, gamma=gamma)
    out, info = block(Tensor(rng.standard_normal((12, 8))), 3, 4)
    assert out.shape == (12, 8)
    assert len(info.split.g) == int(8 * gamma)


def test_block_with_identity_streams_is_plain_mamba(rng):
    block = make_block(rng)
    block.attention, block.refine = Identity(), Identity()
    tokens = Tensor(rng.standard_normal((12, 8)))
    out, _ = block(tokens, 3, 4)
    plain, _ = block.mamba(block.norm(tokens))
    assert np.array_equal(out.data, (tokens + plain).data)


def test_degenerate_gamma_changes_output(rng):
    tokens = Tensor(rng.standard_normal((12, 8)))
    outs = {}
    for gamma in (0.0, 0.5, 1.0):
        block = make_block(np.random.default_rng(3), gamma=gamma)
        outs[gamma] = block(tokens, 3, 4)[0].data
    assert not np.allclose(outs[0.0], outs[0.5])
    assert not np.allclose(outs[1.0], outs[0.5])


@pytest.mark.parametrize("gamma,pool", [(0.5, "max"), (0.5, "avg"), (0.0, "max"), (1.0, "max")])
def test_block_gradients(rng, gamma, pool):
    block = make_block(rng, d=4, n=2, gamma=gamma, local_pool=pool)
    tokens = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    params = {"tokens": tokens, **dict(block.named_parameters())}
    assert_grads(lambda: weighted_sum(block(tokens, 2, 3)[0]), params, samples=4)


def test_stage_runs_on_feature_map(rng):
    stage = TransMixerStage(4, 2, TransMixerConfig(depth=2), rng).astype(np.float64)
    out, infos = stage(Tensor(rng.standard_normal((4, 3, 5))))
    assert out.shape == (4, 3, 5)
    assert len(infos) == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        TransMixerConfig(gamma=1.5).validate()
    with pytest.raises(ConfigError):
        TransMixerConfig(local_pool="min").validate()
    with pytest.raises(ConfigError):
        TransMixerBlock(8, 2, TransMixerConfig(gamma=0.5, heads=3), np.random.default_rng(0))
