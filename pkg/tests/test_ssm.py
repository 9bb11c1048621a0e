import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixercseg.autodiff import Tensor, ops
from mixercseg.exceptions import ConfigError, NumericError
from mixercseg.ssm import (
    ChannelSplit,
    MambaBlock,
    ScanTrace,
    hidden_attention,
    rank_channels,
    scan_orders,
    selective_scan,
)

from conftest import assert_grads, leaf, weighted_sum


def random_instance(rng, length, d, n):
    x = rng.standard_normal((length, d))
    delta = rng.uniform(0.05, 1.5, (length, d))
    A = -np.exp(rng.uniform(np.log(0.5), np.log(2.0), (d, n)))
    B = rng.standard_normal((length, n))
    C = rng.standard_normal((length, n))
    return x, delta, A, B, C


def loop_scan(x, delta, A, B, C):
    """Direct recurrence, one channel and one state entry at a time."""
    length, d = x.shape
    n = A.shape[1]
    y = np.zeros((length, d))
    for c in range(d):
        h = np.zeros(n)
        for t in range(length):
            for s in range(n):
                h[s] = np.exp(delta[t, c] * A[c, s]) * h[s] + delta[t, c] * B[t, s] * x[t, c]
            y[t, c] = sum(C[t, s] * h[s] for s in range(n))
    return y


def injected_trace(a_bar, b_bar, c):
    a = np.asarray(a_bar, dtype=np.float64)[:, None, None]
    b = np.asarray(b_bar, dtype=np.float64)[:, None, None]
    return ScanTrace(delta=np.ones((len(a), 1)), a_bar=a, b_bar=b, c=np.asarray(c, dtype=np.float64)[:, None])


def test_single_step_has_empty_history(rng):
    x, delta, A, B, C = random_instance(rng, 1, 3, 2)
    y, _ = selective_scan(*(Tensor(v) for v in (x, delta, A, B, C)))
    expected = np.einsum("n,dn->d", C[0], delta[0][:, None] * B[0][None] * x[0][:, None])
    np.testing.assert_allclose(y.data[0], expected, atol=1e-14)


def test_hand_recurrence_through_attention():
    trace = injected_trace([0.5, 0.5], [1.0, 1.0], [1.0, 1.0])
    alpha = hidden_attention(trace)
    assert alpha[0, 1, 0] == 0.5
    assert alpha[0, 1, 1] == 1.0
    x = np.array([1.0, 1.0])
    np.testing.assert_allclose(alpha[0] @ x, [1.0, 1.5])


def test_hand_recurrence_through_scan():
    # delta = 1 with A = ln 0.5 and B = 1 gives abar = 0.5, bbar = 1
    x = Tensor(np.ones((2, 1)))
    y, trace = selective_scan(x, Tensor(np.ones((2, 1))), Tensor([[np.log(0.5)]]),
                              Tensor(np.ones((2, 1))), Tensor(np.ones((2, 1))))
    np.testing.assert_allclose(trace.a_bar[:, 0, 0], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(y.data[:, 0], [1.0, 1.5], atol=1e-15)


def test_scan_matches_loop_oracle(rng):
    inst = random_instance(rng, 32, 5, 4)
    y, trace = selective_scan(*(Tensor(v) for v in inst))
    np.testing.assert_allclose(y.data, loop_scan(*inst), atol=1e-6)
    assert (trace.a_bar > 0).all() and (trace.a_bar < 1).all()


def test_attention_diagonal(rng):
    inst = random_instance(rng, 6, 3, 4)
    _, trace = selective_scan(*(Tensor(v) for v in inst))
    alpha = hidden_attention(trace)
    for i in range(6):
        np.testing.assert_allclose(alpha[:, i, i], trace.b_bar[i] @ trace.c[i], atol=1e-14)


@given(st.integers(1, 32), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_attention_reconstructs_scan_and_is_causal(length, d, n, seed):
    inst = random_instance(np.random.default_rng(seed), length, d, n)
    y, trace = selective_scan(*(Tensor(v) for v in inst))
    alpha = hidden_attention(trace)
    recon = np.einsum("cij,jc->ic", alpha, inst[0])
    assert np.abs(recon - y.data).max() <= 1e-10
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    assert not alpha[:, upper].any()


def test_attention_reconstruction_f32(rng):
    inst = [v.astype(np.float32) for v in random_instance(rng, 24, 6, 4)]
    y, trace = selective_scan(*(Tensor(v) for v in inst))
    recon = np.einsum("cij,jc->ic", hidden_attention(trace).astype(np.float64), inst[0])
    assert np.abs(recon - y.data).max() <= 1e-5


def test_scan_gradients(rng):
    params = {k: leaf(v) for k, v in zip("x delta A B C".split(), random_instance(rng, 9, 3, 2))}
    assert_grads(lambda: weighted_sum(selective_scan(*params.values())[0]), params)


def test_scan_overflow_reports_step(rng):
    x, delta, A, B, C = random_instance(rng, 6, 2, 2)
    x[3] = 1e308
    B[3] = 1e10
    with pytest.raises(NumericError) as info:
        selective_scan(*(Tensor(v) for v in (x, delta, A, B, C)))
    assert info.value.step == 3


def test_rank_channels_hand_example():
    trace = ScanTrace(delta=np.array([[0.9, 0.1, 0.5, 0.2]]), a_bar=np.zeros((1, 4, 1)),
                      b_bar=np.zeros((1, 4, 1)), c=np.zeros((1, 1)))
    cs = rank_channels(trace, 0.5)
    assert cs.g.tolist() == [1, 3]
    assert cs.l.tolist() == [0, 2]
    flipped = rank_channels(trace, 0.5, "high-delta")
    assert flipped.g.tolist() == [0, 2]


def test_rank_channels_extremes_and_errors(rng):
    trace = ScanTrace(delta=rng.random((3, 5)), a_bar=np.zeros((3, 5, 1)), b_bar=np.zeros((3, 5, 1)),
                      c=np.zeros((3, 1)))
    assert rank_channels(trace, 0.0).g.size == 0
    assert rank_channels(trace, 1.0).l.size == 0
    for bad in (-0.1, 1.1):
        with pytest.raises(ConfigError):
            rank_channels(trace, bad)
    with pytest.raises(ConfigError):
        rank_channels(trace, 0.5, "sideways")


@given(st.integers(1, 16), st.floats(0, 1), st.sampled_from(["low-delta", "high-delta"]),
       st.integers(0, 2 ** 31 - 1))
def test_rank_channels_partitions(d, gamma, direction, seed):
    delta = np.random.default_rng(seed).random((4, d))
    trace = ScanTrace(delta=delta, a_bar=np.zeros((4, d, 1)), b_bar=np.zeros((4, d, 1)), c=np.zeros((4, 1)))
    cs = rank_channels(trace, gamma, direction)
    assert sorted(cs.permutation.tolist()) == list(range(d))
    assert len(cs.g) == int(np.floor(d * gamma + 1e-9))
    assert list(cs.g) == sorted(cs.g) and list(cs.l) == sorted(cs.l)
    mean = delta.mean(axis=0)
    if cs.g.size and cs.l.size:
        if direction == "low-delta":
            assert mean[cs.g].max() <= mean[cs.l].min()
        else:
            assert mean[cs.g].min() >= mean[cs.l].max()


def test_channel_split_rejects_overlap():
    with pytest.raises(ValueError):
        ChannelSplit(g=np.array([0, 1]), l=np.array([1, 2]))


def mamba_oracle(block: MambaBlock, inp: np.ndarray) -> np.ndarray:
    """Straight-line composition: gate, causal conv, projected step size, scan, output map."""
    def lin(layer, v):
        return v @ layer.weight.data.T + layer.bias.data

    def silu(v):
        return v / (1 + np.exp(-v))

    z = silu(lin(block.gate_proj, inp))
    u = lin(block.in_proj, inp)
    k = block.conv_weight.data.shape[1]
    padded = np.vstack([np.zeros((k - 1, u.shape[1])), u])
    conv = sum(padded[j:j + len(u)] * block.conv_weight.data[:, j] for j in range(k)) + block.conv_bias.data
    x = silu(conv)
    delta = np.logaddexp(0, lin(block.dt_proj, x))
    y = loop_scan(x, delta, -np.exp(block.log_a.data), lin(block.b_proj, x), lin(block.c_proj, x))
    return lin(block.out_proj, y * z)


def test_mamba_block_matches_composition(rng):
    block = MambaBlock(6, 3, rng).astype(np.float64)
    inp = rng.standard_normal((10, 6))
    out, trace = block(Tensor(inp))
    assert out.shape == (10, 6)
    assert (trace.delta > 0).all()
    np.testing.assert_allclose(out.data, mamba_oracle(block, inp), atol=1e-6)


def test_mamba_block_zero_weights_give_zero(rng):
    block = MambaBlock(4, 2, rng).astype(np.float64)
    for p in block.parameters():
        p.data[...] = 0.0
    out, _ = block(Tensor(rng.standard_normal((5, 4))))
    assert not out.data.any()


def test_initial_step_size_near_half(rng):
    block = MambaBlock(4, 2, rng).astype(np.float64)
    block.dt_proj.weight.data[...] = 0.0
    _, trace = block(Tensor(rng.standard_normal((5, 4))))
    np.testing.assert_allclose(trace.delta, 0.5, atol=1e-12)


def test_literal_delta_uses_input(rng):
    block = MambaBlock(4, 2, rng, literal_delta=True).astype(np.float64)
    assert not hasattr(block, "dt_proj")
    inp = Tensor(rng.standard_normal((5, 4)))
    x, _ = block.project_in(inp)
    np.testing.assert_allclose(block.step_sizes(x).data, np.logaddexp(0, x.data))


def test_multi_direction_scan_orders_and_shape(rng):
    orders = scan_orders(2, 3, 4)
    assert orders[2].tolist() == [0, 3, 1, 4, 2, 5]
    assert orders[1].tolist() == [5, 4, 3, 2, 1, 0]
    block = MambaBlock(4, 2, rng, scan_directions=4).astype(np.float64)
    out, _ = block(Tensor(rng.standard_normal((6, 4))), (2, 3))
    assert out.shape == (6, 4)
    with pytest.raises(ConfigError):
        MambaBlock(4, 2, rng, scan_directions=3)


def test_mamba_block_gradients(rng):
    block = MambaBlock(4, 2, rng).astype(np.float64)
    inp = Tensor(rng.standard_normal((6, 4)))
    params = dict(block.named_parameters())
    assert_grads(lambda: weighted_sum(block(inp)[0]), params, samples=4)
