import numpy as np
import pytest

from mixercseg.autodiff import Tensor, ops
from mixercseg.decoder import ConcatFusion, SegHead, SpatialRefinementFusion
from mixercseg.exceptions import ConfigError
from mixercseg.net import ModelConfig, decoder_flops, dense_decoder_flops

from conftest import assert_grads, weighted_sum

WIDTHS = (3, 4, 5, 6)


def pyramid(rng, size=8, widths=WIDTHS):
    return [Tensor(rng.standard_normal((c, size >> i, size >> i))) for i, c in enumerate(widths)]


def test_output_shape(rng):
    fuse = SpatialRefinementFusion(3, rng).astype(np.float64)
    out, info = fuse(pyramid(rng))
    assert out.shape == (sum(WIDTHS), 8, 8)
    assert info.alpha.shape == (1, 8, 8)


def test_level_one_passes_through(rng):
    fuse = SpatialRefinementFusion(3, rng).astype(np.float64)
    levels = pyramid(rng)
    out, _ = fuse(levels)
    assert np.array_equal(out.data[:3], levels[0].data)


def test_zero_attention_halves_upsampled(rng):
    fuse = SpatialRefinementFusion(3, rng).astype(np.float64)
    for p in fuse.parameters():
        p.data[...] = 0.0
    levels = pyramid(rng)
    out, info = fuse(levels)
    assert (info.alpha == 0.5).all()
    start = 3
    for level, c in zip(levels[1:], WIDTHS[1:]):
        up = ops.upsample_bilinear(level, (8, 8)).data
        np.testing.assert_array_equal(out.data[start:start + c], 0.5 * up)
        start += c


def test_alpha_in_open_unit_interval(rng):
    fuse = SpatialRefinementFusion(3, rng).astype(np.float64)
    _, info = fuse(pyramid(rng))
    assert (info.alpha > 0).all() and (info.alpha < 1).all()


@pytest.mark.parametrize("count", [3, 5])
def test_level_count_checked(rng, count):
    levels = pyramid(rng, widths=(3,) * count, size=32)
    with pytest.raises(ConfigError):
        SpatialRefinementFusion(3, rng)(levels)
    with pytest.raises(ConfigError):
        ConcatFusion()(levels)


def test_concat_fusion_is_unweighted(rng):
    levels = pyramid(rng)
    out, info = ConcatFusion()(levels)
    assert info.alpha is None
    np.testing.assert_array_equal(out.data[3:7], ops.upsample_bilinear(levels[1], (8, 8)).data)


@pytest.mark.parametrize("size", [(8, 8), (16, 24), (5, 7)])
def test_head_output_shape(rng, size):
    head = SegHead(6, rng, hidden=4).astype(np.float64)
    assert head(Tensor(rng.standard_normal((6, 4, 4))), size).shape == (1,) + size


def test_head_zero_weights_give_bias(rng):
    head = SegHead(6, rng).astype(np.float64)
    head.hidden.weight.data[...] = 0.0
    head.out.weight.data[...] = 0.0
    logits = head(Tensor(rng.standard_normal((6, 4, 4))), (8, 8))
    assert (logits.data == head.out.bias.data[0]).all()


def test_decoder_gradients(rng):
    fuse = SpatialRefinementFusion(3, rng).astype(np.float64)
    head = SegHead(sum(WIDTHS), rng, hidden=5).astype(np.float64)
    levels = [Tensor(t.data, requires_grad=True) for t in pyramid(rng)]
    params = {f"level{i}": t for i, t in enumerate(levels)}
    params.update({f"fuse.{k}": v for k, v in fuse.named_parameters()})
    params.update({f"head.{k}": v for k, v in head.named_parameters()})
    assert_grads(lambda: weighted_sum(head(fuse(levels)[0], (16, 16))), params, samples=4)


@pytest.mark.parametrize("size", [64, 256, 512])
def test_decoder_cheaper_than_dense(size):
    cfg = ModelConfig()
    assert decoder_flops(cfg, size, size) < 0.2 * dense_decoder_flops(cfg, size, size)


@pytest.mark.parametrize("size", [(16, 16), (12, 20)])
def test_head_matches_resize_first_order(rng, size):
    head = SegHead(6, rng, hidden=5).astype(np.float64)
    fused = Tensor(rng.standard_normal((6, 4, 4)))
    naive = head.out(ops.relu(head.hidden(ops.upsample_bilinear(fused, size))))
    np.testing.assert_allclose(head(fused, size).data, naive.data, atol=1e-12)
