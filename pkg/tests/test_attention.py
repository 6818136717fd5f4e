import numpy as np
import pytest
from conftest import random_projections
from oracles import attention_loops, central_difference, mask_by_rule

from streamkws.attention import (BlockSpec, LayerCache, attend_full, attend_streaming, attention_backward,
                                 attention_forward, block_of, build_mask, equivalence_report, key_window,
                                 stream_blocks)
from streamkws.exceptions import ShapeError


def test_block_spec_validation():
    assert BlockSpec(3).block == 6
    with pytest.raises(ValueError):
        BlockSpec(0)


def test_small_mask_grid():
    # S=2, T=6: the first four queries share keys 1..4, queries 5,6 see keys 3..6
    text = build_mask(6, BlockSpec(2)).to_text()
    assert text == "####..\n####..\n####..\n####..\n..####\n..####"


def test_short_input_mask_is_solid():
    for t in range(1, 7):
        assert build_mask(t, BlockSpec(3)).allowed.all()


@pytest.mark.parametrize("shift", [1, 2, 3, 5])
@pytest.mark.parametrize("frames", [1, 4, 7, 11, 20])
def test_mask_matches_rule(shift, frames):
    np.testing.assert_array_equal(build_mask(frames, BlockSpec(shift)).allowed, mask_by_rule(frames, shift))


def test_block_of_and_windows():
    spec = BlockSpec(4)
    assert [block_of(t, spec) for t in (1, 8, 9, 12, 13, 16, 17)] == [1, 1, 2, 2, 3, 3, 4]
    assert key_window(1, spec, 30) == (1, 8)
    assert key_window(9, spec, 30) == (5, 12)
    assert key_window(29, spec, 30) == (25, 30)
    with pytest.raises(ValueError):
        block_of(0, spec)


def test_stream_blocks_cover_frames():
    assert stream_blocks(11, BlockSpec(3)) == [(0, 6), (6, 9), (9, 11)]
    assert stream_blocks(0, BlockSpec(3)) == []


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    proj = random_projections(rng, 6, 3)
    x = rng.normal(size=(9, 6))
    mask = build_mask(9, BlockSpec(2))
    np.testing.assert_allclose(attend_full(x, proj, mask),
                               attention_loops(x, x, proj.w_q, proj.w_k, proj.w_v, proj.w_o, 3, mask.allowed),
                               atol=1e-12)
    np.testing.assert_allclose(attend_full(x, proj),
                               attention_loops(x, x, proj.w_q, proj.w_k, proj.w_v, proj.w_o, 3), atol=1e-12)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    proj = random_projections(rng, 4, 2, scale=0.6)
    x = rng.normal(size=(7, 4))
    allowed = build_mask(7, BlockSpec(2)).allowed
    dout = rng.normal(size=(7, 4))

    def loss():
        return float(np.sum(attention_forward(x, x, proj, allowed)[0] * dout))

    _, cache = attention_forward(x, x, proj, allowed)
    dx, _, grads = attention_backward(dout, cache, proj)
    np.testing.assert_allclose(dx, central_difference(loss, x), atol=1e-7)
    for name in ("w_q", "w_k", "w_v", "w_o"):
        np.testing.assert_allclose(grads[name], central_difference(loss, getattr(proj, name)), atol=1e-7)


def test_blocked_keys_do_not_influence_queries():
    rng = np.random.default_rng(5)
    proj = random_projections(rng, 4, 2)
    x = rng.normal(size=(10, 4))
    mask = build_mask(10, BlockSpec(2))
    base = attend_full(x, proj, mask)
    bumped = x.copy()
    bumped[0] += 100.0  # frame 1 is outside the window of queries 7..10
    out = attend_full(bumped, proj, mask)
    assert np.max(np.abs(out[6:] - base[6:])) == 0.0


@pytest.mark.parametrize("frames", [1, 5, 6, 7, 9, 13, 24])
def test_streaming_equals_masked_full_pass(frames):
    rng = np.random.default_rng(frames)
    proj = random_projections(rng, 8, 2)
    assert equivalence_report(rng.normal(size=(frames, 8)), proj, BlockSpec(3)) < 1e-12


def test_streaming_cache_holds_last_shift_rows():
    rng = np.random.default_rng(1)
    proj = random_projections(rng, 4, 1)
    spec = BlockSpec(2)
    x = rng.normal(size=(6, 4))
    out, cache = attend_streaming(x[:4], LayerCache(spec), proj)
    assert cache.blocks == 1 and cache.valid_len == 2 and cache.nbytes == 2 * 4 * 8
    np.testing.assert_array_equal(cache.inputs, x[2:4])
    out2, cache2 = attend_streaming(x[4:6], cache, proj)
    np.testing.assert_array_equal(cache2.inputs, x[4:6])
    np.testing.assert_array_equal(cache.inputs, x[2:4])  # the old cache is untouched


def test_streaming_block_size_errors():
    rng = np.random.default_rng(1)
    proj = random_projections(rng, 4, 1)
    spec = BlockSpec(2)
    with pytest.raises(ShapeError):
        attend_streaming(rng.normal(size=(3, 4)), LayerCache(spec), proj)
    _, cache = attend_streaming(rng.normal(size=(1, 4)), LayerCache(spec), proj, final=True)
    assert cache.closed
    with pytest.raises(ValueError):
        attend_streaming(rng.normal(size=(1, 4)), cache, proj, final=True)


def test_projection_shape_checks():
    with pytest.raises(ShapeError):
        random_projections(np.random.default_rng(0), 6, 4)
