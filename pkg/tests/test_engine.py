import numpy as np
import pytest

from evoplan import engine
from evoplan.errors import DimensionError, DomainError

from oracles import loop_layernorm, loop_softmax


def test_allocator_tracks_live_and_peak():
    alloc = engine.Allocator()
    with engine.use_allocator(alloc):
        a = engine.Tensor(np.zeros((4, 4)))
        b = engine.Tensor(np.zeros((2, 8)))
        assert alloc.live_bytes == 2 * 16 * 8
        a.free()
        c = engine.Tensor(np.zeros((16,)))
        assert alloc.live_bytes == 16 * 8 + 16 * 8
        b.free()
        c.free()
    assert alloc.live_bytes == 0
    assert alloc.peak_bytes == 2 * 16 * 8
    assert alloc.replay_peak() == alloc.peak_bytes


def test_tensor_free_is_idempotent():
    alloc = engine.Allocator()
    with engine.use_allocator(alloc):
        t = engine.Tensor(np.zeros(8))
        t.free()
        t.free()
    assert alloc.live_bytes == 0


def test_alloc_stats_rescales_to_reporting_element_size():
    alloc = engine.Allocator()
    with engine.use_allocator(alloc):
        engine.Tensor(np.zeros(100))
    stats = alloc.stats()
    assert stats.peak_bytes == 800
    assert stats.in_element_size(2).peak_bytes == 200
    assert stats.in_element_size(8).peak_bytes == 800


def test_use_allocator_restores_previous():
    outer = engine.current_allocator()
    alloc = engine.Allocator()
    with engine.use_allocator(alloc):
        assert engine.current_allocator() is alloc
    assert engine.current_allocator() is outer


def test_softmax_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(3, 4, 5)) * 3
        for axis in range(3):
            got = engine.softmax_raw(x, axis)
            want = loop_softmax(x, axis)
            assert np.max(np.abs(got - want)) <= 1e-12
            assert np.allclose(np.sum(got, axis=axis), 1.0)


def test_softmax_rejects_non_finite():
    with pytest.raises(DomainError):
        engine.softmax_raw(np.array([1.0, np.inf]), 0)


def test_softmax_axis_out_of_range():
    with pytest.raises(DimensionError):
        engine.softmax_raw(np.zeros((2, 2)), 5)


def test_layernorm_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6)) * 2
    g = rng.normal(size=6)
    b = rng.normal(size=6)
    got = engine.layernorm_raw(x, g, b)
    want = loop_layernorm(x, g, b)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_layernorm_rejects_bad_param_shapes():
    with pytest.raises(DimensionError):
        engine.layernorm_raw(np.zeros((2, 4)), np.zeros(3), np.zeros(4))


def test_matmul_shape_checks():
    with pytest.raises(DimensionError):
        engine.matmul_raw(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        engine.matmul_raw(np.zeros((2, 2, 3)), np.zeros((3, 3, 2)))
    with pytest.raises(DimensionError):
        engine.matmul_raw(np.zeros(3), np.zeros((3, 2)))


def test_elementwise_kernels():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    assert np.allclose(engine.relu_raw(x), np.where(x > 0, x, 0.0))
    assert np.allclose(engine.sigmoid_raw(x), 1.0 / (1.0 + np.exp(-x)))
    with pytest.raises(DimensionError):
        engine.add_raw(np.zeros((2, 3)), np.zeros((4, 5)))


def test_slice_and_permute_and_concat():
    x = np.arange(24.0).reshape(2, 3, 4)
    assert np.array_equal(engine.slice_axis_raw(x, 1, 1, 3), x[:, 1:3, :])
    with pytest.raises(DimensionError):
        engine.slice_axis_raw(x, 1, 2, 2)
    assert np.array_equal(engine.permute_raw(x, (2, 0, 1)),
                          np.transpose(x, (2, 0, 1)))
    with pytest.raises(DimensionError):
        engine.permute_raw(x, (0, 0, 1))
    cat = engine.concat_last_axis_raw([x, x])
    assert cat.shape == (2, 3, 8)
    with pytest.raises(DimensionError):
        engine.concat_last_axis_raw([x, np.zeros((2, 4, 4))])


def test_fused_softmax_equals_composed():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5))
    mask = np.where(rng.random((1, 1, 5)) < 0.3, engine.MASK_VALUE, 0.0)
    bias = rng.normal(size=(1, 5, 5))
    fused = engine.fused_softmax_mask_bias_raw(x, mask, bias, -1)
    composed = engine.softmax_raw(x + mask + bias, -1)
    assert np.max(np.abs(fused - composed)) <= 1e-12


def test_fused_softmax_only_allocates_output():
    rng = np.random.default_rng(4)
    alloc = engine.Allocator()
    with engine.use_allocator(alloc):
        x = engine.Tensor(rng.normal(size=(2, 6, 6)))
        mask = engine.Tensor(np.zeros((1, 1, 6)))
        bias = engine.Tensor(rng.normal(size=(1, 6, 6)))
        before = len(alloc.events)
        out = engine.fused_softmax_mask_bias(x, mask, bias, -1)
        after = len(alloc.events)
    # exactly one allocation event, for the output buffer
    assert after - before == 1
    assert alloc.events[-1] == out.nbytes


def test_fused_softmax_broadcast_mismatch():
    with pytest.raises(DimensionError):
        engine.fused_softmax_mask_bias_raw(
            np.zeros((2, 3, 3)), np.zeros((4,)), np.zeros((3,)), -1)
