import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitreforge.errors import ConfigError
from vitreforge.reparam import BranchedDownsampler, MergedDownsampler, merge, pool_as_conv, verify_merge
from vitreforge.tensor import avg_pool2d, conv2d

from oracles import conv2d_loop, pool_loop


def _random(c, seed, scale=None):
    rng = np.random.default_rng(seed)
    scale = np.float32(scale if scale is not None else (9 * c) ** -0.5)
    return BranchedDownsampler(rng.standard_normal((c, c, 3, 3), dtype=np.float32) * scale,
                               rng.standard_normal(c, dtype=np.float32) * np.float32(0.1))


def test_pool_as_conv_c2_k3():
    w = pool_as_conv(2, 3)
    assert w.shape == (2, 2, 3, 3)
    assert np.all(w[0, 0] == np.float32(1 / 9)) and np.all(w[1, 1] == np.float32(1 / 9))
    assert not w[0, 1].any() and not w[1, 0].any()


def test_pool_as_conv_equals_pool_loop(rng):
    x = rng.standard_normal((3, 9, 9), dtype=np.float32)
    ours = conv2d(x, pool_as_conv(3, 3), None, 2, 1)
    np.testing.assert_allclose(ours, pool_loop(x, 3, 2, 1, "avg"), atol=1e-6)


def test_branched_matches_loop_oracle(rng):
    d = _random(3, 1)
    x = rng.standard_normal((3, 7, 7), dtype=np.float32)
    ref = pool_loop(x, 3, 2, 1, "avg") + conv2d_loop(x, d.conv_w, d.conv_b, 2, 1)
    np.testing.assert_allclose(d(x), ref, atol=1e-5)


def test_zero_branch_merges_to_pool(rng):
    m = merge(BranchedDownsampler.zeros(8))
    np.testing.assert_array_equal(m.w, pool_as_conv(8, 3))
    x = rng.standard_normal((8, 14, 14), dtype=np.float32)
    assert np.abs(m(x) - avg_pool2d(x, 3, 2, 1)).max() < 1e-6


def test_vit_b_width(rng):
    d = _random(768, 2)
    m = merge(d)
    x = rng.standard_normal((768, 14, 14), dtype=np.float32)
    out = m(x)
    assert out.shape == (768, 7, 7)
    assert np.abs(out - d(x)).max() < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_merge_property(seed):
    d = _random(8, seed)
    rep = verify_merge(d, merge(d), trials=5, seed=seed)
    assert rep.passed and rep.trials == 5


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(2, 17), st.integers(0, 10_000))
def test_merge_any_map_size(c, side, seed):
    d = _random(c, seed)
    x = np.random.default_rng(seed).standard_normal((c, side, side), dtype=np.float32)
    np.testing.assert_allclose(merge(d)(x), d(x), atol=1e-5)


def test_perturbed_merge_fails():
    d = _random(8, 0)
    m = merge(d)
    bad = MergedDownsampler(m.w.copy(), m.b)
    bad.w[0, 0, 1, 1] += 0.1
    rep = verify_merge(d, bad)
    assert not rep.passed and rep.max_abs_diff >= 0.1 / 9


def test_zero_trials_rejected():
    d = BranchedDownsampler.zeros(2)
    with pytest.raises(ValueError):
        verify_merge(d, merge(d), trials=0)


def test_parameter_counts():
    d = BranchedDownsampler.zeros(768)
    assert d.num_params() == merge(d).num_params() == 768 * 768 * 9 + 768


def test_merge_does_not_alias(rng):
    d = _random(4, 3)
    m = merge(d)
    m.b[:] = 0
    assert d.conv_b.any()


def test_shape_checks():
    with pytest.raises(ConfigError):
        BranchedDownsampler(np.zeros((4, 2, 3, 3), np.float32), np.zeros(4, np.float32))
    with pytest.raises(ConfigError):
        BranchedDownsampler(np.zeros((4, 4, 3, 3), np.float32), np.zeros(3, np.float32))
    with pytest.raises(ConfigError):
        merge(BranchedDownsampler(np.zeros((2, 2, 5, 5), np.float32), np.zeros(2, np.float32)))
