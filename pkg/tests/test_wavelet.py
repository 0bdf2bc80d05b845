import numpy as np
import pytest

from wsplat.wavelet import (
    Subbands,
    dwt2,
    dwt2_adjoint,
    dwt2_multi,
    idwt2,
    idwt2_multi,
    pyramid_adjoint,
)


def brute_force_energy(x):
    """Independent oracle: sum of squares by explicit loops."""
    total = 0.0
    for v in np.asarray(x, dtype=np.float64).ravel():
        total += v * v
    return total


def test_constant_block():
    sub = dwt2(np.ones((2, 2)))
    assert sub.ll[0, 0] == pytest.approx(2.0)
    assert sub.lh[0, 0] == 0.0
    assert sub.hl[0, 0] == 0.0
    assert sub.hh[0, 0] == 0.0


def test_impulse_block():
    sub = dwt2(np.array([[1.0, 0.0], [0.0, 0.0]]))
    for plane in (sub.ll, sub.lh, sub.hl, sub.hh):
        assert plane[0, 0] == pytest.approx(0.5)


def test_orientation_vertical_edge():
    # First column bright: a vertical edge inside the leading blocks. The
    # column difference lands in LH and HL stays zero.
    x = np.zeros((4, 4))
    x[:, 0] = 1.0
    sub = dwt2(x)
    assert np.max(np.abs(sub.hl)) == 0.0
    assert np.max(np.abs(sub.lh[:, 0])) == pytest.approx(1.0)


def test_energy_preservation_oracle():
    rng = np.random.default_rng(0)
    x = rng.random((8, 8))
    sub = dwt2(x)
    assert sub.energy() == pytest.approx(brute_force_energy(x), rel=1e-6)


def test_roundtrip_even():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16))
    assert np.max(np.abs(idwt2(dwt2(x)) - x)) <= 1e-6


def test_roundtrip_odd_and_multichannel():
    rng = np.random.default_rng(2)
    for shape in [(9, 13), (7, 7, 3), (11, 8, 3), (8, 11)]:
        x = rng.random(shape)
        assert np.max(np.abs(idwt2(dwt2(x)) - x)) <= 1e-6, shape


def test_constant_inverse():
    sub = Subbands(ll=np.full((3, 3), 2.0), lh=np.zeros((3, 3)),
                   hl=np.zeros((3, 3)), hh=np.zeros((3, 3)), orig_shape=(6, 6))
    assert np.allclose(idwt2(sub), 1.0)


def test_zero_subbands_give_zero_image():
    z = np.zeros((4, 4))
    sub = Subbands(ll=z, lh=z, hl=z, hh=z, orig_shape=(8, 8))
    assert np.all(idwt2(sub) == 0.0)


def test_linearity():
    rng = np.random.default_rng(3)
    x, y = rng.random((12, 12)), rng.random((12, 12))
    a, b = 0.7, -1.3
    mixed = dwt2(a * x + b * y)
    sx, sy = dwt2(x), dwt2(y)
    for name, plane in mixed.bands().items():
        combo = a * sx.bands()[name] + b * sy.bands()[name]
        assert np.max(np.abs(plane - combo)) <= 1e-6


def test_empty_image_raises():
    with pytest.raises(ValueError):
        dwt2(np.zeros((0, 0)))


def test_mismatched_planes_raise():
    sub = Subbands(ll=np.zeros((2, 2)), lh=np.zeros((2, 3)),
                   hl=np.zeros((2, 2)), hh=np.zeros((2, 2)), orig_shape=(4, 4))
    with pytest.raises(ValueError):
        idwt2(sub)


def test_multi_level_one_equals_dwt2():
    rng = np.random.default_rng(4)
    x = rng.random((10, 10))
    pyr = dwt2_multi(x, levels=1)
    ref = dwt2(x)
    assert len(pyr.levels) == 1
    for name in ("ll", "lh", "hl", "hh"):
        assert np.array_equal(pyr.levels[0].bands()[name], ref.bands()[name])


def test_two_level_constant():
    pyr = dwt2_multi(np.full((4, 4), 3.0), levels=2)
    assert pyr.top_ll.shape == (1, 1)
    assert pyr.top_ll[0, 0] == pytest.approx(12.0)
    for sub in pyr.levels:
        for name in ("lh", "hl", "hh"):
            assert np.max(np.abs(sub.bands()[name])) <= 1e-12


def test_two_level_roundtrip():
    rng = np.random.default_rng(5)
    for shape in [(32, 32), (17, 23), (15, 15, 3)]:
        x = rng.random(shape)
        pyr = dwt2_multi(x, levels=2)
        assert np.max(np.abs(idwt2_multi(pyr) - x)) <= 1e-6, shape


def test_levels_out_of_range():
    with pytest.raises(ValueError):
        dwt2_multi(np.zeros((4, 4)), levels=3)


def test_pyramid_mismatch_raises():
    pyr = dwt2_multi(np.zeros((8, 8)), levels=2)
    bad_top = Subbands(ll=np.zeros((3, 3)), lh=np.zeros((3, 3)),
                       hl=np.zeros((3, 3)), hh=np.zeros((3, 3)), orig_shape=(6, 6))
    from wsplat.wavelet import SubbandPyramid
    broken = SubbandPyramid(levels=(pyr.levels[0], bad_top))
    with pytest.raises(ValueError):
        idwt2_multi(broken)


def _fd_adjoint_check(shape, levels, seed):
    """<A x, y> == <x, A^T y> for the analysis operator A."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    pyr = dwt2_multi(x, levels)
    ys = [{name: rng.standard_normal(sub.bands()[name].shape)
           for name in ("ll", "lh", "hl", "hh")} for sub in pyr.levels]
    lhs = sum(np.sum(pyr.levels[k].bands()[name] * ys[k][name])
              for k in range(levels) for name in ("ll", "lh", "hl", "hh"))
    adj = pyramid_adjoint(ys, pyr)
    rhs = np.sum(x * adj)
    assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("shape,levels,seed", [
    ((8, 8), 1, 10),
    ((9, 11), 1, 11),
    ((12, 12, 3), 2, 12),
    ((13, 9), 2, 13),
])
def test_adjoint_identity(shape, levels, seed):
    _fd_adjoint_check(shape, levels, seed)


def test_single_level_adjoint_even_is_inverse():
    rng = np.random.default_rng(14)
    grads = {name: rng.standard_normal((4, 4)) for name in ("ll", "lh", "hl", "hh")}
    sub = Subbands(grads["ll"], grads["lh"], grads["hl"], grads["hh"], orig_shape=(8, 8))
    assert np.allclose(dwt2_adjoint(grads, (8, 8)), idwt2(sub))
