import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layersplat.lod import LodError, interp_factor, interpolate_level, view_adaptive
from layersplat.model import SPLAT2D_SCHEMA, Layer, LayeredModel, Splats, compose_level
from layersplat.raster import render
from factories import splat_rows, toy_model

OP = SPLAT2D_SCHEMA.column("opacity")


def draw(mat, r=1.0):
    return render(Splats.from_matrix(mat), (32, 32), (0.1, 0.2, 0.3), r)


def test_interp_factor_examples():
    assert interp_factor(0.125, 0.125, 0.25) == 0.0
    assert interp_factor(0.1875, 0.125, 0.25) == 0.5
    assert interp_factor(0.2, 0.125, 0.25) == pytest.approx(0.6)
    for args in [(0.25, 0.125, 0.25), (0.1, 0.125, 0.25), (0.2, 0.25, 0.25)]:
        with pytest.raises(LodError):
            interp_factor(*args)


def test_interpolation_endpoints():
    m = toy_model()
    for i in range(m.num_levels - 1):
        np.testing.assert_array_equal(interpolate_level(m, i, 1.0), compose_level(m, i + 1))
        lo = draw(interpolate_level(m, i, 0.0))
        assert np.max(np.abs(lo - draw(compose_level(m, i)))) <= 1e-6


def test_midpoint_blend():
    # prior splat at 0.8, updated to 0.2 at the next level
    mat = splat_rows(np.random.default_rng(0), 2, 0)
    mat[:, OP] = 0.8
    base = Layer(mat, np.zeros(0, np.uint32), np.zeros(0, np.float32))
    up = Layer(splat_rows(np.random.default_rng(1), 1, 2), np.array([0], np.uint32), np.array([0.2], np.float32))
    m = LayeredModel((base, up), (0.5, 1.0))
    out, idx = interpolate_level(m, 0, 0.5, return_index=True)
    assert out[list(idx).index(0), OP] == pytest.approx(0.5)
    new_op = up.new_splats[0, OP]
    assert out[list(idx).index(2), OP] == pytest.approx(0.5 * new_op)


def test_out_of_range():
    m = toy_model()
    for args in [(2, 0.5), (-1, 0.5), (0, 1.5)]:
        with pytest.raises(LodError):
            interpolate_level(m, *args)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_blend_monotone_in_t(seed, t1, t2):
    m = toy_model(seed)
    lo_t, hi_t = sorted((t1, t2))
    a_mat, a_idx = interpolate_level(m, 0, lo_t, return_index=True)
    b_mat, b_idx = interpolate_level(m, 0, hi_t, return_index=True)
    e0 = interpolate_level(m, 0, 0.0)
    full_a = np.zeros(m.cumulative_counts[1])
    full_b = np.zeros(m.cumulative_counts[1])
    full_a[a_idx] = a_mat[:, OP]
    full_b[b_idx] = b_mat[:, OP]
    _, i0 = interpolate_level(m, 0, 0.0, return_index=True)
    start = np.zeros(m.cumulative_counts[1])
    start[i0] = e0[:, OP]
    _, i1 = interpolate_level(m, 0, 1.0, return_index=True)
    end = np.zeros(m.cumulative_counts[1])
    end[i1] = interpolate_level(m, 0, 1.0)[:, OP]
    rising = end >= start
    tol = 1e-6
    assert np.all(full_b[rising] >= full_a[rising] - tol)
    assert np.all(full_b[~rising] <= full_a[~rising] + tol)


def test_render_continuity_small_steps():
    m = toy_model(3)
    prev = draw(interpolate_level(m, 0, 0.0))
    for k in range(1, 101):
        cur = draw(interpolate_level(m, 0, k / 100))
        assert np.max(np.abs(cur - prev)) < 0.05
        prev = cur


def test_view_adaptive_constant_fields():
    m = toy_model()
    top = m.resolutions[-1]
    np.testing.assert_array_equal(view_adaptive(m, top), compose_level(m, m.num_levels - 1))
    low = view_adaptive(m, m.resolutions[0])
    assert np.max(np.abs(draw(low) - draw(compose_level(m, 0)))) <= 1e-6
    mid = m.resolutions[0] + 0.5 * (m.resolutions[1] - m.resolutions[0])
    np.testing.assert_array_equal(view_adaptive(m, mid), interpolate_level(m, 0, 0.5))
    with pytest.raises(LodError):
        view_adaptive(m, 2.0)
    with pytest.raises(LodError):
        view_adaptive(m, 0.01)


def test_view_adaptive_step_field():
    m = toy_model(5, counts=(30, 30, 30), max_scale=1.5)
    lo, hi = m.resolutions[0], m.resolutions[-1]

    def field(mat):
        return np.where(mat[:, 0] < 16, lo, hi)

    mixed = draw(view_adaptive(m, field))
    top = draw(compose_level(m, 2))
    base = draw(compose_level(m, 0))
    assert not np.array_equal(mixed, top)
    assert not np.array_equal(mixed, base)
    # only splats left of x = 16 changed, so pixels outside their footprint match the top level
    mat = m.all_splats()
    left = mat[mat[:, 0] < 16]
    # alpha >= 1/255 needs |d| <= sqrt(2 ln 255) * max scale
    reach = (left[:, 0] + np.sqrt(2 * np.log(255)) * left[:, 2:4].max(axis=1)).max()
    far = np.arange(32) + 0.5 > reach
    assert far.sum() >= 8
    np.testing.assert_array_equal(mixed[:, far], top[:, far])
