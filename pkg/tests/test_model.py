import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layersplat.model import (
    GAUSSIAN3D_SCHEMA,
    SPLAT2D_SCHEMA,
    AttributeSchema,
    Layer,
    LayeredModel,
    ModelError,
    Splat2D,
    Splats,
    compose_level,
    effective_opacity,
)


def rows(n, opacity=0.5, seed=0):
    rng = np.random.default_rng(seed)
    mat = np.zeros((n, SPLAT2D_SCHEMA.width), dtype=np.float32)
    mat[:, 0:2] = rng.uniform(0, 16, (n, 2))
    mat[:, 2:4] = rng.uniform(0.5, 3, (n, 2))
    mat[:, 4] = rng.uniform(-3, 3, n)
    mat[:, 5:8] = rng.uniform(0, 1, (n, 3))
    mat[:, 8] = opacity
    mat[:, 9] = -np.arange(n)
    return mat


def layer(n, updates=(), opacity=0.5, seed=0):
    idx = np.array([u[0] for u in updates], dtype=np.uint32)
    ops = np.array([u[1] for u in updates], dtype=np.float32)
    return Layer(rows(n, opacity, seed), idx, ops)


def test_schema_widths():
    assert SPLAT2D_SCHEMA.width == 10
    assert GAUSSIAN3D_SCHEMA.width == 62
    assert SPLAT2D_SCHEMA.slice("color") == slice(5, 8)
    assert SPLAT2D_SCHEMA.column("opacity") == 8


@pytest.mark.parametrize("entries", [
    (("a", 1), ("a", 2), ("opacity", 1)),
    (("a", 1),),
    (("opacity", 2),),
    (("opacity", 1), ("b", 0)),
])
def test_schema_rejects_bad_entries(entries):
    with pytest.raises(ModelError):
        AttributeSchema(entries)


def test_splat2d_validation_and_covariance():
    s = Splat2D((1.0, 2.0), (2.0, 1.0), np.pi / 2, (0.1, 0.2, 0.3), 0.5, 0.0)
    cov = s.covariance()
    np.testing.assert_allclose(cov, [[1.0, 0.0], [0.0, 4.0]], atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    for bad in [dict(scale=(0.0, 1.0)), dict(opacity=1.5), dict(color=(0, 0, 2))]:
        kw = dict(position=(0, 0), scale=(1, 1), rotation=0.0, color=(0, 0, 0), opacity=0.5, depth=0.0)
        kw.update(bad)
        with pytest.raises(ModelError):
            Splat2D(**kw)


def test_splats_matrix_round_trip():
    mat = rows(7)
    s = Splats.from_matrix(mat)
    np.testing.assert_array_equal(s.to_matrix(np.float32), mat)
    assert len(Splats.concat([s, s.select([0, 2])])) == 9


def test_compose_counts_are_additive():
    m = LayeredModel((layer(10), layer(5, seed=1)), (0.5, 1.0))
    assert len(compose_level(m, 0)) == 10
    assert len(compose_level(m, 1)) == 15
    assert m.cumulative_counts == [10, 15]


def test_compose_level_zero_is_base():
    base = layer(10)
    m = LayeredModel((base, layer(5, seed=1)), (0.5, 1.0))
    np.testing.assert_array_equal(compose_level(m, 0), base.new_splats)


def test_update_overrides_opacity():
    mat = rows(10)
    mat[3, 8] = 0.8
    m = LayeredModel((Layer(mat, np.zeros(0, np.uint32), np.zeros(0, np.float32)), layer(5, [(3, 0.2)], seed=1)),
                     (0.5, 1.0))
    assert compose_level(m, 0)[3, 8] == np.float32(0.8)
    assert compose_level(m, 1)[3, 8] == np.float32(0.2)


def test_effective_opacity_examples():
    m = LayeredModel((layer(4, opacity=0.7), layer(2, [(0, 0.3)], seed=1), layer(3, [(0, 0.1), (4, 0.6)], seed=2)),
                     (0.25, 0.5, 1.0))
    assert effective_opacity(m, 7, 1) == 0.0  # introduced at level 2
    assert effective_opacity(m, 1, 2) == pytest.approx(0.7)  # never updated
    assert effective_opacity(m, 0, 1) == pytest.approx(0.3)
    assert effective_opacity(m, 0, 2) == pytest.approx(0.1)
    assert effective_opacity(m, 4, 2) == pytest.approx(0.6)
    with pytest.raises(IndexError):
        effective_opacity(m, 9, 2)
    with pytest.raises(IndexError):
        m.level_opacities(3)


def test_occupancy_filters_compose():
    occ = (np.array([True, False, True]), np.array([True, True, False, True]))
    m = LayeredModel((layer(3), layer(1, seed=1)), (0.5, 1.0), occ)
    _, idx0 = compose_level(m, 0, return_index=True)
    _, idx1 = compose_level(m, 1, return_index=True)
    assert idx0.tolist() == [0, 2]
    # a splat dropped at one level may come back at the next
    assert idx1.tolist() == [0, 1, 3]


@pytest.mark.parametrize("build", [
    lambda: LayeredModel((), ()),
    lambda: LayeredModel((layer(2), layer(2)), (0.5, 0.5)),
    lambda: LayeredModel((layer(2),), (1.5,)),
    lambda: LayeredModel((layer(2, [(0, 0.5)]),), (1.0,)),
    lambda: LayeredModel((layer(2), layer(2, [(2, 0.5)])), (0.5, 1.0)),
    lambda: LayeredModel((layer(2),), (1.0,), (np.ones(3, bool),)),
    lambda: Layer(rows(2), np.array([0, 0], np.uint32), np.array([0.1, 0.2], np.float32)),
    lambda: Layer(rows(2), np.array([0], np.uint32), np.array([1.5], np.float32)),
])
def test_invalid_models_rejected(build):
    with pytest.raises(ModelError):
        build()


@st.composite
def models(draw):
    nlev = draw(st.integers(1, 4))
    layers, total = [], 0
    for k in range(nlev):
        n = draw(st.integers(0 if k else 1, 6))
        upd = []
        if k and total:
            idx = draw(st.lists(st.integers(0, total - 1), unique=True, max_size=total))
            upd = [(i, draw(st.floats(0, 1, width=32))) for i in idx]
        layers.append(layer(n, upd, opacity=draw(st.floats(0, 1, width=32)), seed=k))
        total += n
    res = tuple(2.0 ** -(nlev - 1 - i) for i in range(nlev))
    return LayeredModel(tuple(layers), res)


@settings(max_examples=100, deadline=None)
@given(models())
def test_freeze_and_prefix_containment(m):
    # non-opacity fields of every splat are identical at all levels it exists in
    cols = [c for c in range(m.schema.width) if c != m.schema.column("opacity")]
    full = [compose_level(m, i) for i in range(m.num_levels)]
    for i in range(1, m.num_levels):
        prev = full[i - 1]
        np.testing.assert_array_equal(full[i][: len(prev)][:, cols], prev[:, cols])
    for i in range(m.num_levels):
        ops = m.level_opacities(i)
        assert np.all((ops >= 0) & (ops <= 1))
