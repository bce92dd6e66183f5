import numpy as np
import pytest

from layersplat import codec
from layersplat.metrics import ImagePyramid, build_pyramid
from layersplat.model import SPLAT2D_SCHEMA, Splat2D, Splats, compose_level
from layersplat.raster import render, render_backward
from layersplat.train import (
    Adam,
    LevelState,
    TrainConfig,
    TrainingError,
    _level_rng,
    densify_and_prune,
    load_checkpoint,
    train_base,
    train_enhancement,
    train_progressive,
)

OP = SPLAT2D_SCHEMA.column("opacity")
NON_OPACITY = [c for c in range(SPLAT2D_SCHEMA.width) if c != OP]


def smooth_image(n=32):
    y, x = np.mgrid[0:n, 0:n] / n
    return np.stack([0.5 + 0.3 * np.sin(2 * np.pi * x), 0.5 + 0.3 * np.cos(2 * np.pi * y),
                     0.5 + 0.2 * np.sin(2 * np.pi * (x + y))], axis=2)


def small_cfg(**kw):
    base = dict(iters_per_level=40, init_splat_count=24, densify_interval=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def three_level():
    p = build_pyramid(smooth_image(32), (0.25, 0.5, 1.0))
    snaps = []
    m, reports = train_progressive(p, small_cfg(), on_level=lambda mm, rr: snaps.append(mm))
    return p, m, reports, snaps


def test_zero_iterations_returns_initialization():
    p = build_pyramid(smooth_image(16), (1.0,))
    cfg = TrainConfig(iters_per_level=0, init_splat_count=10)
    layer, rep = train_base(p, cfg)
    pos = _level_rng(cfg, 0).uniform(0, 1, (10, 2)) * 16
    np.testing.assert_allclose(layer.new_splats[:, 0:2], pos.astype(np.float32))
    np.testing.assert_allclose(layer.new_splats[:, 2:4], 2.0)
    np.testing.assert_allclose(layer.new_splats[:, 4], 0.0)
    np.testing.assert_allclose(layer.new_splats[:, OP], 0.5, atol=1e-6)
    px = np.floor(pos).astype(int)
    np.testing.assert_allclose(layer.new_splats[:, 5:8], p.levels[0][px[:, 1], px[:, 0]], atol=1e-7)
    assert rep.iterations == 0 and rep.loss_history == []


def test_constant_target_converges():
    p = build_pyramid(np.full((32, 32, 3), [0.3, 0.6, 0.2]), (1.0,))
    _, rep = train_base(p, TrainConfig(iters_per_level=500, init_splat_count=16))
    assert rep.final_loss < 1e-3


def test_single_splat_position_recovered():
    # the target is one known splat offset from where the seeded initialization lands;
    # seeds whose target centre sits within one scale of the border are not informative
    scale = 3.0
    checked = 0
    for seed in range(12):
        cfg = TrainConfig(iters_per_level=1000, init_splat_count=1, densify_interval=10**6, lr_position=1.6e-3,
                          rng_seed=seed)
        true = _level_rng(cfg, 0).uniform(0, 1, (1, 2))[0] * 32 + np.array([1.5, -1.2])
        if not np.all((true >= scale) & (true <= 32 - scale)):
            continue
        tgt = render([Splat2D(tuple(true), (scale, scale), 0.0, (0.9, 0.3, 0.2), 0.8, 0.0)], (32, 32))
        layer, _ = train_base(build_pyramid(tgt, (1.0,)), cfg)
        assert layer.count == 1
        assert np.linalg.norm(layer.new_splats[0, :2] - true) < 0.5
        checked += 1
    assert checked >= 6


def make_state(n=5, scale=1.0):
    rng = np.random.default_rng(0)
    tgt = rng.uniform(size=(16, 16, 3))
    st = LevelState(Splats.empty(), tgt, 1.0, (16, 16), TrainConfig(), 0)
    st.add_splats(rng.uniform(2, 14, (n, 2)), np.full((n, 2), scale), np.zeros(n), rng.uniform(size=(n, 3)),
                  np.full(n, 0.5))
    return st


def test_densify_identity():
    st = make_state()
    before = {k: v.copy() for k, v in st.opt.params.items()}
    densify_and_prune(st, np.zeros(5))
    for k, v in before.items():
        np.testing.assert_array_equal(st.opt.params[k], v)


def test_densify_prunes_faint_splat():
    st = make_state()
    st.opt.params["logit"][2] = np.log(0.001 / 0.999)
    densify_and_prune(st, np.zeros(5))
    assert st.n_new == 4


def test_densify_split_and_clone():
    st = make_state(n=2, scale=5.0)
    pos = st.opt.params["position"].copy()
    densify_and_prune(st, np.array([1.0, 0.0]))
    assert st.n_new == 3
    np.testing.assert_allclose(np.exp(st.opt.params["log_scale"][1:]), 5.0 / 1.6)
    np.testing.assert_allclose(st.opt.params["position"][1:].mean(axis=0), pos[0])
    np.testing.assert_allclose(np.abs(st.opt.params["position"][1:] - pos[0]).max(), 2.5)
    assert not st.opt.m["position"][1:].any()

    small = make_state(n=2, scale=1.0)
    densify_and_prune(small, np.array([0.0, 1.0]))
    assert small.n_new == 3
    np.testing.assert_array_equal(small.opt.params["position"][2], small.opt.params["position"][1])
    # clones composite in front of everything created earlier
    assert small.depth[2] < small.depth.min(initial=0, where=np.arange(3) < 2)


def test_densify_empty_is_noop():
    st = LevelState(Splats.empty(), np.zeros((4, 4, 3)), 1.0, (4, 4), TrainConfig(), 0)
    assert densify_and_prune(st).n_new == 0


def test_adam_frozen_groups():
    opt = Adam()
    opt.add("a", np.ones(3), 0.1)
    opt.add("b", np.ones(3), 0.1, frozen=True)
    opt.step({"a": np.array([1.0, -1.0, 0.0]), "b": np.ones(3)})
    # first bias-corrected step moves by lr * sign(g)
    np.testing.assert_allclose(opt.params["a"], [0.9, 1.1, 1.0])
    np.testing.assert_array_equal(opt.params["b"], 1.0)
    assert not opt.m["b"].any() and not opt.v["b"].any()


def test_progressive_structure(three_level):
    p, m, reports, snaps = three_level
    assert m.num_levels == 3 and len(m.occupancy) == 3 and len(reports) == 3
    assert m.resolutions == p.resolutions
    total = 0
    for layer in m.layers:
        assert np.all(layer.update_indices < total) if len(layer.update_indices) else True
        total += layer.count
    for i in range(m.num_levels):
        ops = m.level_opacities(i)
        assert np.all((ops >= 0) & (ops <= 1))
    np.testing.assert_array_equal(m.occupancy[-1], codec.build_occupancy(m, 0.005)[-1])


def test_freeze_across_stages(three_level):
    _, m, _, snaps = three_level
    final = m.all_splats()
    for snap in snaps:
        old = snap.all_splats()
        np.testing.assert_array_equal(final[: len(old)][:, NON_OPACITY], old[:, NON_OPACITY])


def test_best_loss_is_running_minimum(three_level):
    _, _, reports, _ = three_level
    for rep in reports:
        run = np.minimum.accumulate(rep.loss_history)
        assert np.all(np.diff(run) <= 0)
        assert rep.best_loss == min(min(rep.loss_history), rep.final_loss)
        assert np.isfinite(rep.mean_prior_opacity_after) or rep.level == 0


def test_deterministic(three_level):
    p, m, _, _ = three_level
    again, _ = train_progressive(p, small_cfg())
    assert codec.pack(again).data == codec.pack(m).data


def test_prior_opacity_gradient_is_alive(three_level):
    _, m, _, _ = three_level
    rng = np.random.default_rng(0)
    splats = Splats.from_matrix(compose_level(m, 2))
    g = render_backward(splats, (32, 32), (0, 0, 0), rng.normal(size=(32, 32, 3)))
    prior = len(compose_level(m, 1))
    assert np.any(g.opacity[:prior] != 0)


def test_checkpoint_resume(tmp_path, three_level):
    p, m, reports, _ = three_level
    path = tmp_path / "ckpt.laps"
    cfg = small_cfg()
    partial = ImagePyramid(p.levels[:2], p.resolutions[:2], p.full_shape)
    train_progressive(partial, cfg, checkpoint_path=path)
    ck = load_checkpoint(path)
    assert ck.model.num_levels == 2
    assert [r.final_loss for r in ck.reports] == [r.final_loss for r in reports[:2]]
    resumed, rep2 = train_progressive(p, cfg, resume=ck)
    assert codec.pack(resumed).data == codec.pack(m).data
    assert len(rep2) == 3


def test_enhancement_out_of_order(three_level):
    p, m, _, _ = three_level
    with pytest.raises(TrainingError):
        train_enhancement(m, 1, p, small_cfg())
    with pytest.raises(TrainingError):
        train_enhancement(m, 3, p, small_cfg())


@pytest.mark.parametrize("kw", [dict(lam=1.5), dict(lr_color=0.0), dict(prune_opacity_threshold=0.0),
                                dict(densify_grad_threshold=-1.0), dict(iters_per_level=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
