"""Progressive layered optimization of 2D splats.

The base layer is fitted to the coarsest pyramid level.  Each enhancement
level then adds new splats while every earlier splat keeps its geometry and
color; only the opacities of earlier splats remain trainable.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .metrics import ImagePyramid, loss_and_grad, ssim, total_loss
from .model import SPLAT2D_SCHEMA, Layer, LayeredModel, Splats, compose_level
from .raster import RenderPass, render

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.2
    iters_per_level: int = 300
    lr_position: float = 1.6e-4  # multiplied by the image extent (longest side, full-res pixels)
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_multiplier: float = 1.0
    densify_interval: int = 50
    densify_grad_threshold: float = 2e-3
    densify_until: float = 0.8
    prune_opacity_threshold: float = 0.005
    init_splat_count: int = 256
    enhancement_seed_fraction: float = 0.5
    max_new_splats: int = 4096
    rng_seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        rates = (self.lr_position, self.lr_position_final, self.lr_color, self.lr_opacity,
                 self.lr_scale, self.lr_rotation, self.lr_multiplier)
        if any(not r > 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if not (self.densify_grad_threshold > 0 and self.prune_opacity_threshold > 0):
            raise ValueError("thresholds must be positive")
        if self.iters_per_level < 0 or self.init_splat_count < 1 or self.densify_interval < 1:
            raise ValueError("iteration and splat counts must be positive")


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over named parameter groups; groups may be frozen.

    Frozen groups keep zero moments and are never written.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-15

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.lr: dict[str, float] = {}
        self.frozen: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray, lr: float, frozen: bool = False):
        self.params[name] = np.array(value, dtype=np.float64)
        self.lr[name] = lr
        self.frozen[name] = frozen
        self.m[name] = np.zeros_like(self.params[name])
        self.v[name] = np.zeros_like(self.params[name])

    def step(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            if self.frozen[name]:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.lr[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select_rows(self, names, idx):
        """Keep rows ``idx`` (may repeat) of the named groups; repeats get zero moments."""
        idx = np.asarray(idx, dtype=np.int64)
        first = np.zeros(len(idx), dtype=bool)
        _, pos = np.unique(idx, return_index=True)
        first[pos] = True
        for name in names:
            self.params[name] = self.params[name][idx]
            self.m[name] = np.where(_expand(first, self.m[name]), self.m[name][idx], 0.0)
            self.v[name] = np.where(_expand(first, self.v[name]), self.v[name][idx], 0.0)

    def append_rows(self, names, values: dict[str, np.ndarray]):
        for name in names:
            extra = np.asarray(values[name], dtype=np.float64)
            self.params[name] = np.concatenate([self.params[name], extra])
            self.m[name] = np.concatenate([self.m[name], np.zeros_like(extra)])
            self.v[name] = np.concatenate([self.v[name], np.zeros_like(extra)])


def _expand(mask, like):
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


# --------------------------------------------------------------------------
# per-level state

_NEW = ("position", "log_scale", "rotation", "color", "logit")
_PRIOR_FROZEN = ("prior_position", "prior_scale", "prior_rotation", "prior_color")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


@dataclass
class LevelReport:
    level: int
    resolution: float
    iterations: int
    final_loss: float
    best_loss: float
    loss_history: list[float] = field(repr=False, default_factory=list)
    new_splats: int = 0
    opacity_updates: int = 0
    mean_prior_opacity_before: float = float("nan")
    mean_prior_opacity_after: float = float("nan")


class LevelState:
    """Trainable state of the level being optimized."""

    def __init__(self, prior: Splats, target: np.ndarray, resolution: float, full_shape, cfg: TrainConfig,
                 next_serial: int):
        self.prior = prior
        self.target = target
        self.resolution = resolution
        self.full_shape = tuple(full_shape)
        self.cfg = cfg
        self.next_serial = next_serial
        extent = float(max(full_shape))
        mult = cfg.lr_multiplier
        self.pos_lr0 = cfg.lr_position * extent * mult
        self.pos_lr1 = cfg.lr_position_final * extent * mult
        self.opt = Adam()
        self.opt.add("position", np.zeros((0, 2)), self.pos_lr0)
        self.opt.add("log_scale", np.zeros((0, 2)), cfg.lr_scale * mult)
        self.opt.add("rotation", np.zeros(0), cfg.lr_rotation * mult)
        self.opt.add("color", np.zeros((0, 3)), cfg.lr_color * mult)
        self.opt.add("logit", np.zeros(0), cfg.lr_opacity * mult)
        self.opt.add("prior_logit", _logit(prior.opacities), cfg.lr_opacity * mult)
        for name, arr in zip(_PRIOR_FROZEN, (prior.positions, prior.scales, prior.rotations, prior.colors)):
            self.opt.add(name, arr, 0.0, frozen=True)
        self.depth = np.zeros(0)
        self.grad_accum = np.zeros(0)
        self.grad_count = 0

    # -- splat bookkeeping
    @property
    def n_new(self) -> int:
        return len(self.depth)

    def add_splats(self, positions, scales, rotations, colors, opacities):
        n = len(positions)
        self.opt.append_rows(_NEW, {
            "position": np.asarray(positions, dtype=np.float64).reshape(n, 2),
            "log_scale": np.log(np.asarray(scales, dtype=np.float64).reshape(n, 2)),
            "rotation": np.asarray(rotations, dtype=np.float64).reshape(n),
            "color": np.asarray(colors, dtype=np.float64).reshape(n, 3),
            "logit": _logit(opacities).reshape(n),
        })
        self.depth = np.concatenate([self.depth, self._serials(n)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])

    def _serials(self, n):
        s = np.arange(self.next_serial, self.next_serial + n, dtype=np.float64)
        self.next_serial += n
        # newer splats composite in front of older ones
        return -s

    def new_splats(self) -> Splats:
        p = self.opt.params
        return Splats(p["position"], np.exp(p["log_scale"]), p["rotation"], p["color"],
                      _sigmoid(p["logit"]), self.depth)

    def prior_splats(self) -> Splats:
        return self.prior.with_opacities(_sigmoid(self.opt.params["prior_logit"]))

    def all_splats(self) -> Splats:
        return Splats.concat([self.prior_splats(), self.new_splats()])

    # -- optimization
    def loss_and_grads(self):
        splats = self.all_splats()
        rp = RenderPass(splats, self.target.shape[:2], self.cfg.background, self.resolution)
        loss, dl_dc = loss_and_grad(rp.image, self.target, self.cfg.lam)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at resolution {self.resolution}")
        g = rp.backward(dl_dc)
        return loss, g, splats

    def step(self, it: int, total_iters: int):
        loss, g, splats = self.loss_and_grads()
        npr = len(self.prior)
        sig = splats.opacities
        d_logit = g.opacity * sig * (1.0 - sig)
        grads = {
            "position": g.position[npr:],
            "log_scale": g.scale[npr:] * splats.scales[npr:],
            "rotation": g.rotation[npr:],
            "color": g.color[npr:],
            "logit": d_logit[npr:],
            "prior_logit": d_logit[:npr],
        }
        frac = it / max(total_iters - 1, 1)
        self.opt.lr["position"] = self.pos_lr0 * (self.pos_lr1 / self.pos_lr0) ** frac
        self.opt.step(grads)
        np.clip(self.opt.params["color"], 0.0, 1.0, out=self.opt.params["color"])
        # screen-space gradient in normalized device units: level pixels span 2 / max(h, w)
        half_extent = 0.5 * max(self.target.shape[:2])
        self.grad_accum += np.linalg.norm(g.position[npr:], axis=1) / self.resolution * half_extent
        self.grad_count += 1
        return loss

    def to_layer(self, prior_opacities_f32: np.ndarray) -> Layer:
        mat = self.new_splats().to_matrix(np.float32) if self.n_new else np.zeros((0, 10), np.float32)
        new_ops = _sigmoid(self.opt.params["prior_logit"]).astype(np.float32)
        changed = np.flatnonzero(np.abs(new_ops.astype(np.float64) - prior_opacities_f32) > 1e-6)
        return Layer(mat, changed.astype(np.uint32), new_ops[changed])


def densify_and_prune(state: LevelState, grad_accum: np.ndarray | None = None, cfg: TrainConfig | None = None):
    """Clone small / split large high-gradient splats of the current layer, then prune.

    ``grad_accum`` is the mean view-space position-gradient magnitude per new
    splat (defaults to the state's running average).  Works in place on the
    state's new splats and returns the state.
    """
    cfg = state.cfg if cfg is None else cfg
    n = state.n_new
    if n == 0:
        return state
    if grad_accum is None:
        grad_accum = state.grad_accum / max(state.grad_count, 1)
    old = {k: state.opt.params[k].copy() for k in _NEW}
    scales = np.exp(old["log_scale"])
    hot = np.asarray(grad_accum) > cfg.densify_grad_threshold
    room = max(cfg.max_new_splats - n, 0)
    if hot.sum() > room:
        # over budget: strongest gradients first
        order = np.lexsort((np.arange(n), -np.where(hot, grad_accum, -np.inf)))
        hot = np.zeros(n, dtype=bool)
        hot[order[:room]] = True
    small = np.max(scales, axis=1) * state.resolution < 4.0
    split = hot & ~small
    keep = np.flatnonzero(~split)
    cloned = np.flatnonzero(hot & small)

    # survivors first, then exact clones with fresh moments
    state.opt.select_rows(_NEW, np.concatenate([keep, cloned]))
    state.depth = np.concatenate([state.depth[keep], state._serials(len(cloned))])
    state.grad_accum = np.zeros(state.n_new)

    idx = np.flatnonzero(split)
    if len(idx):
        s = scales[idx]
        th = old["rotation"][idx]
        major = np.argmax(s, axis=1)
        axis = np.where((major == 0)[:, None],
                        np.column_stack([np.cos(th), np.sin(th)]),
                        np.column_stack([-np.sin(th), np.cos(th)]))
        offset = 0.5 * s[np.arange(len(idx)), major][:, None] * axis
        mu = old["position"][idx]
        state.add_splats(
            np.concatenate([mu + offset, mu - offset]),
            np.tile(s / 1.6, (2, 1)),
            np.tile(th, 2),
            np.tile(old["color"][idx], (2, 1)),
            np.tile(_sigmoid(old["logit"][idx]), 2),
        )

    alive = np.flatnonzero(_sigmoid(state.opt.params["logit"]) >= cfg.prune_opacity_threshold)
    if len(alive) < state.n_new:
        state.opt.select_rows(_NEW, alive)
        state.depth = state.depth[alive]
        state.grad_accum = state.grad_accum[alive]
    state.grad_accum[:] = 0.0
    state.grad_count = 0
    return state


# --------------------------------------------------------------------------
# training drivers


def _run_level(state: LevelState, cfg: TrainConfig, level: int) -> LevelReport:
    iters = cfg.iters_per_level
    history = []
    best = math.inf
    stop_densify = int(cfg.densify_until * iters)
    for it in range(iters):
        loss = state.step(it, iters)
        best = min(best, loss)
        history.append(loss)
        done = it + 1
        if done % cfg.densify_interval == 0 and done < stop_densify:
            densify_and_prune(state)
    img = render(state.all_splats(), state.target.shape[:2], cfg.background, state.resolution)
    final = total_loss(img, state.target, cfg.lam)
    best = min(best, final)
    return LevelReport(level, state.resolution, iters, final, best, history, state.n_new)


def _init_base(state: LevelState, cfg: TrainConfig, rng: np.random.Generator):
    h, w = state.full_shape
    n = cfg.init_splat_count
    pos = rng.uniform(0.0, 1.0, size=(n, 2)) * np.array([w, h], dtype=np.float64)
    r = state.resolution
    th, tw = state.target.shape[:2]
    px = np.clip(np.floor(pos[:, 0] * r).astype(int), 0, tw - 1)
    py = np.clip(np.floor(pos[:, 1] * r).astype(int), 0, th - 1)
    colors = state.target[py, px]
    state.add_splats(pos, np.full((n, 2), 2.0 / r), np.zeros(n), colors, np.full(n, 0.5))


def _seed_residual(state: LevelState, cfg: TrainConfig, previous: Splats):
    """New splats at the pixels where the previous level fits worst."""
    k = int(round(cfg.enhancement_seed_fraction * cfg.init_splat_count))
    if k <= 0:
        return
    target = state.target
    th, tw = target.shape[:2]
    img = render(previous, (th, tw), cfg.background, state.resolution)
    resid = np.abs(img - target).sum(axis=2).ravel()
    k = min(k, resid.size)
    flat = np.lexsort((np.arange(resid.size), -resid))[:k]
    py, px = np.divmod(flat, tw)
    r = state.resolution
    pos = np.column_stack([(px + 0.5) / r, (py + 0.5) / r])
    state.add_splats(pos, np.full((k, 2), 2.0 / r), np.zeros(k), target[py, px], np.full(k, 0.5))


def _level_rng(cfg: TrainConfig, level: int) -> np.random.Generator:
    return np.random.default_rng([cfg.rng_seed, level])


def train_base(pyramid: ImagePyramid, cfg: TrainConfig) -> tuple[Layer, LevelReport]:
    """Fit the base layer to the coarsest pyramid level."""
    if len(pyramid) < 1:
        raise TrainingError("pyramid has no levels")
    state = LevelState(Splats.empty(), pyramid.levels[0], pyramid.resolutions[0], pyramid.full_shape, cfg, 0)
    _init_base(state, cfg, _level_rng(cfg, 0))
    report = _run_level(state, cfg, 0)
    layer = state.to_layer(np.zeros(0, dtype=np.float32))
    log.info("level 0: %d splats, loss %.5f", layer.count, report.final_loss)
    return layer, report


def train_single(pyramid: ImagePyramid, level: int, cfg: TrainConfig) -> tuple[Layer, LevelReport]:
    """Independently fit one pyramid level (the multiscale baseline)."""
    sub = ImagePyramid((pyramid.levels[level],), (pyramid.resolutions[level],), pyramid.full_shape)
    layer, report = train_base(sub, cfg)
    report.level = level
    return layer, report


def train_enhancement(model: LayeredModel, level: int, pyramid: ImagePyramid,
                      cfg: TrainConfig) -> tuple[Layer, LevelReport]:
    """Train enhancement layer ``level`` on top of the frozen levels below it."""
    if level != model.num_levels or level < 1:
        raise TrainingError(f"enhancement level {level} out of order for a {model.num_levels}-level model")
    if level >= len(pyramid):
        raise TrainingError(f"pyramid has no level {level}")
    prior_ops = model.level_opacities(level - 1)
    prior = Splats.from_matrix(model.all_splats(), model.schema).with_opacities(prior_ops)
    # serial numbers continue after every splat created so far
    next_serial = _next_serial(model)
    state = LevelState(prior, pyramid.levels[level], pyramid.resolutions[level], pyramid.full_shape, cfg,
                       next_serial)
    previous = Splats.from_matrix(compose_level(model, level - 1), model.schema)
    _seed_residual(state, cfg, previous)
    report = _run_level(state, cfg, level)
    layer = state.to_layer(prior_ops)
    report.opacity_updates = len(layer.update_indices)
    report.mean_prior_opacity_before = float(prior_ops.mean()) if len(prior_ops) else float("nan")
    after = _sigmoid(state.opt.params["prior_logit"])
    report.mean_prior_opacity_after = float(after.mean()) if len(after) else float("nan")
    log.info("level %d: %d new splats, %d opacity updates, loss %.5f, mean prior opacity %.3f -> %.3f",
             level, layer.count, report.opacity_updates, report.final_loss,
             report.mean_prior_opacity_before, report.mean_prior_opacity_after)
    return layer, report


def _next_serial(model: LayeredModel) -> int:
    depths = model.all_splats()[:, model.schema.column("depth")]
    return int(-depths.min()) + 1 if len(depths) else 0


def train_progressive(pyramid: ImagePyramid, cfg: TrainConfig, *, resume: "Checkpoint | None" = None,
                      checkpoint_path=None, on_level=None) -> tuple[LayeredModel, list[LevelReport]]:
    """Train the base layer and every enhancement layer of ``pyramid``.

    With ``checkpoint_path`` a checkpoint is written after each level;
    ``resume`` continues from one.  ``on_level(model, report)`` is called with
    the partial model after every completed level.
    """
    if resume is not None:
        layers = list(resume.model.layers)
        reports = list(resume.reports)
    else:
        layer, rep = train_base(pyramid, cfg)
        layers, reports = [layer], [rep]
        _level_done(layers, reports, pyramid, cfg, checkpoint_path, on_level)
    for i in range(len(layers), len(pyramid)):
        partial = _assemble(layers, pyramid, cfg)
        layer, rep = train_enhancement(partial, i, pyramid, cfg)
        layers.append(layer)
        reports.append(rep)
        _level_done(layers, reports, pyramid, cfg, checkpoint_path, on_level)
    return _assemble(layers, pyramid, cfg), reports


def _level_done(layers, reports, pyramid, cfg, checkpoint_path, on_level):
    if checkpoint_path is None and on_level is None:
        return
    model = _assemble(layers, pyramid, cfg)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, reports)
    if on_level is not None:
        on_level(model, reports[-1])


def _assemble(layers, pyramid: ImagePyramid, cfg: TrainConfig) -> LayeredModel:
    m = LayeredModel(tuple(layers), pyramid.resolutions[: len(layers)], None, SPLAT2D_SCHEMA)
    return m.with_occupancy(codec.build_occupancy(m, cfg.prune_opacity_threshold))


# --------------------------------------------------------------------------
# checkpoints: LAPS container + "LAPT" sidecar

SIDECAR_MAGIC = b"LAPT"
SIDECAR_VERSION = 1


@dataclass
class Checkpoint:
    model: LayeredModel
    reports: list[LevelReport]


def save_checkpoint(path, model: LayeredModel, reports: list[LevelReport]) -> None:
    """Write ``path`` (LAPS container) and ``path + '.state'`` (training sidecar).

    A partial run's levels need not sit at the container's implied
    resolutions, so the true ones travel in the sidecar reports.
    """
    path = Path(path)
    relabelled = LayeredModel(model.layers, codec.implied_resolutions(model.num_levels), model.occupancy,
                              model.schema)
    _atomic_write(path, codec.pack(relabelled).data)
    out = bytearray(SIDECAR_MAGIC)
    out += struct.pack("<HB", SIDECAR_VERSION, len(reports))
    for r in reports:
        out += struct.pack("<BdIddIIdd", r.level, r.resolution, r.iterations, r.final_loss, r.best_loss,
                           r.new_splats, r.opacity_updates, r.mean_prior_opacity_before,
                           r.mean_prior_opacity_after)
        out += struct.pack("<I", len(r.loss_history))
        out += np.asarray(r.loss_history, dtype="<f8").tobytes()
    _atomic_write(Path(str(path) + ".state"), bytes(out))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    model, _ = codec.unpack(path.read_bytes())
    raw = Path(str(path) + ".state").read_bytes()
    if raw[:4] != SIDECAR_MAGIC:
        raise TrainingError("bad training sidecar magic")
    version, count = struct.unpack_from("<HB", raw, 4)
    if version != SIDECAR_VERSION:
        raise TrainingError(f"unsupported sidecar version {version}")
    pos = 7
    fmt = "<BdIddIIdd"
    reports = []
    for _ in range(count):
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        hist = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).tolist()
        pos += 8 * n
        level, res, iters, final, best, new, upd, before, after = vals
        reports.append(LevelReport(level, res, iters, final, best, hist, new, upd, before, after))
    if len(reports) != model.num_levels:
        raise TrainingError("sidecar and container disagree on the number of levels")
    model = LayeredModel(model.layers, tuple(r.resolution for r in reports), model.occupancy, model.schema)
    return Checkpoint(model, reports)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def level_quality(model: LayeredModel, pyramid: ImagePyramid, background=(0.0, 0.0, 0.0)) -> list[float]:
    """SSIM of each composed level rendered at its own resolution."""
    out = []
    for i in range(model.num_levels):
        splats = Splats.from_matrix(compose_level(model, i), model.schema)
        img = render(splats, pyramid.levels[i].shape[:2], background, pyramid.resolutions[i])
        out.append(ssim(img, pyramid.levels[i], shrink_window=True))
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
