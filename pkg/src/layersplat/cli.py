"""Command-line interface: train, pack, unpack, render, eval and simulate.

Every command prints line-oriented CSV-like output, exits 0 on success and
exits 1 with a single ``error:`` line on failure.  Output files are written
to a temporary name and renamed, so a failed command leaves nothing behind.

The LAPS container does not store image dimensions, so ``train`` writes them
next to the container as ``<container>.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import codec, lod, streamsim
from .metrics import build_pyramid, l1, level_shape, ssim
from .model import Splats, compose_level
from .raster import read_png, render, to_uint8
from .train import TrainConfig, level_quality, train_progressive

log = logging.getLogger("layersplat")


class CliError(Exception):
    pass


def _scales(levels: int) -> tuple[float, ...]:
    if not 1 <= levels <= 16:
        raise CliError(f"--levels must be between 1 and 16, got {levels}")
    return codec.implied_resolutions(levels)


def _parse_rgb(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    try:
        rgb = tuple(float(p) for p in parts)
    except ValueError:
        raise CliError(f"background must be 'r,g,b' floats, got {text!r}") from None
    if len(rgb) != 3 or any(not 0.0 <= c <= 1.0 for c in rgb):
        raise CliError(f"background must be three values in [0, 1], got {text!r}")
    return rgb


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _png_bytes(img: np.ndarray) -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _meta_path(container) -> Path:
    return Path(str(container) + ".json")


def _load_meta(container, size: str | None, background: str | None) -> tuple[tuple[int, int], tuple]:
    meta = {}
    mp = _meta_path(container)
    if mp.exists():
        try:
            meta = json.loads(mp.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"unreadable metadata {mp}: {exc}") from None
    if size is not None:
        try:
            w, h = (int(v) for v in size.lower().split("x"))
        except ValueError:
            raise CliError(f"--size must look like WxH, got {size!r}") from None
    elif "width" in meta and "height" in meta:
        w, h = int(meta["width"]), int(meta["height"])
    else:
        raise CliError(f"image size unknown: pass --size WxH or keep {mp.name} next to the container")
    if w <= 0 or h <= 0:
        raise CliError("image size must be positive")
    bg = _parse_rgb(background) if background is not None else tuple(meta.get("background", (0.0, 0.0, 0.0)))
    return (h, w), bg


def _read_container(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    model, _ = codec.unpack(data)
    return model, data


def _read_image(path) -> np.ndarray:
    try:
        return read_png(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    img = _read_image(args.image)
    pyramid = build_pyramid(img, _scales(args.levels))
    cfg = TrainConfig(lam=args.lam, iters_per_level=args.iters, prune_opacity_threshold=args.prune_threshold,
                      rng_seed=args.seed, background=_parse_rgb(args.background),
                      init_splat_count=args.init_splats)
    model, reports = train_progressive(pyramid, cfg)
    packed = codec.pack(model)
    h, w = img.shape[:2]
    meta = {"width": w, "height": h, "background": list(cfg.background)}
    _atomic_write(args.output, packed.data)
    _atomic_write(_meta_path(args.output), (json.dumps(meta, indent=2) + "\n").encode())
    quality = level_quality(model, pyramid, cfg.background)
    print("level,resolution,splats,final_loss,ssim")
    for rep, q in zip(reports, quality):
        n = int(model.occupancy[rep.level].sum())
        print(f"{rep.level},{rep.resolution:g},{n},{rep.final_loss:.6f},{q:.6f}")
    return 0


def _render_continuous(model, position: float, full_shape, bg):
    top = model.num_levels - 1
    if not 0.0 <= position <= top:
        raise CliError(f"--interp must lie in [0, {top}], got {position}")
    lo = min(int(math.floor(position)), top)
    t = position - lo
    if lo == top:
        mat, r = compose_level(model, top), model.resolutions[top]
    else:
        mat = lod.interpolate_level(model, lo, t)
        r = model.resolutions[lo] + t * (model.resolutions[lo + 1] - model.resolutions[lo])
    shape = (max(1, math.ceil(full_shape[0] * r)), max(1, math.ceil(full_shape[1] * r)))
    return render(Splats.from_matrix(mat, model.schema), shape, bg, r)


def cmd_render(args) -> int:
    model, _ = _read_container(args.container)
    full_shape, bg = _load_meta(args.container, args.size, args.background)
    if args.interp is not None:
        img = _render_continuous(model, args.interp, full_shape, bg)
    else:
        if not 0 <= args.level < model.num_levels:
            raise CliError(f"level {args.level} out of range for a {model.num_levels}-level container")
        r = model.resolutions[args.level]
        img = render(Splats.from_matrix(compose_level(model, args.level), model.schema),
                     level_shape(full_shape, r), bg, r)
    _atomic_write(args.output, _png_bytes(img))
    print(f"{args.output},{img.shape[1]},{img.shape[0]}")
    return 0


def cmd_eval(args) -> int:
    """Score every level at full resolution against the truth image.

    ``ssim_native`` additionally compares each level at its own resolution
    with the matching pyramid level.
    """
    model, _ = _read_container(args.container)
    truth = _read_image(args.truth)
    full_shape, bg = _load_meta(args.container, f"{truth.shape[1]}x{truth.shape[0]}", args.background)
    pyramid = build_pyramid(truth, model.resolutions)
    print("level,resolution,splats,ssim,l1,ssim_native")
    for i, r in enumerate(model.resolutions):
        splats = Splats.from_matrix(compose_level(model, i), model.schema)
        full = render(splats, full_shape, bg, 1.0)
        native = render(splats, pyramid.levels[i].shape[:2], bg, r)
        q_native = ssim(native, pyramid.levels[i], shrink_window=True)
        print(f"{i},{r:g},{len(splats)},{ssim(full, truth, shrink_window=True):.6f},{l1(full, truth):.6f},"
              f"{q_native:.6f}")
    return 0


def cmd_pack(args) -> int:
    try:
        text = Path(args.dump).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {args.dump}: {exc.strerror}") from None
    packed = codec.pack(codec.load_text(text))
    _atomic_write(args.output, packed.data)
    print(f"{args.output},{len(packed)}")
    return 0


def cmd_unpack(args) -> int:
    model, _ = _read_container(args.container)
    text = codec.dump_text(model)
    if args.output:
        _atomic_write(args.output, text.encode())
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    model, data = _read_container(args.container)
    try:
        trace = streamsim.load_trace(Path(args.trace).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {args.trace}: {exc.strerror}") from None
    if args.threshold is not None:
        manifest = streamsim.manifest_variants(model, (args.threshold,))[float(args.threshold)]
    else:
        manifest = streamsim.build_manifest(codec.scan(data))
    if args.manifest:
        _atomic_write(args.manifest, streamsim.format_manifest(manifest).encode())
    session = streamsim.simulate(manifest, trace, streamsim.SessionConfig(args.deadline, args.windows))
    sys.stdout.write(streamsim.format_log(session))
    m = streamsim.session_metrics(session, manifest)
    print(f"# mean_level={m['mean_delivered_level']:.6f} total_stall_s={m['total_stall_s']:.6f} "
          f"total_bytes={m['total_bytes']}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layersplat", description="Layered progressive 2D Gaussian splats.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a layered model on a PNG")
    t.add_argument("image")
    t.add_argument("--levels", type=int, default=4)
    t.add_argument("--iters", type=int, default=300, help="iterations per level")
    t.add_argument("--lambda", dest="lam", type=float, default=0.2)
    t.add_argument("--prune-threshold", type=float, default=0.005)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--background", default="0,0,0")
    t.add_argument("--init-splats", type=int, default=256)
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a level or a continuous position between levels")
    r.add_argument("container")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--level", type=int)
    g.add_argument("--interp", type=float, help="continuous level i + t, blending levels i and i+1")
    r.add_argument("--size", help="full-resolution WxH (default: from the metadata file)")
    r.add_argument("--background")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-level SSIM and L1 against a full-resolution image")
    e.add_argument("container")
    e.add_argument("truth")
    e.add_argument("--background")
    e.set_defaults(func=cmd_eval)

    pk = sub.add_parser("pack", help="text dump -> container")
    pk.add_argument("dump")
    pk.add_argument("-o", "--output", required=True)
    pk.set_defaults(func=cmd_pack)

    up = sub.add_parser("unpack", help="container -> text dump")
    up.add_argument("container")
    up.add_argument("-o", "--output")
    up.set_defaults(func=cmd_unpack)

    s = sub.add_parser("simulate", help="stream a container over a bandwidth trace")
    s.add_argument("container")
    s.add_argument("trace")
    s.add_argument("--windows", type=int, default=10)
    s.add_argument("--deadline", type=float, default=1.0, help="seconds per window")
    s.add_argument("--threshold", type=float, help="re-occupy at this opacity threshold before streaming")
    s.add_argument("--manifest", help="also write the manifest text here")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
