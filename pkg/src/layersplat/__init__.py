"""Layered progressive 2D Gaussian splatting: rasterizer, trainer, container, LOD and streaming."""

from .codec import (
    BadMagicError,
    ChecksumError,
    ContainerError,
    PackedModel,
    SchemaMismatchError,
    TruncatedError,
    VersionError,
    build_occupancy,
    downsample_baseline,
    ingest_ply,
    pack,
    stream_bytes,
    unpack,
)
from .lod import interp_factor, interpolate_level, view_adaptive
from .metrics import ImagePyramid, build_pyramid, l1, ssim, total_loss, total_loss_backward
from .model import (
    GAUSSIAN3D_SCHEMA,
    SPLAT2D_SCHEMA,
    AttributeSchema,
    Layer,
    LayeredModel,
    Splat2D,
    Splats,
    compose_level,
    effective_opacity,
)
from .raster import render, render_backward
from .streamsim import abr_decide, build_manifest, load_trace, session_metrics, simulate
from .train import TrainConfig, densify_and_prune, train_base, train_enhancement, train_progressive

__version__ = "0.1.0"
