"""Splat containers, layered models and cumulative level composition.

A layered model stores the base layer and each enhancement layer as raw
attribute matrices (one float32 row per splat) described by an
:class:`AttributeSchema`.  Splats are addressed by their global index, i.e.
their position in the concatenation of all layers' new splats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for structurally invalid splats, layers or models."""


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered ``(name, arity)`` columns of a splat attribute matrix."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        entries = tuple((str(n), int(a)) for n, a in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ModelError(f"duplicate attribute names in schema: {names}")
        if dict(entries).get("opacity") != 1:
            raise ModelError("schema needs an 'opacity' attribute of arity 1")
        for name, arity in entries:
            if arity < 1 or arity > 255:
                raise ModelError(f"attribute {name!r} has invalid arity {arity}")
            if not name or len(name.encode("utf-8")) > 255:
                raise ModelError(f"attribute name {name!r} has invalid length")

    @property
    def width(self) -> int:
        return sum(a for _, a in self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.entries)

    def slice(self, name: str) -> slice:
        start = 0
        for n, a in self.entries:
            if n == name:
                return slice(start, start + a)
            start += a
        raise KeyError(name)

    def column(self, name: str) -> int:
        """Column index of a scalar attribute."""
        s = self.slice(name)
        if s.stop - s.start != 1:
            raise KeyError(f"{name!r} is not a scalar attribute")
        return s.start


SPLAT2D_SCHEMA = AttributeSchema(
    (("position", 2), ("scale", 2), ("rotation", 1), ("color", 3), ("opacity", 1), ("depth", 1))
)

# Official 3DGS checkpoint layout, stored post-activation.
GAUSSIAN3D_SCHEMA = AttributeSchema(
    (
        ("position", 3),
        ("normal", 3),
        ("f_dc", 3),
        ("f_rest", 45),
        ("opacity", 1),
        ("scale", 3),
        ("rotation", 4),
    )
)


@dataclass(frozen=True)
class Splat2D:
    position: tuple[float, float]
    scale: tuple[float, float]
    rotation: float
    color: tuple[float, float, float]
    opacity: float
    depth: float = 0.0

    def __post_init__(self):
        if not all(s > 0 and math.isfinite(s) for s in self.scale):
            raise ModelError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ModelError(f"opacity must lie in [0, 1], got {self.opacity}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ModelError(f"color must lie in [0, 1], got {self.color}")

    def covariance(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return rot @ np.diag(np.square(self.scale)) @ rot.T


@dataclass
class Splats:
    """Struct-of-arrays view of a batch of 2D splats (float64)."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 2)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), [], np.zeros((0, 3)), [], [])

    @classmethod
    def from_list(cls, splats: Sequence[Splat2D]) -> "Splats":
        if not splats:
            return cls.empty()
        return cls(
            [s.position for s in splats],
            [s.scale for s in splats],
            [s.rotation for s in splats],
            [s.color for s in splats],
            [s.opacity for s in splats],
            [s.depth for s in splats],
        )

    @classmethod
    def from_matrix(cls, mat: np.ndarray, schema: AttributeSchema = SPLAT2D_SCHEMA) -> "Splats":
        mat = np.asarray(mat, dtype=np.float64).reshape(-1, schema.width)
        return cls(
            mat[:, schema.slice("position")],
            mat[:, schema.slice("scale")],
            mat[:, schema.column("rotation")],
            mat[:, schema.slice("color")],
            mat[:, schema.column("opacity")],
            mat[:, schema.column("depth")],
        )

    def to_matrix(self, dtype=np.float32) -> np.ndarray:
        return np.column_stack(
            [self.positions, self.scales, self.rotations, self.colors, self.opacities, self.depths]
        ).astype(dtype)

    def to_list(self) -> list[Splat2D]:
        return [
            Splat2D(
                tuple(self.positions[i]),
                tuple(self.scales[i]),
                float(self.rotations[i]),
                tuple(self.colors[i]),
                float(self.opacities[i]),
                float(self.depths[i]),
            )
            for i in range(len(self))
        ]

    def copy(self) -> "Splats":
        return Splats(
            self.positions.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.colors.copy(),
            self.opacities.copy(),
            self.depths.copy(),
        )

    def select(self, idx) -> "Splats":
        return Splats(
            self.positions[idx],
            self.scales[idx],
            self.rotations[idx],
            self.colors[idx],
            self.opacities[idx],
            self.depths[idx],
        )

    def with_opacities(self, opacities) -> "Splats":
        out = self.copy()
        out.opacities = np.asarray(opacities, dtype=np.float64).reshape(len(self))
        return out

    @staticmethod
    def concat(parts: Sequence["Splats"]) -> "Splats":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Splats.empty()
        return Splats(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate([p.opacities for p in parts]),
            np.concatenate([p.depths for p in parts]),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Layer:
    """New splats of one level plus opacity overrides for earlier splats."""

    new_splats: np.ndarray
    update_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    update_opacities: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self):
        splats = np.asarray(self.new_splats, dtype=np.float32)
        if splats.ndim != 2:
            raise ModelError("new_splats must be a 2D attribute matrix")
        idx = np.asarray(self.update_indices).reshape(-1)
        if idx.size and (idx.min() < 0 or not np.all(idx == np.round(idx))):
            raise ModelError("update indices must be non-negative integers")
        idx = idx.astype(np.uint32)
        ops = np.asarray(self.update_opacities, dtype=np.float32).reshape(-1)
        if len(idx) != len(ops):
            raise ModelError("update index/opacity counts differ")
        if len(np.unique(idx)) != len(idx):
            raise ModelError("duplicate opacity update index within one layer")
        if ops.size and not (np.all(ops >= 0.0) and np.all(ops <= 1.0)):
            raise ModelError("updated opacities must lie in [0, 1]")
        object.__setattr__(self, "new_splats", _frozen(splats))
        object.__setattr__(self, "update_indices", _frozen(idx))
        object.__setattr__(self, "update_opacities", _frozen(ops))

    @property
    def count(self) -> int:
        return len(self.new_splats)


@dataclass(frozen=True)
class LayeredModel:
    """Base layer plus enhancement layers, one occupancy bitmap per level.

    ``occupancy`` may be omitted, in which case every splat is marked as
    included at every level.
    """

    layers: tuple[Layer, ...]
    resolutions: tuple[float, ...]
    occupancy: tuple[np.ndarray, ...] | None = None
    schema: AttributeSchema = SPLAT2D_SCHEMA

    def __post_init__(self):
        layers = tuple(self.layers)
        res = tuple(float(r) for r in self.resolutions)
        if not layers:
            raise ModelError("a layered model needs at least a base layer")
        if len(res) != len(layers):
            raise ModelError("need one resolution per level")
        if any(not 0.0 < r <= 1.0 for r in res) or any(b <= a for a, b in zip(res, res[1:])):
            raise ModelError(f"resolutions must be strictly increasing in (0, 1]: {res}")
        w = self.schema.width
        seen = 0
        op_col = self.schema.column("opacity")
        for k, layer in enumerate(layers):
            if layer.new_splats.shape[1] != w and layer.count:
                raise ModelError(f"layer {k} width {layer.new_splats.shape[1]} != schema width {w}")
            if layer.update_indices.size and int(layer.update_indices.max()) >= seen:
                raise ModelError(f"layer {k} updates a splat that is not from an earlier layer")
            if k == 0 and layer.update_indices.size:
                raise ModelError("the base layer cannot carry opacity updates")
            ops = layer.new_splats[:, op_col] if layer.count else np.zeros(0)
            if ops.size and not (np.all(ops >= 0.0) and np.all(ops <= 1.0)):
                raise ModelError(f"layer {k} has opacities outside [0, 1]")
            seen += layer.count
        # normalise empty layers to the schema width
        layers = tuple(
            l if l.new_splats.shape[1] == w else Layer(np.zeros((0, w), np.float32), l.update_indices, l.update_opacities)
            for l in layers
        )
        counts = np.cumsum([l.count for l in layers])
        if self.occupancy is None:
            occ = tuple(np.ones(int(c), dtype=bool) for c in counts)
        else:
            occ = tuple(np.asarray(o, dtype=bool).reshape(-1) for o in self.occupancy)
            if len(occ) != len(layers):
                raise ModelError("need one occupancy map per level")
            for k, (o, c) in enumerate(zip(occ, counts)):
                if len(o) != c:
                    raise ModelError(f"occupancy map {k} has length {len(o)}, expected {c}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "resolutions", res)
        object.__setattr__(self, "occupancy", tuple(_frozen(o) for o in occ))

    @property
    def num_levels(self) -> int:
        return len(self.layers)

    @property
    def cumulative_counts(self) -> list[int]:
        return [int(c) for c in np.cumsum([l.count for l in self.layers])]

    @property
    def total_splats(self) -> int:
        return self.cumulative_counts[-1]

    def introduction_levels(self) -> np.ndarray:
        """Level at which each global splat index first appears."""
        return np.repeat(np.arange(self.num_levels), [l.count for l in self.layers])

    def all_splats(self) -> np.ndarray:
        """Every new splat of every layer with its base (as-introduced) opacity."""
        return np.concatenate([l.new_splats for l in self.layers], axis=0)

    def _check_level(self, level: int):
        if not 0 <= level < self.num_levels:
            raise IndexError(f"level {level} out of range [0, {self.num_levels - 1}]")

    def level_opacities(self, level: int) -> np.ndarray:
        """Effective opacity of every splat introduced at levels <= ``level``."""
        self._check_level(level)
        n = self.cumulative_counts[level]
        op_col = self.schema.column("opacity")
        ops = np.concatenate([l.new_splats[:, op_col] for l in self.layers[: level + 1]]).astype(np.float32)
        for layer in self.layers[1 : level + 1]:
            ops[layer.update_indices] = layer.update_opacities
        return ops[:n]

    def truncate(self, levels: int) -> "LayeredModel":
        """The first ``levels`` levels as a model of their own."""
        if not 1 <= levels <= self.num_levels:
            raise IndexError(f"cannot truncate to {levels} levels")
        return LayeredModel(
            self.layers[:levels], self.resolutions[:levels], self.occupancy[:levels], self.schema
        )

    def with_occupancy(self, occupancy) -> "LayeredModel":
        return LayeredModel(self.layers, self.resolutions, tuple(occupancy), self.schema)


def compose_level(model: LayeredModel, level: int, *, return_index: bool = False):
    """Cumulative splat set of ``level`` with effective opacities.

    Splats whose occupancy bit is false at ``level`` are dropped.  With
    ``return_index`` the surviving global indices are returned as well.
    """
    ops = model.level_opacities(level)
    n = len(ops)
    mat = model.all_splats()[:n].copy()
    mat[:, model.schema.column("opacity")] = ops
    keep = np.flatnonzero(model.occupancy[level])
    if return_index:
        return mat[keep], keep
    return mat[keep]


def effective_opacity(model: LayeredModel, splat_index: int, level: int) -> float:
    """Opacity of one splat at ``level``; 0 if it is introduced later."""
    total = model.total_splats
    if not 0 <= splat_index < total:
        raise IndexError(f"splat index {splat_index} out of range [0, {total})")
    model._check_level(level)
    if splat_index >= model.cumulative_counts[level]:
        return 0.0
    return float(model.level_opacities(level)[splat_index])


def splats_of(mat: np.ndarray, schema: AttributeSchema = SPLAT2D_SCHEMA) -> Splats:
    return Splats.from_matrix(mat, schema)
