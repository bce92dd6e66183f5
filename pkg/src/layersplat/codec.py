"""LAPS layered container, occupancy maps, 3DGS PLY ingest and significance pruning.

LAPS layout (all little-endian)::

    "LAPS"  u16 version=1  u16 schemaEntries
    schemaEntries x (u8 nameLen, name bytes, u8 arity)
    u8 levelCount
    levelCount x (
        u32 newSplatCount, f32[newSplatCount * width] attributes (row-major),
        u32 updateCount, updateCount x (u32 index, f32 opacity),
        u8[ceil(cumulativeCount / 8)] occupancy bitmap, LSB-first
    )
    u32 CRC32 (IEEE) of every preceding byte

Level ``i`` of an ``N``-level container has resolution fraction ``2**-(N-1-i)``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .model import GAUSSIAN3D_SCHEMA, AttributeSchema, Layer, LayeredModel, ModelError

MAGIC = b"LAPS"
VERSION = 1


class ContainerError(ValueError):
    """Base class for LAPS decode/encode failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class ChecksumError(ContainerError):
    pass


class SchemaMismatchError(ContainerError):
    pass


class PlyError(ValueError):
    pass


# --------------------------------------------------------------------------
# occupancy


def build_occupancy(model: LayeredModel, threshold: float = 0.005) -> tuple[np.ndarray, ...]:
    """Per-level bitmaps: a splat is kept iff its effective opacity >= threshold."""
    if not threshold > 0:
        raise ValueError(f"occupancy threshold must be positive, got {threshold}")
    return tuple(model.level_opacities(i) >= np.float32(threshold) for i in range(model.num_levels))


def level_stream(model: LayeredModel, level: int) -> LayeredModel:
    """Levels ``0..level`` restricted to the splats that ``level`` actually renders.

    This is what a client targeting exactly ``level`` has to receive.
    """
    model._check_level(level)
    keep = np.zeros(model.total_splats, dtype=bool)
    n = model.cumulative_counts[level]
    keep[:n] = model.occupancy[level]
    return _restrict(model.truncate(level + 1), keep[:n])


def stream_bytes(model: LayeredModel, level: int) -> bytes:
    """Standalone container holding exactly what a client at ``level`` receives.

    LAPS derives resolutions from the level count, so the ``level + 1``
    streamed levels are relabelled to the implied resolutions of a
    ``level + 1``-level container; the layer payloads are unaffected.
    """
    part = level_stream(model, level)
    part = LayeredModel(part.layers, implied_resolutions(part.num_levels), part.occupancy, part.schema)
    return pack(part).data


def compact(model: LayeredModel) -> LayeredModel:
    """Drop splats that are unoccupied at every level from their introduction on."""
    used = np.zeros(model.total_splats, dtype=bool)
    for occ in model.occupancy:
        used[: len(occ)] |= occ
    return _restrict(model, used)


def _restrict(model: LayeredModel, keep: np.ndarray) -> LayeredModel:
    remap = np.full(len(keep), -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    layers = []
    start = 0
    for layer in model.layers:
        sel = keep[start : start + layer.count]
        idx = layer.update_indices.astype(np.int64)
        ok = keep[idx] if idx.size else np.zeros(0, dtype=bool)
        layers.append(Layer(layer.new_splats[sel], remap[idx[ok]], layer.update_opacities[ok]))
        start += layer.count
    occ = [o[keep[: len(o)]] for o in model.occupancy]
    return LayeredModel(tuple(layers), model.resolutions, tuple(occ), model.schema)


# --------------------------------------------------------------------------
# container


@dataclass(frozen=True)
class PackedModel:
    data: bytes
    header_range: tuple[int, int]
    layer_ranges: tuple[tuple[int, int], ...]

    @property
    def layer_sizes(self) -> list[int]:
        return [b - a for a, b in self.layer_ranges]

    def prefix(self, levels: int) -> bytes:
        """Bytes a client needs to decode the first ``levels`` levels."""
        return self.data[: self.layer_ranges[levels - 1][1]]

    def __len__(self) -> int:
        return len(self.data)


def implied_resolutions(levels: int) -> tuple[float, ...]:
    return tuple(2.0 ** -(levels - 1 - i) for i in range(levels))


def _bitmap(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool), bitorder="little").tobytes()


def pack(model: LayeredModel, schema: AttributeSchema | None = None) -> PackedModel:
    schema = model.schema if schema is None else schema
    if schema.width != model.schema.width:
        raise SchemaMismatchError(f"schema width {schema.width} != model width {model.schema.width}")
    if model.num_levels > 255 or len(schema.entries) > 0xFFFF:
        raise ContainerError("too many levels or schema entries for the LAPS header")
    if model.resolutions != implied_resolutions(model.num_levels):
        raise ContainerError(
            f"LAPS stores consecutive power-of-two resolutions only, got {model.resolutions}"
        )
    head = bytearray(MAGIC)
    head += struct.pack("<HH", VERSION, len(schema.entries))
    for name, arity in schema.entries:
        raw = name.encode("utf-8")
        head += struct.pack("<B", len(raw)) + raw + struct.pack("<B", arity)
    head += struct.pack("<B", model.num_levels)
    out = bytearray(head)
    ranges = []
    for layer, occ in zip(model.layers, model.occupancy):
        start = len(out)
        out += struct.pack("<I", layer.count)
        out += np.ascontiguousarray(layer.new_splats, dtype="<f4").tobytes()
        out += struct.pack("<I", len(layer.update_indices))
        pairs = np.empty(len(layer.update_indices), dtype=[("i", "<u4"), ("o", "<f4")])
        pairs["i"] = layer.update_indices
        pairs["o"] = layer.update_opacities
        out += pairs.tobytes()
        out += _bitmap(occ)
        ranges.append((start, len(out)))
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return PackedModel(bytes(out), (0, len(head)), tuple(ranges))


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str, layer: int | None = None) -> memoryview:
        if self.pos + n > len(self.data):
            where = "header" if layer is None else f"layer {layer}"
            raise TruncatedError(f"truncated container: {what} of {where} needs {n} bytes "
                                 f"at offset {self.pos}, only {len(self.data) - self.pos} left", layer)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str, layer: int | None = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, layer))


def _read_header(r: _Reader) -> tuple[AttributeSchema, int]:
    if len(r.data) < 4 or bytes(r.data[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(r.data[:4])!r}, expected {MAGIC!r}")
    r.pos = 4
    version, nentries = r.unpack("<HH", "version")
    if version != VERSION:
        raise VersionError(f"unsupported LAPS version {version}")
    entries = []
    for _ in range(nentries):
        (nlen,) = r.unpack("<B", "schema name length")
        try:
            name = bytes(r.take(nlen, "schema name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"schema name is not UTF-8: {exc}") from None
        (arity,) = r.unpack("<B", "schema arity")
        entries.append((name, arity))
    try:
        schema = AttributeSchema(tuple(entries))
    except ModelError as exc:
        raise ContainerError(f"invalid schema: {exc}") from exc
    (levels,) = r.unpack("<B", "level count")
    if levels == 0:
        raise ContainerError("container declares zero levels")
    return schema, levels


def scan(data: bytes) -> PackedModel:
    """Locate header and layer byte ranges without decoding attributes."""
    return _decode(data, None, verify=True, build=False)


def _decode(data: bytes, levels: int | None, verify: bool, build: bool):
    data = bytes(data)
    r = _Reader(data)
    schema, total = _read_header(r)
    header_end = r.pos
    want = total if levels is None else levels
    if not 1 <= want <= total:
        raise ContainerError(f"cannot decode {want} of {total} levels")
    w = schema.width
    layers, occs, ranges = [], [], []
    cum = 0
    for k in range(want):
        start = r.pos
        (count,) = r.unpack("<I", "splat count", k)
        attrs = np.frombuffer(r.take(4 * w * count, "attributes", k), dtype="<f4").reshape(count, w)
        (nupd,) = r.unpack("<I", "update count", k)
        pairs = np.frombuffer(r.take(8 * nupd, "opacity updates", k), dtype=[("i", "<u4"), ("o", "<f4")])
        cum += count
        nbytes = (cum + 7) // 8
        bits = np.unpackbits(np.frombuffer(r.take(nbytes, "occupancy bitmap", k), dtype=np.uint8),
                             bitorder="little")[:cum].astype(bool)
        ranges.append((start, r.pos))
        if build:
            layers.append((attrs, pairs))
            occs.append(bits)
    if levels is None or verify:
        if want == total:
            payload_end = r.pos
            (crc,) = r.unpack("<I", "checksum", None)
            if crc != zlib.crc32(data[:payload_end]) & 0xFFFFFFFF:
                raise ChecksumError("CRC32 mismatch")
            if r.pos != len(data):
                raise ContainerError(f"{len(data) - r.pos} trailing bytes after checksum")
    if not build:
        return PackedModel(data, (0, header_end), tuple(ranges))
    # layers are validated only after the checksum, so damage reports as damage
    try:
        layers = [Layer(a.astype(np.float32), p["i"].astype(np.uint32), p["o"].astype(np.float32))
                  for a, p in layers]
        model = LayeredModel(tuple(layers), implied_resolutions(total)[:want], tuple(occs), schema)
    except ModelError as exc:
        raise ContainerError(f"container holds an invalid model: {exc}") from exc
    return model, schema


def unpack(data: bytes, levels: int | None = None) -> tuple[LayeredModel, AttributeSchema]:
    """Decode a container.

    With ``levels`` only the header and the first ``levels`` layer blocks are
    read, so a streamed prefix decodes without the trailing checksum.
    """
    return _decode(data, levels, verify=levels is None, build=True)


def dump_text(model: LayeredModel) -> str:
    """Human-readable listing of every layer (debugging aid)."""
    lines = ["schema " + " ".join(f"{n}:{a}" for n, a in model.schema.entries)]
    lines.append(f"levels {model.num_levels}")
    for k, (layer, occ) in enumerate(zip(model.layers, model.occupancy)):
        lines.append(f"level {k} resolution {model.resolutions[k]!r} new {layer.count} "
                     f"updates {len(layer.update_indices)} occupied {int(occ.sum())}/{len(occ)}")
        for row in layer.new_splats:
            lines.append("splat " + " ".join(repr(float(v)) for v in row))
        for i, o in zip(layer.update_indices, layer.update_opacities):
            lines.append(f"update {int(i)} {float(o)!r}")
        lines.append("occupancy " + "".join("1" if b else "0" for b in occ))
    return "\n".join(lines) + "\n"


def load_text(text: str) -> LayeredModel:
    """Inverse of :func:`dump_text`."""
    entries = None
    layers, occs, res = [], [], []
    cur = None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "schema":
                entries = tuple((p.rsplit(":", 1)[0], int(p.rsplit(":", 1)[1])) for p in parts[1:])
            elif tag == "levels":
                pass
            elif tag == "level":
                cur = {"splats": [], "idx": [], "ops": []}
                res.append(float(parts[3]))
                layers.append(cur)
            elif tag == "splat":
                cur["splats"].append([float(v) for v in parts[1:]])
            elif tag == "update":
                cur["idx"].append(int(parts[1]))
                cur["ops"].append(float(parts[2]))
            elif tag == "occupancy":
                occs.append(np.array([c == "1" for c in (parts[1] if len(parts) > 1 else "")], dtype=bool))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, IndexError, TypeError) as exc:
            raise ContainerError(f"line {lineno}: {exc}") from exc
    if entries is None:
        raise ContainerError("missing schema line")
    schema = AttributeSchema(entries)
    built = [
        Layer(np.array(l["splats"], dtype=np.float32).reshape(-1, schema.width),
              np.array(l["idx"], dtype=np.uint32), np.array(l["ops"], dtype=np.float32))
        for l in layers
    ]
    return LayeredModel(tuple(built), tuple(res), tuple(occs), schema)


# --------------------------------------------------------------------------
# 3DGS PLY ingest

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_PLY_COLUMNS = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file")
    nl = data.find(b"\n", end)
    body_start = (nl + 1) if nl >= 0 else len(data)
    fmt = None
    elements = []
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property declared before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown PLY property type {parts[1]!r}")
                elements[-1][2].append((_PLY_TYPES[parts[1]], parts[2]))
    if fmt is None:
        raise PlyError("PLY header lacks a format line")
    if fmt == "ascii":
        raise PlyError("ASCII PLY is not supported")
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return elements, body_start


def ingest_ply(data: bytes) -> np.ndarray:
    """Read an official 3DGS checkpoint PLY into GAUSSIAN3D_SCHEMA rows (float32).

    Opacity logits go through a sigmoid, log-scales through exp and rotation
    quaternions are normalized; rows keep file order.
    """
    elements, pos = _parse_ply_header(bytes(data))
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first PLY element must be 'vertex'")
    _, count, props = elements[0]
    if any(t == "list" for t, _ in props):
        raise PlyError("list properties in the vertex element are not supported")
    names = [n for _, n in props]
    missing = [c for c in _PLY_COLUMNS if c not in names]
    if missing:
        raise PlyError(f"missing vertex properties: {', '.join(missing)}")
    dtype = np.dtype([(n, "<" + t) for t, n in props])
    need = count * dtype.itemsize
    avail = len(data) - pos
    if avail < need or (len(elements) == 1 and avail != need):
        raise PlyError(f"vertex count {count} needs {need} payload bytes, found {avail}")
    verts = np.frombuffer(bytes(data), dtype=dtype, count=count, offset=pos)
    cols = np.column_stack([verts[c].astype(np.float64) for c in _PLY_COLUMNS]) if count else np.zeros((0, 62))
    s = GAUSSIAN3D_SCHEMA
    opc = s.column("opacity")
    cols[:, opc] = 1.0 / (1.0 + np.exp(-cols[:, opc]))
    cols[:, s.slice("scale")] = np.exp(cols[:, s.slice("scale")])
    q = cols[:, s.slice("rotation")]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise PlyError("zero-length rotation quaternion")
    cols[:, s.slice("rotation")] = q / norm
    return cols.astype(np.float32)


def records_model(records: np.ndarray, schema: AttributeSchema = GAUSSIAN3D_SCHEMA) -> LayeredModel:
    """Wrap a flat record matrix as a single-level model."""
    return LayeredModel((Layer(np.asarray(records, dtype=np.float32)),), (1.0,), None, schema)


# --------------------------------------------------------------------------
# significance-pruning baseline


def significance(mat: np.ndarray, schema: AttributeSchema) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    return mat[:, schema.column("opacity")] * np.prod(mat[:, schema.slice("scale")], axis=1)


def keep_count(n: int, keep_fraction: float) -> int:
    return min(n, math.ceil(Fraction(keep_fraction) * n))


def downsample_baseline(mat: np.ndarray, keep_fraction: float, schema: AttributeSchema,
                        *, return_index: bool = False):
    """Keep the top ``ceil(keep_fraction * n)`` splats by opacity x scale product.

    Ties go to the lower index; survivors keep their original order.
    """
    mat = np.asarray(mat)
    n = len(mat)
    if n == 0:
        raise ValueError("downsample_baseline needs at least one splat")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    return downsample_to_count(mat, keep_count(n, keep_fraction), schema, return_index=return_index)


def downsample_to_count(mat: np.ndarray, k: int, schema: AttributeSchema, *, return_index: bool = False):
    score = significance(mat, schema)
    order = np.lexsort((np.arange(len(mat)), -score))
    idx = np.sort(order[:k])
    return (mat[idx], idx) if return_index else mat[idx]
