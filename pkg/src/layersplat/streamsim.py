"""Trace-driven adaptive streaming of a layered container.

A session is a sequence of windows.  Each window predicts bandwidth from the
previous window's measured throughput, asks the policy for a target level and
downloads the missing layers base first at the trace's piecewise-constant
rate.  Layers persist across windows, so delivered levels never go down.

Sizes are bytes, bandwidth is kilobits per second (1 kbit = 1000 bits) and
times are seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import codec
from .model import LayeredModel


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamManifest:
    sizes: tuple[int, ...]
    resolutions: tuple[float, ...]
    quality: tuple[float, ...] | None = None
    header_bytes: int = 0

    def __post_init__(self):
        if not self.sizes or len(self.sizes) != len(self.resolutions):
            raise StreamError("manifest needs one size and one resolution per level")
        if any(s < 0 for s in self.sizes):
            raise StreamError("segment sizes must be non-negative")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise StreamError("resolutions must be strictly increasing")
        if self.quality is not None and len(self.quality) != len(self.sizes):
            raise StreamError("need one quality score per level")

    @property
    def level_count(self) -> int:
        return len(self.sizes)


def build_manifest(packed, quality=None) -> StreamManifest:
    """One segment per layer block of a container (``PackedModel`` or raw bytes)."""
    if not isinstance(packed, codec.PackedModel):
        packed = codec.scan(packed)
    n = len(packed.layer_ranges)
    q = None if quality is None else tuple(float(v) for v in quality)
    hdr = packed.header_range[1] - packed.header_range[0]
    return StreamManifest(tuple(packed.layer_sizes), codec.implied_resolutions(n), q, hdr)


def manifest_variants(model: LayeredModel, thresholds=(0.005, 0.01, 0.02), quality=None) -> dict:
    """Manifests of the same model re-occupied at alternative opacity thresholds.

    Raising the threshold drops faint splats from every level and shrinks the
    segments; choosing among the variants is left to the caller.
    """
    out = {}
    for th in thresholds:
        m = codec.compact(model.with_occupancy(codec.build_occupancy(model, th)))
        out[float(th)] = build_manifest(codec.pack(m), quality)
    return out


@dataclass(frozen=True)
class BandwidthTrace:
    times: tuple[float, ...]
    kbps: tuple[float, ...]

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.kbps):
            raise StreamError("trace needs at least one (time, bandwidth) sample")
        if self.times[0] != 0:
            raise StreamError("trace must start at time 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise StreamError("trace times must be strictly increasing")
        if any(not (k >= 0) for k in self.kbps):
            raise StreamError("bandwidth must be non-negative")

    def rate_at(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.kbps[max(i, 0)]

    def download_time(self, start: float, nbytes: int) -> float:
        """Seconds to move ``nbytes`` starting at ``start``; inf if the trace never delivers them."""
        bits = 8.0 * nbytes
        if bits == 0:
            return 0.0
        i = max(int(np.searchsorted(self.times, start, side="right")) - 1, 0)
        t = start
        while True:
            rate = self.kbps[i] * 1000.0
            end = self.times[i + 1] if i + 1 < len(self.times) else math.inf
            if rate == math.inf:
                return t - start
            span = end - t
            if rate > 0 and rate * span >= bits:
                return t + bits / rate - start
            if end == math.inf:
                return math.inf
            bits -= rate * span
            t = end
            i += 1


def load_trace(text: str) -> BandwidthTrace:
    """Parse ``time_s,bandwidth_kbps`` lines; blank lines and ``#`` comments are skipped."""
    times, rates = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise StreamError(f"line {lineno}: expected 'time_s,bandwidth_kbps', got {raw!r}")
        try:
            t, k = float(parts[0]), float(parts[1])
        except ValueError:
            raise StreamError(f"line {lineno}: cannot parse {raw!r}") from None
        if not math.isfinite(t):
            raise StreamError(f"line {lineno}: time must be finite")
        if not k >= 0:
            raise StreamError(f"line {lineno}: negative bandwidth {k}")
        if times and t <= times[-1]:
            raise StreamError(f"line {lineno}: time {t} does not increase")
        if not times and t != 0:
            raise StreamError(f"line {lineno}: trace must start at time 0")
        times.append(t)
        rates.append(k)
    if not times:
        raise StreamError("empty trace")
    return BandwidthTrace(tuple(times), tuple(rates))


def abr_decide(downloaded: int, deadline: float, predicted_kbps: float, manifest: StreamManifest) -> int:
    """Highest level whose missing segments fit the deadline at the predicted rate.

    ``downloaded`` is the number of layers already held.  The base layer is
    mandatory, so the answer is at least 0.
    """
    if not deadline > 0:
        raise StreamError("deadline must be positive")
    n = manifest.level_count
    best = max(min(downloaded, n) - 1, 0)
    budget = deadline * predicted_kbps * 1000.0
    bits = 0.0
    for lvl in range(downloaded, n):
        bits += 8.0 * manifest.sizes[lvl]
        if bits <= budget:
            best = lvl
        else:
            break
    return best


@dataclass(frozen=True)
class SessionConfig:
    deadline: float
    windows: int
    predictor: str = "last-sample"

    def __post_init__(self):
        if not self.deadline > 0 or self.windows < 0:
            raise StreamError("deadline must be positive and window count non-negative")
        if self.predictor != "last-sample":
            raise StreamError(f"unknown bandwidth predictor {self.predictor!r}")


@dataclass(frozen=True)
class WindowRecord:
    window: int
    wall_time: float
    level: int
    bytes: int
    download_s: float
    stall_s: float
    predicted_kbps: float


@dataclass
class SessionLog:
    records: list[WindowRecord] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.records)

    @property
    def total_stall(self) -> float:
        return float(sum(r.stall_s for r in self.records))


Policy = Callable[[int, float, float, StreamManifest], int]


def simulate(manifest: StreamManifest, trace: BandwidthTrace, cfg: SessionConfig,
             policy: Policy = abr_decide) -> SessionLog:
    """Run one streaming session.

    A window lasts ``cfg.deadline`` seconds or until its downloads finish,
    whichever is later; the overrun is the stall.  If the trace can never
    deliver a requested layer the stall is infinite and the session ends.
    """
    log = SessionLog()
    clock = 0.0
    held = 0
    predicted = trace.rate_at(0.0)
    n = manifest.level_count
    for w in range(cfg.windows):
        target = int(policy(held, cfg.deadline, predicted, manifest))
        if not 0 <= target < n:
            raise StreamError(f"policy chose level {target} outside [0, {n})")
        level = max(target, held - 1)
        nbytes = int(sum(manifest.sizes[held : level + 1]))
        dur = trace.download_time(clock, nbytes)
        stall = max(dur - cfg.deadline, 0.0)
        log.records.append(WindowRecord(w, clock, level, nbytes, dur, stall, predicted))
        if dur == math.inf:
            break
        held = level + 1
        clock += max(dur, cfg.deadline)
        if nbytes:
            predicted = math.inf if dur == 0 else 8.0 * nbytes / dur / 1000.0
    return log


def session_metrics(log: SessionLog, manifest: StreamManifest | None = None) -> dict:
    recs = log.records
    if not recs:
        return {"mean_delivered_level": 0.0, "total_stall_s": 0.0, "total_bytes": 0, "quality_timeline": []}
    timeline = []
    if manifest is not None and manifest.quality is not None:
        timeline = [manifest.quality[r.level] for r in recs]
    return {
        "mean_delivered_level": float(np.mean([r.level for r in recs])),
        "total_stall_s": log.total_stall,
        "total_bytes": log.total_bytes,
        "quality_timeline": timeline,
    }


def format_log(log: SessionLog) -> str:
    lines = ["window,level,bytes,download_s,stall_s"]
    lines += [f"{r.window},{r.level},{r.bytes},{r.download_s:.6f},{r.stall_s:.6f}" for r in log.records]
    return "\n".join(lines) + "\n"


def format_manifest(manifest: StreamManifest) -> str:
    lines = ["level,bytes,resolution,quality"]
    for i, (s, r) in enumerate(zip(manifest.sizes, manifest.resolutions)):
        q = "" if manifest.quality is None else f"{manifest.quality[i]:.6f}"
        lines.append(f"{i},{s},{r:g},{q}")
    return "\n".join(lines) + "\n"
