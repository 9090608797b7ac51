"""Per-channel Gaussian statistics and symmetric-KL feature divergence.

Each channel of an activation map is summarised by a Gaussian fitted over
every (sample, row, column) value. Two modalities are compared channel by
channel with the symmetric KL divergence, and a layer's divergence is the
mean over its channels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import forward_segmentation

DEFAULT_FLOOR = 1e-8


@dataclass
class ChannelStats:
    """Welford summary for C channels sharing one observation count."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, channels: int) -> ChannelStats:
        return cls(0, np.zeros(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    def push(self, value) -> ChannelStats:
        """Classic one-observation Welford step; ``value`` has one entry per channel."""
        value = np.asarray(value, dtype=np.float64).reshape(self.channels)
        self.count += 1
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)
        return self

    def merge(self, other: ChannelStats) -> ChannelStats:
        """Chan et al. parallel combination; returns a new summary."""
        if other.channels != self.channels:
            raise ValueError(f"cannot merge {self.channels}-channel and {other.channels}-channel stats")
        n = self.count + other.count
        if n == 0:
            return ChannelStats.empty(self.channels)
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return ChannelStats(n, mean, m2)

    @classmethod
    def from_values(cls, values: np.ndarray) -> ChannelStats:
        """Two-pass summary of an (observations, C) block."""
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        return cls(values.shape[0], mean, ((values - mean) ** 2).sum(axis=0))


@dataclass
class LayerStats:
    probe: str
    stats: ChannelStats

    @classmethod
    def empty(cls, probe: str, channels: int) -> LayerStats:
        return cls(probe, ChannelStats.empty(channels))


def accumulate(layer: LayerStats, activation) -> LayerStats:
    """Fold an NCHW activation batch into ``layer`` (every n, h, w is one observation)."""
    a = np.asarray(activation, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"expected an NCHW activation, got shape {a.shape}")
    if a.shape[1] != layer.stats.channels:
        raise ValueError(f"{layer.probe}: activation has {a.shape[1]} channels, "
                         f"statistics have {layer.stats.channels}")
    block = a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1).T
    layer.stats = layer.stats.merge(ChannelStats.from_values(block))
    return layer


def kl_gaussian(a: tuple[float, float], b: tuple[float, float], floor: float = DEFAULT_FLOOR,
                log_orientation: str = "standard") -> float:
    """KL(A || B) for 1-D Gaussians given as (mean, variance).

    ``log_orientation="printed"`` swaps the log term to log(sigma_A / sigma_B),
    which is not a valid KL on its own but leaves the symmetric sum unchanged.
    """
    (mu_a, var_a), (mu_b, var_b) = a, b
    var_a, var_b = max(var_a, floor), max(var_b, floor)
    log_term = 0.5 * math.log(var_b / var_a)
    if log_orientation == "printed":
        log_term = -log_term
    elif log_orientation != "standard":
        raise ValueError(f"unknown log orientation {log_orientation!r}")
    return log_term + (var_a + (mu_a - mu_b) ** 2) / (2.0 * var_b) - 0.5


def sym_kl(a, b, floor: float = DEFAULT_FLOOR, log_orientation: str = "standard") -> float:
    return kl_gaussian(a, b, floor, log_orientation) + kl_gaussian(b, a, floor, log_orientation)


def sym_kl_closed_form(mu_a, var_a, mu_b, var_b, floor: float = DEFAULT_FLOOR):
    """Vectorised symmetric KL; the log terms cancel."""
    var_a = np.maximum(var_a, floor)
    var_b = np.maximum(var_b, floor)
    d2 = (np.asarray(mu_a) - np.asarray(mu_b)) ** 2
    return (var_a + d2) / (2 * var_b) + (var_b + d2) / (2 * var_a) - 1.0


def layer_divergence(a: LayerStats | ChannelStats, b: LayerStats | ChannelStats,
                     floor: float = DEFAULT_FLOOR) -> float:
    """Mean over channels of the per-channel symmetric KL."""
    sa = a.stats if isinstance(a, LayerStats) else a
    sb = b.stats if isinstance(b, LayerStats) else b
    if sa.channels != sb.channels:
        raise ValueError(f"channel counts differ: {sa.channels} vs {sb.channels}")
    per_channel = sym_kl_closed_form(sa.mean, sa.variance, sb.mean, sb.variance, floor)
    # symmetric in (a, b) term by term; max() guards -0.0 style rounding below zero
    return float(max(per_channel.mean(), 0.0))


def floored_channels(a: ChannelStats, b: ChannelStats, floor: float = DEFAULT_FLOOR) -> int:
    return int(np.sum((a.variance < floor) | (b.variance < floor)))


# ------------------------------------------------------------------ reports


@dataclass
class DivergenceRow:
    probe: str
    depth: int
    divergence: float
    floored_channels: int = 0


@dataclass
class DivergenceReport:
    rows: list[DivergenceRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.divergence for r in self.rows])

    def mean_divergence(self) -> float:
        return float(self.values.mean()) if self.rows else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["probe", "depth", "divergence", "floored_channels"])
        for r in self.rows:
            writer.writerow([r.probe, r.depth, format(r.divergence, ".17g"), r.floored_channels])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> DivergenceReport:
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(":")
                meta[key.strip()] = value.strip()
            elif line:
                body.append(line)
        reader = csv.DictReader(body)
        rows = [DivergenceRow(r["probe"], int(r["depth"]), float(r["divergence"]), int(r["floored_channels"]))
                for r in reader]
        return cls(rows, meta)


def collect_layer_stats(net, stream: Iterable[np.ndarray], probes: Sequence[str],
                        batch_size: int = 8) -> dict[str, LayerStats]:
    """Accumulate per-probe statistics of ``net`` over a stream of CHW images."""
    stats: dict[str, LayerStats] = {}
    batch: list[np.ndarray] = []

    def flush():
        _, acts = forward_segmentation(net, np.stack(batch), "eval", capture=probes)
        for name in probes:
            if name not in stats:
                stats[name] = LayerStats.empty(name, acts[name].shape[1])
            accumulate(stats[name], acts[name])
        batch.clear()

    for image in stream:
        batch.append(np.asarray(image, dtype=np.float64))
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    if not stats:
        raise ValueError("empty sample stream")
    return stats


def divergence_profile(net, stream_a: Iterable[np.ndarray], stream_b: Iterable[np.ndarray],
                       probes: Sequence[str] | None = None, floor: float = DEFAULT_FLOOR,
                       batch_size: int = 8, metadata: dict[str, str] | None = None) -> DivergenceReport:
    """Feature divergence between two modalities at each probe, in network order."""
    registry = net.probes
    probes = list(registry) if probes is None else list(probes)
    unknown = [p for p in probes if p not in registry]
    if unknown:
        raise KeyError(f"unknown probe(s): {unknown}")
    probes.sort(key=registry.index)
    sa = collect_layer_stats(net, stream_a, probes, batch_size)
    sb = collect_layer_stats(net, stream_b, probes, batch_size)
    rows = [
        DivergenceRow(p, registry.index(p), layer_divergence(sa[p], sb[p], floor),
                      floored_channels(sa[p].stats, sb[p].stats, floor))
        for p in probes
    ]
    meta = {"policy": net.policy.value, "floor": format(floor, ".17g"),
            "observations_a": str(sa[probes[0]].stats.count),
            "observations_b": str(sb[probes[0]].stats.count)}
    meta.update(metadata or {})
    return DivergenceReport(rows, meta)
