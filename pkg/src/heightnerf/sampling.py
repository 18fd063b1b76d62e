"""Ray sampling intervals: uniform baseline, adaptive interval sampling (AIS),
stratified draws and inverse-CDF hierarchical resampling.

AIS pipeline for one ray::

    uniform_intervals -> classify_interval -> merge_same_label
        -> refine_intervals -> adjust_count

The per-ray functions here are the readable reference. :func:`ais_edges`
processes ray batches with the compiled core when it is available.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _backend
from .geometry import Ray
from .heightfield import HeightField, height_at


class Label(enum.IntEnum):
    BACKGROUND = 0
    BORDER = 1
    OBJECT = 2


@dataclass(frozen=True)
class Interval:
    t0: float
    t1: float
    label: Label = Label.BACKGROUND

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError(f"empty interval [{self.t0}, {self.t1})")

    @property
    def width(self) -> float:
        return self.t1 - self.t0


@dataclass(frozen=True)
class SamplerConfig:
    n_intervals: int = 64
    border_split: int = 3
    object_split: int = 2
    mode: str = "ais"

    def __post_init__(self):
        if self.n_intervals < 2:
            raise ValueError("n_intervals must be >= 2")
        if self.border_split < 1 or self.object_split < 1:
            raise ValueError("split counts must be >= 1")
        if self.mode not in ("uniform", "ais"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class SampleBatch:
    ts: np.ndarray
    deltas: np.ndarray
    points: np.ndarray
    dirs: np.ndarray


def uniform_intervals(ray: Ray, n: int) -> list[Interval]:
    if n < 2:
        raise ValueError("need at least 2 intervals")
    edges = _uniform_edges(ray.t_near, ray.t_far, n)
    return [Interval(float(edges[i]), float(edges[i + 1])) for i in range(n)]


def _uniform_edges(t_near: float, t_far: float, n: int) -> np.ndarray:
    edges = t_near + (t_far - t_near) * (np.arange(n + 1) / n)
    edges[-1] = t_far
    return edges


def _point_label(ray: Ray, t: float, hf: HeightField) -> bool:
    """True when the point at ``t`` is at or below the local object height."""
    x = ray.origin[0] + t * ray.direction[0]
    y = ray.origin[1] + t * ray.direction[1]
    z = ray.origin[2] + t * ray.direction[2]
    return z <= height_at(hf, x, y)


def classify_interval(ray: Ray, iv: Interval, hf: HeightField) -> Label:
    below0 = _point_label(ray, iv.t0, hf)
    below1 = _point_label(ray, iv.t1, hf)
    if below0 and below1:
        return Label.OBJECT
    if not below0 and not below1:
        return Label.BACKGROUND
    return Label.BORDER


def merge_same_label(ivs: list[Interval]) -> list[Interval]:
    out: list[Interval] = []
    for iv in ivs:
        if out and out[-1].label == iv.label:
            out[-1] = Interval(out[-1].t0, iv.t1, iv.label)
        else:
            out.append(iv)
    return out


def _split(iv: Interval, parts: int) -> list[Interval]:
    if parts == 1:
        return [iv]
    w = iv.t1 - iv.t0
    edges = [iv.t0 + w * k / parts for k in range(parts)] + [iv.t1]
    return [Interval(edges[k], edges[k + 1], iv.label) for k in range(parts)]


def refine_intervals(ivs: list[Interval], cfg: SamplerConfig) -> list[Interval]:
    out: list[Interval] = []
    for iv in ivs:
        if iv.label == Label.BORDER:
            out.extend(_split(iv, cfg.border_split))
        elif iv.label == Label.OBJECT:
            out.extend(_split(iv, cfg.object_split))
        else:
            out.append(iv)
    return out


def adjust_count(ivs: list[Interval], n: int) -> list[Interval]:
    """Grow or shrink a contiguous interval list to exactly ``n`` entries.

    Too few: the interval closest to the camera is subdivided by repeated
    bisection, always splitting its shallowest piece (ties go to the piece
    nearest the camera), so it ends up cut into near-equal parts instead of a
    geometric cascade. Too many: the two farthest intervals are merged
    repeatedly; a merged interval keeps the nearer member's label.
    """
    if not ivs:
        raise ValueError("cannot adjust an empty interval list")
    out = list(ivs)
    depth = [0]  # bisection depth of each piece of the original first interval
    while len(out) < n:
        j = depth.index(min(depth))
        piece = out[j]
        mid = 0.5 * (piece.t0 + piece.t1)
        out[j:j + 1] = [Interval(piece.t0, mid, piece.label), Interval(mid, piece.t1, piece.label)]
        depth[j:j + 1] = [depth[j] + 1, depth[j] + 1]
    while len(out) > n:
        a, b = out[-2], out[-1]
        out[-2:] = [Interval(a.t0, b.t1, a.label)]
    return out


def ais_intervals(ray: Ray, hf: HeightField, cfg: SamplerConfig) -> list[Interval]:
    base = uniform_intervals(ray, cfg.n_intervals)
    labeled = [Interval(iv.t0, iv.t1, classify_interval(ray, iv, hf)) for iv in base]
    merged = merge_same_label(labeled)
    if len(merged) == 1 and merged[0].label == Label.BACKGROUND:
        return base
    return adjust_count(refine_intervals(merged, cfg), cfg.n_intervals)


def intervals_for_ray(ray: Ray, hf: HeightField | None, cfg: SamplerConfig) -> list[Interval]:
    if cfg.mode == "uniform" or hf is None:
        return uniform_intervals(ray, cfg.n_intervals)
    return ais_intervals(ray, hf, cfg)


def stratified_sample(ray: Ray, ivs: list[Interval], rng) -> SampleBatch:
    """One uniform draw per interval.

    ``rng`` is a ``numpy.random.Generator`` or any object with a
    ``random(size)`` method returning fractions in [0, 1).
    """
    t0 = np.array([iv.t0 for iv in ivs])
    t1 = np.array([iv.t1 for iv in ivs])
    u = np.asarray(rng.random(len(ivs)), dtype=np.float64)
    ts = t0 + u * (t1 - t0)
    deltas = sample_deltas(ts, ray.t_far)
    points = ray.at(ts)
    dirs = np.broadcast_to(ray.direction, points.shape).copy()
    return SampleBatch(ts, deltas, points, dirs)


def sample_deltas(ts: np.ndarray, t_far) -> np.ndarray:
    """Distances to the next sample; the last sample runs to ``t_far``."""
    ts = np.asarray(ts)
    last = np.broadcast_to(np.asarray(t_far, dtype=ts.dtype), ts.shape[:-1])[..., None]
    return np.concatenate([ts[..., 1:], last], axis=-1) - ts


# ----------------------------------------------------------------------
# Batched paths
# ----------------------------------------------------------------------


def uniform_edges_batch(near: np.ndarray, far: np.ndarray, n: int) -> np.ndarray:
    frac = np.arange(n + 1) / n
    edges = near[:, None] + (far - near)[:, None] * frac[None, :]
    edges[:, -1] = far
    return edges


def ais_edges(
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    hf: HeightField,
    cfg: SamplerConfig,
    clean_heights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """AIS interval edges for a batch of rays.

    Returns ``(edges, labels, has_border)`` with shapes ``(R, N+1)``,
    ``(R, N)`` and ``(R,)``; ``has_border`` flags rays whose uniform
    classification contains at least one Border interval.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    near = np.ascontiguousarray(np.broadcast_to(near, origins.shape[:1]), dtype=np.float64)
    far = np.ascontiguousarray(np.broadcast_to(far, origins.shape[:1]), dtype=np.float64)
    grid = hf.clean_heights() if clean_heights is None else clean_heights
    return _backend.ais_edges(
        origins, dirs, near, far, grid,
        float(hf.origin_x), float(hf.origin_y), float(hf.cell_size),
        cfg.n_intervals, cfg.border_split, cfg.object_split,
    )


def interval_edges(origins, dirs, near, far, hf: HeightField | None, cfg: SamplerConfig, clean_heights=None):
    """Edges ``(R, N+1)`` for the configured sampling mode."""
    if cfg.mode == "uniform" or hf is None:
        return uniform_edges_batch(np.broadcast_to(near, origins.shape[:1]).astype(np.float64),
                                   np.broadcast_to(far, origins.shape[:1]).astype(np.float64),
                                   cfg.n_intervals)
    return ais_edges(origins, dirs, near, far, hf, cfg, clean_heights)[0]


def stratified_from_edges(edges: np.ndarray, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``t`` per interval (midpoints when ``rng`` is None) plus deltas."""
    t0, t1 = edges[:, :-1], edges[:, 1:]
    if rng is None:
        u = 0.5
    else:
        u = rng.random(t0.shape)
    ts = t0 + u * (t1 - t0)
    return ts, sample_deltas(ts, edges[:, -1])


def hierarchical_resample(
    coarse_ts: np.ndarray,
    weights: np.ndarray,
    n_fine: int,
    rng: np.random.Generator | None = None,
    bin_edges: np.ndarray | None = None,
) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant density ``weights + 1e-5``.

    Works on a single ray (1-D inputs) or a batch (2-D, one ray per row).
    Bins default to the midpoints between consecutive coarse samples, with
    the first and last bins extended to the outer samples. ``rng=None`` uses
    evenly spaced CDF quantiles (deterministic rendering).
    """
    coarse_ts = np.asarray(coarse_ts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    single = coarse_ts.ndim == 1
    if single:
        coarse_ts = coarse_ts[None]
        weights = weights[None]
        if bin_edges is not None:
            bin_edges = np.asarray(bin_edges, dtype=np.float64)[None]
    if coarse_ts.shape != weights.shape:
        raise ValueError("coarse_ts and weights must have the same shape")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    r, s = coarse_ts.shape
    if n_fine == 0:
        out = np.zeros((r, 0))
        return out[0] if single else out
    if bin_edges is None:
        mids = 0.5 * (coarse_ts[:, 1:] + coarse_ts[:, :-1])
        bin_edges = np.concatenate([coarse_ts[:, :1], mids, coarse_ts[:, -1:]], axis=1)
    dens = weights + 1e-5
    pdf = dens / dens.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (r, n_fine))
    else:
        u = rng.random((r, n_fine))
    u = np.ascontiguousarray(u)
    # one searchsorted over all rows: offset row i by 2*i
    offs = 2.0 * np.arange(r)[:, None]
    flat = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right")
    idx = flat.reshape(r, n_fine) - (s + 1) * np.arange(r)[:, None] - 1
    idx = np.clip(idx, 0, s - 1)
    c0 = np.take_along_axis(cdf, idx, axis=1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=1)
    e0 = np.take_along_axis(bin_edges, idx, axis=1)
    e1 = np.take_along_axis(bin_edges, idx + 1, axis=1)
    frac = (u - c0) / np.where(c1 - c0 > 0, c1 - c0, 1.0)
    fine = np.sort(e0 + frac * (e1 - e0), axis=1)
    return fine[0] if single else fine


def merge_samples(coarse_ts: np.ndarray, fine_ts: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([coarse_ts, fine_ts], axis=-1), axis=-1)
