"""Discrete volume rendering, its gradient, MSE and PSNR."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend


@dataclass(frozen=True)
class RaySamplesShaded:
    ts: np.ndarray
    deltas: np.ndarray
    rgb: np.ndarray  # (S, 3)
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("ts", "deltas", "sigma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3))
        n = self.ts.shape[0]
        if not (self.deltas.shape[0] == self.sigma.shape[0] == self.rgb.shape[0] == n):
            raise ValueError("sample arrays must have equal length")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        if np.any(self.deltas < 0):
            raise ValueError("deltas must be non-negative")


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray
    weights: np.ndarray
    transmittances: np.ndarray
    final_transparency: float


def composite(samples: RaySamplesShaded, background=None) -> RenderResult:
    """Composite one ray. ``background`` (RGB) is blended by the leftover
    transparency when given."""
    color, w, t, final = composite_batch(
        samples.sigma[None], samples.deltas[None], samples.rgb[None], background
    )
    return RenderResult(color[0], w[0], t[0], float(final[0]))


def composite_batch(sigma, deltas, rgb, background=None):
    """Batched compositing over rays (rows).

    Returns ``(color, weights, transmittances, final_transparency)``.
    """
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    if np.any(sigma < 0) or np.any(deltas < 0):
        raise ValueError("sigma and deltas must be non-negative")
    r, s = sigma.shape
    if s == 0:
        color = np.zeros((r, 3))
        w = t = np.zeros((r, 0))
        final = np.ones(r)
    else:
        color, w, t, final = _backend.composite_forward(sigma, deltas, rgb)
    if background is not None:
        color = color + final[:, None] * np.asarray(background, dtype=np.float64)
    return color, w, t, final


def composite_backward(samples: RaySamplesShaded, result: RenderResult, dcolor, background=None):
    """Gradients ``(dsigma, drgb)`` of a scalar loss for a single ray."""
    dsigma, drgb = composite_backward_batch(
        samples.sigma[None], samples.deltas[None], samples.rgb[None],
        result.weights[None], result.transmittances[None],
        np.array([result.final_transparency]), np.asarray(dcolor, dtype=np.float64)[None],
        background,
    )
    return dsigma[0], drgb[0]


def composite_backward_batch(sigma, deltas, rgb, weights, trans, final, dcolor, background=None):
    dcolor = np.ascontiguousarray(dcolor, dtype=np.float64)
    if background is not None:
        dfinal = dcolor @ np.asarray(background, dtype=np.float64)
    else:
        dfinal = np.zeros(dcolor.shape[0])
    return _backend.composite_backward(
        np.ascontiguousarray(sigma, dtype=np.float64),
        np.ascontiguousarray(deltas, dtype=np.float64),
        np.ascontiguousarray(rgb, dtype=np.float64),
        np.ascontiguousarray(weights), np.ascontiguousarray(trans),
        np.ascontiguousarray(final), dcolor, np.ascontiguousarray(dfinal),
    )


def _pixels(x):
    if hasattr(x, "pixels"):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


def mse_loss(rendered, target) -> float:
    a, b = _pixels(rendered), _pixels(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mse_grad(rendered, target) -> np.ndarray:
    """d(mse)/d(rendered)."""
    a, b = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return 2.0 * (a - b) / a.size


def psnr(mse: float, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect match."""
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)
