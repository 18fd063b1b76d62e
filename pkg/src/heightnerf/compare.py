"""Quadrature comparison of uniform and AIS intervals against a dense reference."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import camera_rays
from .sampling import SamplerConfig, ais_edges, uniform_edges_batch
from .scenegen import AnalyticScene, DatasetSpec, dataset_cameras, render_oracle_rays, shade_oracle

CSV_HEADER = ["ray_id", "has_border", "err_uniform", "err_ais", "n_intervals"]


@dataclass
class ComparisonResult:
    has_border: np.ndarray
    err_uniform: np.ndarray
    err_ais: np.ndarray
    n_intervals: int

    @property
    def n_rays(self) -> int:
        return int(self.has_border.shape[0])

    def summary(self) -> dict:
        b = self.has_border
        out = {
            "n_rays": self.n_rays,
            "n_border": int(b.sum()),
            "mean_err_uniform": float(self.err_uniform.mean()) if self.n_rays else 0.0,
            "mean_err_ais": float(self.err_ais.mean()) if self.n_rays else 0.0,
        }
        if b.any():
            out["border_mean_err_uniform"] = float(self.err_uniform[b].mean())
            out["border_mean_err_ais"] = float(self.err_ais[b].mean())
        else:
            out["border_mean_err_uniform"] = out["border_mean_err_ais"] = 0.0
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i in range(self.n_rays):
                w.writerow([i, int(self.has_border[i]), f"{self.err_uniform[i]:.10g}",
                            f"{self.err_ais[i]:.10g}", self.n_intervals])


def random_scene_rays(scene: AnalyticScene, n_rays: int, seed: int = 0, n_cameras: int = 40):
    """Pixel-center rays of random pixels drawn from orbit cameras around ``scene``."""
    cams = dataset_cameras(scene, DatasetSpec(num_views=n_cameras, seed=seed))
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(cams), size=n_rays)
    o = np.empty((n_rays, 3))
    d = np.empty((n_rays, 3))
    near = np.empty(n_rays)
    far = np.empty(n_rays)
    for ci in np.unique(which):
        sel = np.flatnonzero(which == ci)
        cam = cams[ci]
        co, cd = camera_rays(cam)
        pix = rng.integers(0, co.shape[0], size=sel.size)
        o[sel], d[sel] = co[pix], cd[pix]
        near[sel], far[sel] = cam.near, cam.far
    return o, d, near, far


def midpoint_colors(scene: AnalyticScene, o, d, edges) -> np.ndarray:
    ts = 0.5 * (edges[:, :-1] + edges[:, 1:])
    return shade_oracle(scene, o, d, ts, edges[:, -1])


def compare_sampling(scene: AnalyticScene, n_rays: int = 1000, n_intervals: int = 64, seed: int = 0,
                     n_reference: int = 4096, cfg: SamplerConfig | None = None) -> ComparisonResult:
    """Per-ray L1 color error (summed over channels) of midpoint quadrature."""
    cfg = cfg or SamplerConfig(n_intervals=n_intervals)
    o, d, near, far = random_scene_rays(scene, n_rays, seed)
    ref = render_oracle_rays(scene, o, d, near, far, n_reference)
    uni = uniform_edges_batch(near, far, cfg.n_intervals)
    ais, _, has_border = ais_edges(o, d, near, far, scene.heightfield, cfg)
    err_u = np.abs(midpoint_colors(scene, o, d, uni) - ref).sum(axis=1)
    err_a = np.abs(midpoint_colors(scene, o, d, ais) - ref).sum(axis=1)
    return ComparisonResult(np.asarray(has_border, dtype=bool), err_u, err_a, cfg.n_intervals)
