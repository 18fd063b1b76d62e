"""Synthetic city scenes: box buildings on a heightfield, an analytic
radiance field for ground truth, oracle renders and on-disk datasets.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import heightfield as hfmod
from .field import SceneBounds
from .geometry import Camera, ImageBuffer, camera_rays, look_at
from .heightfield import HeightField, heights_at
from .render import composite_batch
from .sampling import sample_deltas

DEFAULT_GROUND = (0.36, 0.34, 0.30)
DEFAULT_SKY = (0.55, 0.72, 0.92)


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_buildings: int = 5
    extent: float = 8.0
    cell_size: float = 0.25
    height_range: tuple[float, float] = (1.0, 3.0)
    size_range: tuple[float, float] = (1.0, 2.5)
    sigma_solid: float = 20.0
    ground_thickness: float = 100.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("height_range", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class DatasetSpec:
    num_views: int = 20
    image_size: int = 48
    orbit_radius: float = 9.0
    orbit_height: float = 5.0
    fov_x: float = 0.8
    include_top_views: bool = False
    seed: int = 0
    holdout_every: int = 8
    n_dense: int = 512

    def __post_init__(self):
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        if self.holdout_every < 1:
            raise ValueError("holdout_every must be >= 1")


@dataclass
class AnalyticScene:
    heightfield: HeightField
    footprint_ids: np.ndarray  # (nrows, ncols), 0 = no building
    building_colors: np.ndarray  # (n_buildings + 1, 3); row 0 unused
    ground_color: tuple = DEFAULT_GROUND
    sky_color: tuple = DEFAULT_SKY
    sigma_solid: float = 20.0
    ground_thickness: float = 100.0
    _clean: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.sigma_solid <= 0:
            raise ValueError("sigma_solid must be positive")
        cols = np.asarray(self.building_colors, dtype=np.float64).reshape(-1, 3)
        for c in (cols, np.asarray(self.ground_color), np.asarray(self.sky_color)):
            if c.size and (c.min() < 0 or c.max() > 1):
                raise ValueError("colors must lie in [0, 1]")
        self.building_colors = cols
        self.footprint_ids = np.asarray(self.footprint_ids, dtype=np.int64).reshape(
            self.heightfield.nrows, self.heightfield.ncols)
        self._clean = self.heightfield.clean_heights()

    def bounds(self) -> SceneBounds:
        xmin, xmax, ymin, ymax = self.heightfield.extent
        top = max(self.heightfield.max_height(), 1.0) * 1.25
        # the ground is a deep slab; only its top layer matters for bounds
        return SceneBounds((xmin, ymin, -0.5), (xmax, ymax, top))

    def bounding_radius(self) -> float:
        b = self.bounds()
        return 0.5 * float(np.linalg.norm(np.subtract(b.hi, b.lo)))

    def center(self) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.heightfield.extent
        return np.array([0.5 * (xmin + xmax), 0.5 * (ymin + ymax), 0.0])

    def to_json_dict(self) -> dict:
        return {
            "heightfield": hfmod.to_json_dict(self.heightfield),
            "footprint_ids": [int(v) for v in self.footprint_ids.ravel()],
            "building_colors": self.building_colors.tolist(),
            "ground_color": list(self.ground_color),
            "sky_color": list(self.sky_color),
            "sigma_solid": self.sigma_solid,
            "ground_thickness": self.ground_thickness,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AnalyticScene":
        return cls(
            heightfield=hfmod.from_json_dict(d["heightfield"]),
            footprint_ids=np.asarray(d["footprint_ids"]),
            building_colors=np.asarray(d["building_colors"]),
            ground_color=tuple(d["ground_color"]),
            sky_color=tuple(d["sky_color"]),
            sigma_solid=float(d["sigma_solid"]),
            ground_thickness=float(d["ground_thickness"]),
        )


def heightfield_from_footprints(footprints, ncols: int, nrows: int, cell_size: float,
                                origin=(0.0, 0.0)) -> tuple[HeightField, np.ndarray]:
    """Rasterize ``(col0, col1, row0, row1, height)`` boxes (inclusive cell ranges)."""
    heights = np.zeros((nrows, ncols))
    ids = np.zeros((nrows, ncols), dtype=np.int64)
    for k, (c0, c1, r0, r1, h) in enumerate(footprints, start=1):
        heights[r0:r1 + 1, c0:c1 + 1] = h
        ids[r0:r1 + 1, c0:c1 + 1] = k
    hf = HeightField(origin[0], origin[1], cell_size, ncols, nrows, heights)
    return hf, ids


def make_city_heightfield(n_buildings: int, extent: float, height_range, cell_size: float,
                          seed: int, size_range=(1.0, 2.5), max_retries: int = 2000):
    """Random non-overlapping rectangular buildings on a square grid centered at the origin.

    Returns ``(heightfield, footprint_ids, footprints)``.
    """
    if n_buildings < 1:
        raise ValueError("n_buildings must be >= 1")
    n = int(round(extent / cell_size))
    rng = np.random.default_rng(seed)
    lo_c = max(1, int(round(size_range[0] / cell_size)))
    hi_c = max(lo_c, int(round(size_range[1] / cell_size)))
    occupied = np.zeros((n, n), dtype=bool)
    footprints = []
    # keep a one-cell margin at the grid edge and between buildings
    for _ in range(n_buildings):
        for _attempt in range(max_retries):
            w = int(rng.integers(lo_c, hi_c + 1))
            d = int(rng.integers(lo_c, hi_c + 1))
            if w + 2 > n or d + 2 > n:
                continue
            c0 = int(rng.integers(1, n - w))
            r0 = int(rng.integers(1, n - d))
            c1, r1 = c0 + w - 1, r0 + d - 1
            if occupied[max(r0 - 1, 0):r1 + 2, max(c0 - 1, 0):c1 + 2].any():
                continue
            h = float(rng.uniform(height_range[0], height_range[1]))
            occupied[r0:r1 + 1, c0:c1 + 1] = True
            footprints.append((c0, c1, r0, r1, h))
            break
        else:
            raise SceneGenerationError(
                f"placed only {len(footprints)} of {n_buildings} buildings after {max_retries} retries")
    half = 0.5 * n * cell_size
    hf, ids = heightfield_from_footprints(footprints, n, n, cell_size, origin=(-half, -half))
    return hf, ids, footprints


def _building_palette(n: int, rng: np.random.Generator) -> np.ndarray:
    cols = np.zeros((n + 1, 3))
    base = rng.permutation(n) / max(n, 1)
    for k in range(n):
        hue = (base[k] + 0.08) % 1.0
        h6 = hue * 6.0
        kk = np.array([5.0, 3.0, 1.0])
        c = 1.0 - np.clip(np.minimum((kk + h6) % 6.0, 4.0 - (kk + h6) % 6.0), 0.0, 1.0)
        cols[k + 1] = 0.15 + 0.75 * c
    return cols


def make_scene(spec: SceneSpec) -> AnalyticScene:
    hf, ids, _ = make_city_heightfield(spec.n_buildings, spec.extent, spec.height_range,
                                       spec.cell_size, spec.seed, spec.size_range)
    rng = np.random.default_rng(spec.seed + 7919)
    return AnalyticScene(hf, ids, _building_palette(spec.n_buildings, rng),
                         sigma_solid=spec.sigma_solid, ground_thickness=spec.ground_thickness)


def empty_scene(extent: float = 8.0, cell_size: float = 0.5) -> AnalyticScene:
    """No buildings and no ground slab."""
    n = int(round(extent / cell_size))
    hf = HeightField(-0.5 * extent, -0.5 * extent, cell_size, n, n, np.zeros(n * n))
    return AnalyticScene(hf, np.zeros((n, n)), np.zeros((1, 3)), ground_thickness=0.0)


def analytic_field(scene: AnalyticScene, points, dirs=None):
    """Ground-truth ``(rgb, sigma)`` at world ``points``; direction is ignored."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hf = scene.heightfield
    col = np.floor((pts[:, 0] - hf.origin_x) / hf.cell_size)
    row = np.floor((pts[:, 1] - hf.origin_y) / hf.cell_size)
    inside = (col >= 0) & (row >= 0) & (col < hf.ncols) & (row < hf.nrows)
    ci = np.where(inside, col, 0).astype(np.intp)
    ri = np.where(inside, row, 0).astype(np.intp)
    fid = np.where(inside, scene.footprint_ids[ri, ci], 0)
    h = heights_at(hf, pts[:, 0], pts[:, 1], scene._clean)
    z = pts[:, 2]
    in_building = (fid > 0) & (z >= 0) & (z <= h)
    if scene.ground_thickness > 0:
        in_ground = ~in_building & (z >= -scene.ground_thickness) & (z <= 0)
    else:
        in_ground = np.zeros_like(in_building)
    rgb = np.broadcast_to(np.asarray(scene.sky_color, dtype=np.float64), pts.shape).copy()
    rgb[in_building] = scene.building_colors[fid[in_building]]
    rgb[in_ground] = scene.ground_color
    sigma = np.where(in_building | in_ground, scene.sigma_solid, 0.0)
    return rgb, sigma


def shade_oracle(scene: AnalyticScene, origins, dirs, ts, t_far):
    """Composite the analytic field at samples ``ts`` (R, S) along rays.

    Rays that stay mostly transparent (final transparency > 0.5) receive the
    sky color weighted by their leftover transparency.
    """
    r, s = ts.shape
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    rgb, sigma = analytic_field(scene, pts.reshape(-1, 3))
    deltas = sample_deltas(ts, t_far)
    color, _, _, final = composite_batch(sigma.reshape(r, s), deltas, rgb.reshape(r, s, 3))
    blend = final > 0.5
    color[blend] += final[blend, None] * np.asarray(scene.sky_color)
    return np.clip(color, 0.0, 1.0)


def midpoint_ts(near, far, n: int) -> np.ndarray:
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    frac = (np.arange(n) + 0.5) / n
    return near[..., None] + (far - near)[..., None] * frac


def render_oracle_rays(scene: AnalyticScene, origins, dirs, near, far, n_dense: int,
                       chunk: int = 1024) -> np.ndarray:
    if n_dense < 1:
        raise ValueError("n_dense must be positive")
    r = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (r,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (r,))
    out = np.empty((r, 3))
    for s in range(0, r, chunk):
        e = min(s + chunk, r)
        ts = midpoint_ts(near[s:e], far[s:e], n_dense)
        out[s:e] = shade_oracle(scene, origins[s:e], dirs[s:e], ts, far[s:e])
    return out


def render_oracle(scene: AnalyticScene, camera: Camera, n_dense: int = 512) -> ImageBuffer:
    if n_dense < 64:
        raise ValueError("n_dense must be >= 64")
    o, d = camera_rays(camera)
    colors = render_oracle_rays(scene, o, d, camera.near, camera.far, n_dense)
    return ImageBuffer(colors.reshape(camera.height, camera.width, 3))


# ----------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------


def camera_near_far(scene: AnalyticScene, eye) -> tuple[float, float]:
    dist = float(np.linalg.norm(np.asarray(eye) - scene.center()))
    rad = scene.bounding_radius()
    return max(0.05, dist - rad), dist + rad


def dataset_cameras(scene: AnalyticScene, spec: DatasetSpec) -> list[Camera]:
    rng = np.random.default_rng(spec.seed)
    n_top = spec.num_views // 5 if spec.include_top_views else 0
    n_orbit = spec.num_views - n_top
    phase = float(rng.uniform(0, 2 * math.pi))
    center = scene.center()
    dist = math.hypot(spec.orbit_radius, spec.orbit_height)
    eyes = []
    for i in range(n_orbit):
        az = phase + 2 * math.pi * i / max(n_orbit, 1)
        h = spec.orbit_height * float(0.8 + 0.4 * rng.random())
        eyes.append(center + np.array([spec.orbit_radius * math.cos(az), spec.orbit_radius * math.sin(az), h]))
    for i in range(n_top):
        az = phase + 2 * math.pi * (i + 0.5) / n_top
        el = math.radians(75.0)
        eyes.append(center + dist * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]))
    cams = []
    for eye in eyes:
        near, far = camera_near_far(scene, eye)
        cams.append(Camera(look_at(eye, center), spec.fov_x, spec.image_size, spec.image_size, near, far))
    return cams


def split_indices(num_views: int, holdout_every: int) -> tuple[list[int], list[int]]:
    test = list(range(0, num_views, holdout_every))
    train = [i for i in range(num_views) if i % holdout_every]
    return train, test


def transforms_dict(cameras: list[Camera], files: list[str], bounds: SceneBounds | None = None) -> dict:
    cam0 = cameras[0]
    d = {
        "camera_angle_x": float(cam0.fov_x),
        "width": cam0.width,
        "height": cam0.height,
        "frames": [
            {
                "file_path": f,
                "transform_matrix": [[float(v) for v in row] for row in c.camera_to_world],
                "near": float(c.near),
                "far": float(c.far),
            }
            for c, f in zip(cameras, files)
        ],
    }
    if bounds is not None:
        d["scene_bounds"] = bounds.to_json_dict()
    return d


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def cameras_from_transforms(d: dict) -> list[Camera]:
    fov = float(d["camera_angle_x"])
    w = int(d.get("width", 0))
    h = int(d.get("height", w))
    cams = []
    for fr in d["frames"]:
        cams.append(Camera(np.asarray(fr["transform_matrix"], dtype=np.float64), fov, w, h,
                           float(fr.get("near", 0.0)), float(fr.get("far", 1.0))))
    return cams


def generate_dataset(scene: AnalyticScene, spec: DatasetSpec, out_dir) -> dict:
    """Write images, transforms.json, heightfield.json, scene.json and split.json."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    cams = dataset_cameras(scene, spec)
    files = [f"images/{i:03d}.png" for i in range(len(cams))]
    for cam, f in zip(cams, files):
        img = render_oracle(scene, cam, spec.n_dense)
        try:
            img.save_png(out / f)
        except OSError as exc:
            raise OSError(f"cannot write {out / f}: {exc}") from exc
    train, test = split_indices(len(cams), spec.holdout_every)
    payloads = {
        "transforms.json": dump_json(transforms_dict(cams, files, scene.bounds())),
        "heightfield.json": hfmod.to_json(scene.heightfield),
        "scene.json": dump_json(scene.to_json_dict()),
        "split.json": dump_json({"holdout_every": spec.holdout_every, "train": train, "test": test}),
        "dataset_spec.json": dump_json(asdict(spec)),
    }
    for name, text in payloads.items():
        try:
            (out / name).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {out / name}: {exc}") from exc
    return {"views": len(cams), "train": len(train), "test": len(test), "out_dir": str(out)}


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3) in [0, 1]
    train: list[int]
    test: list[int]
    heightfield: HeightField
    bounds: SceneBounds

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height


def load_dataset(root) -> Dataset:
    root = Path(root)
    tf = json.loads((root / "transforms.json").read_text(encoding="utf-8"))
    cams = cameras_from_transforms(tf)
    images = np.stack([ImageBuffer.load_png(root / fr["file_path"]).pixels for fr in tf["frames"]])
    split_path = root / "split.json"
    if split_path.exists():
        sp = json.loads(split_path.read_text(encoding="utf-8"))
        train, test = sp["train"], sp["test"]
    else:
        train, test = split_indices(len(cams), 8)
    hf = hfmod.load(root / "heightfield.json")
    if "scene_bounds" in tf:
        bounds = SceneBounds.from_json_dict(tf["scene_bounds"])
    else:
        xmin, xmax, ymin, ymax = hf.extent
        bounds = SceneBounds((xmin, ymin, -0.5), (xmax, ymax, max(hf.max_height(), 1.0) * 1.25))
    return Dataset(root, cams, images, list(train), list(test), hf, bounds)
