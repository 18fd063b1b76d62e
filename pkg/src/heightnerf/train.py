"""Training loop, model rendering and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import heightfield as hfmod
from .field import AdamState, EncodingConfig, MultiModel, Mlp, SceneBounds, adam_step
from .geometry import Camera, camera_rays
from .partition import PartitionConfig, ScenePartition, build_partition
from .render import composite_backward_batch, composite_batch, mse_grad, psnr
from .sampling import (SamplerConfig, hierarchical_resample, interval_edges, merge_samples,
                       sample_deltas, stratified_from_edges)
from .scenegen import Dataset, load_dataset

log = logging.getLogger(__name__)

TRAINLOG_HEADER = ["step", "train_mse", "test_psnr_db", "wall_seconds"]

# fields that fix parameter shapes or routing; a checkpoint only renders with matching values
MODEL_FIELDS = ("mm", "m_groups", "threshold", "n_layers", "width", "l_pos", "l_dir", "coarse_fine", "dtype")


class NumericError(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "runs/default"
    partition: str = ""
    seed: int = 0
    # sampling
    ais: bool = False
    n_intervals: int = 64
    border_split: int = 3
    object_split: int = 2
    n_fine: int = 32
    # scene partition
    mm: bool = False
    m_groups: int = 6
    threshold: float = 1.0
    kmeans_seed: int = 0
    kmeans_max_iters: int = 100
    # model
    n_layers: int = 4
    width: int = 64
    l_pos: int = 10
    l_dir: int = 4
    coarse_fine: bool = False
    dtype: str = "float32"
    # optimizer
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.1
    # training
    steps: int = 5000
    rays_per_batch: int = 256
    eval_interval: int = 500
    eval_views: int = 0
    checkpoint_interval: int = 0
    white_background: bool = False

    def validate(self) -> None:
        if self.n_intervals < 2:
            raise ValueError("n_intervals must be >= 2")
        if self.m_groups < 2:
            raise ValueError("m_groups must be >= 2")
        if self.steps < 0 or self.rays_per_batch < 1 or self.eval_interval < 1:
            raise ValueError("steps >= 0, rays_per_batch >= 1 and eval_interval >= 1 required")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.n_intervals, self.border_split, self.object_split,
                             "ais" if self.ais else "uniform")

    def partition_config(self) -> PartitionConfig:
        return PartitionConfig(self.m_groups, self.threshold, self.kmeans_seed, self.kmeans_max_iters)

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.l_pos, self.l_dir)


# ----------------------------------------------------------------------
# Rendering with a learned model
# ----------------------------------------------------------------------


@dataclass
class Renderer:
    model: MultiModel
    sampler: SamplerConfig
    heightfield: hfmod.HeightField
    n_fine: int = 32
    fine_model: MultiModel | None = None
    background: tuple | None = None

    def __post_init__(self):
        self._clean = self.heightfield.clean_heights()

    def edges(self, o, d, near, far):
        return interval_edges(o, d, near, far, self.heightfield, self.sampler, self._clean)

    def _eval(self, model, o, d, ts, keep):
        r, s = ts.shape
        pts = (o[:, None, :] + ts[..., None] * d[:, None, :]).reshape(-1, 3)
        dirs = np.repeat(d, s, axis=0)
        rgb, sigma, ctx = model.forward(pts, dirs, keep=keep)
        return rgb.reshape(r, s, 3).astype(np.float64), sigma.reshape(r, s).astype(np.float64), ctx

    def _composite(self, ts, far, sigma, rgb):
        deltas = sample_deltas(ts, far)
        color, w, trans, final = composite_batch(sigma, deltas, rgb, self.background)
        return color, w, trans, final, sigma, deltas, rgb

    def render_rays(self, o, d, near, far, rng=None, keep=False):
        """Render a ray batch.

        Returns a dict with ``color`` and the composited sample positions
        ``ts``; with ``keep`` also ``main`` (and
        ``coarse`` when separate coarse/fine networks are used), each a pair
        ``(res, parts)`` for ``backprop_render``. A part is ``(tag, ctx, cols)``
        where ``cols`` maps that forward pass to columns of the composited
        samples (None means all, in order).
        """
        edges = self.edges(o, d, near, far)
        ts_c, _ = stratified_from_edges(edges, rng)
        rgb_c, sig_c, ctx_c = self._eval(self.model, o, d, ts_c, keep)
        res_c = self._composite(ts_c, far, sig_c, rgb_c)
        out = {"ts": ts_c}
        if self.n_fine == 0:
            main = (res_c, [("coarse", ctx_c, None)])
        else:
            fine = hierarchical_resample(ts_c, res_c[1], self.n_fine, rng, bin_edges=edges)
            if self.fine_model is not None:
                ts = merge_samples(ts_c, fine)
                rgb, sig, ctx = self._eval(self.fine_model, o, d, ts, keep)
                main = (self._composite(ts, far, sig, rgb), [("fine", ctx, None)])
                out["coarse"] = (res_c, [("coarse", ctx_c, None)])
                out["ts"] = ts
            else:
                # one network: the coarse evaluations are reused, only fine points are new
                rgb_f, sig_f, ctx_f = self._eval(self.model, o, d, fine, keep)
                ts_all = np.concatenate([ts_c, fine], axis=1)
                order = np.argsort(ts_all, axis=1, kind="stable")
                ts = np.take_along_axis(ts_all, order, axis=1)
                sig = np.take_along_axis(np.concatenate([sig_c, sig_f], axis=1), order, axis=1)
                rgb = np.take_along_axis(np.concatenate([rgb_c, rgb_f], axis=1), order[..., None], axis=1)
                inv = np.argsort(order, axis=1)
                s = ts_c.shape[1]
                main = (self._composite(ts, far, sig, rgb),
                        [("coarse", ctx_c, inv[:, :s]), ("coarse", ctx_f, inv[:, s:])])
                out["ts"] = ts
        out["color"] = main[0][0]
        if keep:
            out["main"] = main
        return out

    def render_camera(self, camera: Camera, chunk: int = 4096) -> np.ndarray:
        o, d = camera_rays(camera)
        near = np.full(o.shape[0], camera.near)
        far = np.full(o.shape[0], camera.far)
        cols = []
        for s in range(0, o.shape[0], chunk):
            e = s + chunk
            cols.append(self.render_rays(o[s:e], d[s:e], near[s:e], far[s:e])["color"])
        img = np.concatenate(cols).reshape(camera.height, camera.width, 3)
        return np.clip(img, 0.0, 1.0)


def backprop_render(models: dict, res, parts, dcolor, background=None) -> dict[str, np.ndarray]:
    """Gradients keyed ``"{tag}/{param}"``, summed over the parts."""
    color, w, trans, final, sigma, deltas, rgb = res
    dsigma, drgb = composite_backward_batch(sigma, deltas, rgb, w, trans, final, dcolor, background)
    grads: dict[str, np.ndarray] = {}
    for tag, ctx, cols in parts:
        ds, dr = dsigma, drgb
        if cols is not None:
            ds = np.take_along_axis(dsigma, cols, axis=1)
            dr = np.take_along_axis(drgb, cols[..., None], axis=1)
        g = models[tag].backward(ctx, dr.reshape(-1, 3), ds.reshape(-1))
        for k, v in g.items():
            key = f"{tag}/{k}"
            grads[key] = grads[key] + v if key in grads else v
    return grads


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------


def dataset_rays(ds: Dataset, views: list[int]):
    os_, ds_, ns, fs, cs = [], [], [], [], []
    for v in views:
        cam = ds.cameras[v]
        o, d = camera_rays(cam)
        os_.append(o)
        ds_.append(d)
        ns.append(np.full(o.shape[0], cam.near))
        fs.append(np.full(o.shape[0], cam.far))
        cs.append(ds.images[v].reshape(-1, 3))
    return (np.concatenate(os_), np.concatenate(ds_), np.concatenate(ns),
            np.concatenate(fs), np.concatenate(cs))


def view_psnrs(renderer: Renderer, ds: Dataset, views: list[int]) -> list[float]:
    out = []
    for v in views:
        img = renderer.render_camera(ds.cameras[v])
        out.append(psnr(float(np.mean((img - ds.images[v]) ** 2))))
    return out


def mean_psnr(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None,
                 partition: ScenePartition | None = None):
        cfg.validate()
        self.cfg = cfg
        self.ds = dataset if dataset is not None else load_dataset(cfg.dataset)
        self.hf = self.ds.heightfield
        self.partition = None
        if cfg.mm:
            if partition is None and cfg.partition:
                d = json.loads(Path(cfg.partition).read_text(encoding="utf-8"))
                partition = ScenePartition.from_json_dict(d, self.hf)
            self.partition = partition if partition is not None else build_partition(self.hf, cfg.partition_config())
        dtype = np.dtype(cfg.dtype)
        enc = cfg.encoding()
        self.model = MultiModel.create(enc, self.ds.bounds, self.partition, cfg.n_layers, cfg.width,
                                       seed=cfg.seed, dtype=dtype)
        self.fine_model = None
        if cfg.coarse_fine:
            self.fine_model = MultiModel.create(enc, self.ds.bounds, self.partition, cfg.n_layers,
                                                cfg.width, seed=cfg.seed + 1, dtype=dtype)
        self.adam = AdamState.for_params(self.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                                         beta2=cfg.beta2, eps=cfg.eps)
        self.step = 0
        self.rng = np.random.default_rng(cfg.seed)
        bg = (1.0, 1.0, 1.0) if cfg.white_background else None
        self.renderer = Renderer(self.model, cfg.sampler(), self.hf, cfg.n_fine, self.fine_model, bg)
        self.rays = dataset_rays(self.ds, self.ds.train)
        self.log_rows: list[list] = []

    def parameters(self) -> dict[str, np.ndarray]:
        p = {f"coarse/{k}": v for k, v in self.model.parameters().items()}
        if self.fine_model is not None:
            p.update({f"fine/{k}": v for k, v in self.fine_model.parameters().items()})
        return p

    def lr_at(self, step: int) -> float:
        total = max(self.cfg.steps, 1)
        return self.cfg.lr * self.cfg.lr_decay ** (step / total)

    def train_step(self) -> float:
        o, d, near, far, target = self.rays
        idx = self.rng.integers(0, o.shape[0], size=self.cfg.rays_per_batch)
        out = self.renderer.render_rays(o[idx], d[idx], near[idx], far[idx], rng=self.rng, keep=True)
        tgt = target[idx]
        res, parts = out["main"]
        loss = float(np.mean((res[0] - tgt) ** 2))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step + 1}")
        bg = self.renderer.background
        models = {"coarse": self.model, "fine": self.fine_model}
        grads = backprop_render(models, res, parts, mse_grad(res[0], tgt), bg)
        if "coarse" in out:
            res_c, parts_c = out["coarse"]
            grads.update(backprop_render(models, res_c, parts_c, mse_grad(res_c[0], tgt), bg))
        for k, v in grads.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite gradient for {k} at step {self.step + 1}")
        self.adam.lr = self.lr_at(self.step)
        adam_step(self.parameters(), grads, self.adam)
        self.step += 1
        return loss

    def evaluate(self) -> list[float]:
        views = self.ds.test
        if self.cfg.eval_views:
            views = views[: self.cfg.eval_views]
        return view_psnrs(self.renderer, self.ds, views)

    def run(self, out_dir: str | Path | None = None, callback=None) -> list[list]:
        """Train for ``cfg.steps`` steps; writes ``trainlog.csv`` and ``checkpoint.bin``."""
        out = Path(out_dir or self.cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if self.partition is not None:
            (out / "partition.json").write_text(self.partition.to_json(), encoding="utf-8")
        log_path = out / "trainlog.csv"
        ck_path = out / "checkpoint.bin"
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(TRAINLOG_HEADER)
        self.save(ck_path)
        t0 = time.perf_counter()
        running = []
        while self.step < self.cfg.steps:
            try:
                running.append(self.train_step())
            except (NumericError, FloatingPointError) as exc:
                raise NumericError(f"{exc}; last good checkpoint at {ck_path} (step {self._saved_step})") from None
            last = self.step == self.cfg.steps
            if self.step % self.cfg.eval_interval == 0 or last:
                psnrs = self.evaluate()
                row = [self.step, float(np.mean(running)), mean_psnr(psnrs), time.perf_counter() - t0]
                running = []
                self.log_rows.append(row)
                with open(log_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.6f}", f"{row[3]:.3f}"])
                log.info("step %d mse %.5f psnr %.3f dB", *row[:3])
                if callback is not None:
                    callback(row)
            ci = self.cfg.checkpoint_interval
            if (ci and self.step % ci == 0) or last:
                self.save(ck_path)
        return self.log_rows

    _saved_step = 0

    def save(self, path) -> None:
        tensors = {f"model/{k}": v for k, v in self.parameters().items()}
        tensors.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        header = {
            "config": asdict(self.cfg),
            "m_groups": self.model.m_groups,
            "step": self.step,
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
            "bounds": self.ds.bounds.to_json_dict(),
            "heightfield": hfmod.to_json_dict(self.hf),
            "partition": None if self.partition is None else self.partition.to_json_dict(),
            "image_size": [self.ds.width, self.ds.height],
        }
        ckpt.save(path, header, tensors)
        self._saved_step = self.step


@dataclass
class LoadedModel:
    config: RunConfig
    renderer: Renderer
    step: int
    header: dict
    adam: AdamState


def _restore_model(enc, bounds, partition, cfg: RunConfig, tensors, prefix: str, m_groups: int) -> MultiModel:
    dtype = np.dtype(cfg.dtype)
    models = []
    for m in range(m_groups):
        mlp = Mlp(enc.pos_dim, enc.dir_dim, cfg.n_layers, cfg.width, dtype=dtype)
        for name, arr in mlp.params.items():
            key = f"model/{prefix}/g{m}.{name}"
            if key not in tensors:
                raise ckpt.CheckpointError(f"checkpoint lacks tensor {key}")
            if tensors[key].shape != arr.shape:
                raise ckpt.CheckpointError(
                    f"tensor {key} has shape {tensors[key].shape}, config implies {arr.shape}")
            mlp.params[name] = tensors[key].astype(dtype)
        models.append(mlp)
    return MultiModel(models, enc, bounds, partition)


def load_model(path, overrides: dict | None = None) -> LoadedModel:
    header, tensors = ckpt.load(path)
    cfg = RunConfig.from_dict(header["config"])
    for key, value in (overrides or {}).items():
        if key in MODEL_FIELDS and getattr(cfg, key) != value:
            raise ckpt.CheckpointError(
                f"config field {key!r} differs from checkpoint: {value!r} vs {getattr(cfg, key)!r}")
        setattr(cfg, key, value)
    hf = hfmod.from_json_dict(header["heightfield"])
    bounds = SceneBounds.from_json_dict(header["bounds"])
    partition = None
    if header["partition"] is not None:
        partition = ScenePartition.from_json_dict(header["partition"], hf)
    m = int(header["m_groups"])
    enc = cfg.encoding()
    model = _restore_model(enc, bounds, partition, cfg, tensors, "coarse", m)
    fine = _restore_model(enc, bounds, partition, cfg, tensors, "fine", m) if cfg.coarse_fine else None
    bg = (1.0, 1.0, 1.0) if cfg.white_background else None
    renderer = Renderer(model, cfg.sampler(), hf, cfg.n_fine, fine, bg)
    ad = header["adam"]
    adam = AdamState(lr=ad["lr"], beta1=ad["beta1"], beta2=ad["beta2"], eps=ad["eps"], step=ad["step"])
    adam.m = {k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    adam.v = {k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return LoadedModel(cfg, renderer, int(header["step"]), header, adam)
