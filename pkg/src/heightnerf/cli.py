"""Command-line entry point: ``heightnerf <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
Configuration precedence is command line > ``--config`` JSON file > built-in default.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import heightfield as hfmod
from .checkpoint import CheckpointError
from .compare import compare_sampling
from .geometry import ImageBuffer, camera_rays
from .partition import PartitionConfig, build_partition
from .render import psnr
from .sampling import Label, SamplerConfig, ais_edges
from .scenegen import (AnalyticScene, DatasetSpec, SceneGenerationError, SceneSpec, cameras_from_transforms,
                       dump_json, empty_scene, generate_dataset, load_dataset, make_scene, render_oracle)
from .train import MODEL_FIELDS, NumericError, RunConfig, Trainer, load_model

log = logging.getLogger("heightnerf")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return d


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _check_keys(d: dict, cls, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {', '.join(sorted(extra))}")


def _fmt_psnr(v: float):
    return "inf" if math.isinf(v) else round(v, 6)


# ----------------------------------------------------------------------
# generate
# ----------------------------------------------------------------------


def load_generate_specs(args) -> tuple[SceneSpec, DatasetSpec]:
    d = _read_json(args.config) if args.config else {}
    extra = set(d) - {"scene", "dataset"}
    if extra:
        raise ConfigError(f"generate config: unknown sections {', '.join(sorted(extra))}")
    scene_d = dict(d.get("scene", {}))
    data_d = dict(d.get("dataset", {}))
    _check_keys(scene_d, SceneSpec, "scene")
    _check_keys(data_d, DatasetSpec, "dataset")
    if args.seed is not None:
        scene_d["seed"] = data_d["seed"] = args.seed
    if args.views is not None:
        data_d["num_views"] = args.views
    if args.image_size is not None:
        data_d["image_size"] = args.image_size
    if args.n_buildings is not None:
        scene_d["n_buildings"] = args.n_buildings
    if args.top_views is not None:
        data_d["include_top_views"] = args.top_views
    return SceneSpec.from_dict(scene_d), DatasetSpec(**data_d)


def cmd_generate(args) -> int:
    scene_spec, data_spec = load_generate_specs(args)
    scene = make_scene(scene_spec)
    summary = generate_dataset(scene, data_spec, args.out)
    print(f"wrote {summary['views']} views ({summary['train']} train, {summary['test']} test) to {summary['out_dir']}")
    return 0


# ----------------------------------------------------------------------
# partition
# ----------------------------------------------------------------------


def _load_heightfield(args) -> hfmod.HeightField:
    if args.heightfield:
        p = Path(args.heightfield)
        if not p.is_file():
            raise ConfigError(f"heightfield not found: {p}")
        return hfmod.load(p)
    if args.dataset:
        root = _require_dir(args.dataset, "dataset")
        if not (root / "heightfield.json").is_file():
            raise ConfigError(f"dataset {root} has no heightfield.json")
        return hfmod.load(root / "heightfield.json")
    raise ConfigError("give --heightfield or --dataset")


def cmd_partition(args) -> int:
    d = _read_json(args.config) if args.config else {}
    _check_keys(d, PartitionConfig, "partition config")
    if args.m_groups is not None:
        d["m_groups"] = args.m_groups
    if args.threshold is not None:
        d["threshold"] = args.threshold
    if args.seed is not None:
        d["kmeans_seed"] = args.seed
    cfg = PartitionConfig(**d)
    hf = _load_heightfield(args)
    part = build_partition(hf, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(part.to_json(), encoding="utf-8")
    part.save_png(out / "partition.png")
    used = sorted(set(np.unique(part.column_group).tolist()) - {0})
    print(f"{len(used)} object groups of {cfg.m_groups - 1}; wrote {out / 'partition.json'} and {out / 'partition.png'}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, only=None) -> None:
    """One flag per RunConfig field (``n_intervals`` -> ``--n-intervals``)."""
    for f in dataclasses.fields(RunConfig):
        if only is not None and f.name not in only:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            p.add_argument(flag, dest=f.name, type=typ, default=None)


def resolve_run_config(args, require_dataset: bool = True) -> RunConfig:
    d = _read_json(args.config) if args.config else {}
    _check_keys(d, RunConfig, "run config")
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    cfg = RunConfig.from_dict(d)
    cfg.validate()
    if require_dataset:
        if not cfg.dataset:
            raise ConfigError("no dataset given (--dataset or config 'dataset')")
        _require_dir(cfg.dataset, "dataset")
        if cfg.mm and cfg.partition and not Path(cfg.partition).is_file():
            raise ConfigError(f"partition file not found: {cfg.partition}")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    trainer = Trainer(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_json(dataclasses.asdict(cfg)), encoding="utf-8")

    def report(row):
        print(f"step {row[0]:6d}  train_mse {row[1]:.6f}  test_psnr {row[2]:.3f} dB  {row[3]:.1f} s", flush=True)

    trainer.run(out, callback=report)
    print(f"checkpoint {out / 'checkpoint.bin'}; log {out / 'trainlog.csv'}")
    return 0


# ----------------------------------------------------------------------
# render / eval
# ----------------------------------------------------------------------


RENDER_OVERRIDES = MODEL_FIELDS + ("ais", "n_intervals", "border_split", "object_split", "n_fine")


def _render_overrides(args) -> dict:
    d = _read_json(args.config) if args.config else {}
    _check_keys(d, RunConfig, "run config")
    over = {k: v for k, v in d.items() if k in RENDER_OVERRIDES}
    for k in RENDER_OVERRIDES:
        v = getattr(args, k, None)
        if v is not None:
            over[k] = v
    return over


def _load_checkpoint(args):
    p = Path(args.checkpoint)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return load_model(p, _render_overrides(args))


def _poses(args, loaded):
    """Cameras and optional ground-truth images for the requested poses."""
    if args.poses:
        d = _read_json(args.poses)
        if "frames" not in d or "camera_angle_x" not in d:
            raise ConfigError(f"{args.poses}: not a transforms file (needs camera_angle_x and frames)")
        return cameras_from_transforms(d), None, list(range(len(d["frames"])))
    ds_path = args.dataset or loaded.config.dataset
    ds = load_dataset(_require_dir(ds_path, "dataset"))
    idx = {"test": ds.test, "train": ds.train, "all": list(range(len(ds.cameras)))}[args.split]
    return [ds.cameras[i] for i in idx], ds.images[idx], idx


def cmd_render(args) -> int:
    loaded = _load_checkpoint(args)
    cams, _, idx = _poses(args, loaded)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in zip(idx, cams):
        img = loaded.renderer.render_camera(cam)
        ImageBuffer(img).save_png(out / f"{i:03d}.png")
    print(f"rendered {len(cams)} views to {out}")
    return 0


def eval_report(images: list[np.ndarray], targets: np.ndarray, idx: list[int]) -> dict:
    per = [psnr(float(np.mean((img - tgt) ** 2))) for img, tgt in zip(images, targets)]
    mean = float(np.mean(per)) if per else float("nan")
    return {"views": [{"index": i, "psnr_db": _fmt_psnr(v)} for i, v in zip(idx, per)],
            "mean_psnr_db": _fmt_psnr(mean), "n_views": len(per)}


def cmd_eval(args) -> int:
    if args.oracle:
        if not args.dataset:
            raise ConfigError("--oracle needs --dataset")
        root = _require_dir(args.dataset, "dataset")
        ds = load_dataset(root)
        scene = AnalyticScene.from_json_dict(_read_json(root / "scene.json"))
        n_dense = int(_read_json(root / "dataset_spec.json").get("n_dense", 512))
        idx = ds.test
        # quantized like the stored images
        images = [render_oracle(scene, ds.cameras[i], n_dense).to_uint8() / 255.0 for i in idx]
        targets = ds.images[idx]
    else:
        if not args.checkpoint:
            raise ConfigError("give --checkpoint (or --oracle with --dataset)")
        loaded = _load_checkpoint(args)
        cams, targets, idx = _poses(args, loaded)
        if targets is None:
            raise ConfigError("eval needs a dataset with ground-truth images")
        images = [loaded.renderer.render_camera(c) for c in cams]
    report = eval_report(images, targets, idx)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    for v in report["views"]:
        print(f"view {v['index']:3d}  {v['psnr_db']} dB")
    print(f"mean {report['mean_psnr_db']} dB")
    return 0


# ----------------------------------------------------------------------
# compare-sampling / sample-viz
# ----------------------------------------------------------------------


def cmd_compare_sampling(args) -> int:
    if args.empty:
        scene = empty_scene()
    else:
        d = _read_json(args.config) if args.config else {}
        d = d.get("scene", d)
        _check_keys(d, SceneSpec, "scene")
        if args.n_buildings is not None:
            d["n_buildings"] = args.n_buildings
        scene = make_scene(SceneSpec.from_dict(d))
    seed = 0 if args.seed is None else args.seed
    n = 64 if args.n_intervals is None else args.n_intervals
    res = compare_sampling(scene, n_rays=args.rays, n_intervals=n, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.write_csv(out)
    s = res.summary()
    print(json.dumps(s, indent=2))
    return 0


LABEL_COLORS = {Label.BACKGROUND: (40, 40, 40), Label.BORDER: (230, 60, 40), Label.OBJECT: (60, 140, 230)}


def cmd_sample_viz(args) -> int:
    """AIS intervals for the pixels of one image row: CSV table, optional PNG."""
    ds = load_dataset(_require_dir(args.dataset, "dataset"))
    if not 0 <= args.view < len(ds.cameras):
        raise ConfigError(f"view {args.view} out of range (0..{len(ds.cameras) - 1})")
    cam = ds.cameras[args.view]
    row = cam.height // 2 if args.row is None else args.row
    if not 0 <= row < cam.height:
        raise ConfigError(f"row {row} out of range")
    o, d = camera_rays(cam)
    sl = slice(row * cam.width, (row + 1) * cam.width)
    n = 64 if args.n_intervals is None else args.n_intervals
    edges, labels, _ = ais_edges(o[sl], d[sl], cam.near, cam.far, ds.heightfield, SamplerConfig(n_intervals=n))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ray_id", "i", "t0", "t1", "label"])
        for x in range(cam.width):
            for i in range(n):
                w.writerow([x, i, repr(float(edges[x, i])), repr(float(edges[x, i + 1])),
                            Label(int(labels[x, i])).name.lower()])
    if args.png:
        depth = args.depth_pixels
        img = np.zeros((depth, cam.width, 3), dtype=np.uint8)
        frac = (edges - cam.near) / (cam.far - cam.near)
        for x in range(cam.width):
            for i in range(n):
                y0 = min(int(frac[x, i] * depth), depth - 1)
                y1 = max(int(frac[x, i + 1] * depth), y0 + 1)
                img[y0:y1, x] = LABEL_COLORS[Label(int(labels[x, i]))]
                img[y0, x] = (255, 255, 255)  # interval start tick
        ImageBuffer(img / 255.0).save_png(args.png)
    print(f"wrote {cam.width * n} intervals ({cam.width} rays, view {args.view}, row {row}) to {out}")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heightnerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic city dataset")
    g.add_argument("--config", help="JSON with optional 'scene' and 'dataset' sections")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--n-buildings", type=int)
    g.add_argument("--top-views", action=argparse.BooleanOptionalAction, default=None)
    g.set_defaults(func=cmd_generate)

    pa = sub.add_parser("partition", help="build the height-based scene partition")
    pa.add_argument("--config", help="JSON with PartitionConfig keys")
    pa.add_argument("--dataset")
    pa.add_argument("--heightfield")
    pa.add_argument("--out", required=True)
    pa.add_argument("--m-groups", type=int)
    pa.add_argument("--threshold", type=float)
    pa.add_argument("--seed", type=int, help="k-means seed")
    pa.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="RunConfig JSON")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("render", cmd_render, "render poses with a trained model"),
                            ("eval", cmd_eval, "PSNR of a trained model on held-out views")):
        r = sub.add_parser(name, help=hlp)
        r.add_argument("--checkpoint")
        r.add_argument("--config", help="RunConfig JSON; model fields must match the checkpoint")
        r.add_argument("--dataset")
        r.add_argument("--split", choices=("test", "train", "all"), default="test")
        r.add_argument("--poses", help="transforms JSON with the poses to render")
        _add_run_flags(r, only=RENDER_OVERRIDES)
        if name == "render":
            r.add_argument("--out", required=True)
        else:
            r.add_argument("--out", help="write the JSON report here")
            r.add_argument("--oracle", action="store_true",
                           help="score the analytic scene renderer instead of a checkpoint")
        r.set_defaults(func=func)

    c = sub.add_parser("compare-sampling", help="quadrature error of uniform vs AIS intervals")
    c.add_argument("--config", help="SceneSpec JSON (or a generate config)")
    c.add_argument("--out", required=True, help="CSV path")
    c.add_argument("--seed", type=int)
    c.add_argument("--rays", type=int, default=1000)
    c.add_argument("--n-intervals", type=int)
    c.add_argument("--n-buildings", type=int)
    c.add_argument("--empty", action="store_true", help="use a scene with no objects")
    c.set_defaults(func=cmd_compare_sampling)

    v = sub.add_parser("sample-viz", help="AIS interval table for one image row")
    v.add_argument("--dataset", required=True)
    v.add_argument("--view", type=int, default=0)
    v.add_argument("--row", type=int)
    v.add_argument("--n-intervals", type=int)
    v.add_argument("--out", required=True, help="CSV path")
    v.add_argument("--png", help="also draw the intervals (x = pixel, y = depth)")
    v.add_argument("--depth-pixels", type=int, default=256)
    v.set_defaults(func=cmd_sample_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"heightnerf: numeric error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, KeyError, TypeError) as exc:
        print(f"heightnerf: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, SceneGenerationError, RuntimeError) as exc:
        print(f"heightnerf: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
