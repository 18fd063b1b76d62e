import csv

import numpy as np
import pytest

from heightnerf import train as tr
from heightnerf.checkpoint import CheckpointError
from heightnerf.scenegen import load_dataset


def tiny_cfg(ds, **kw):
    base = dict(dataset=str(ds), n_layers=2, width=16, l_pos=4, l_dir=2, n_intervals=16, n_fine=8,
                rays_per_batch=32, steps=20, eval_interval=10, eval_views=1)
    base.update(kw)
    return tr.RunConfig(**base)


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_from_dict_rejects_unknown():
    with pytest.raises(ValueError, match="bogus"):
        tr.RunConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("kw", [{"n_intervals": 1}, {"m_groups": 1}, {"steps": -1}, {"dtype": "float16"},
                                {"lr_decay": 0.0}])
def test_validate(kw):
    with pytest.raises(ValueError):
        tr.RunConfig(**kw).validate()


def test_lr_schedule(tiny_dataset):
    t = tr.Trainer(tiny_cfg(tiny_dataset, steps=100, lr=1e-3, lr_decay=0.1))
    assert t.lr_at(0) == pytest.approx(1e-3)
    assert t.lr_at(100) == pytest.approx(1e-4)
    assert t.lr_at(50) == pytest.approx(1e-3 * 0.1 ** 0.5)


def test_zero_steps_writes_checkpoint_and_header(tiny_dataset, tmp_path):
    t = tr.Trainer(tiny_cfg(tiny_dataset, steps=0))
    t.run(tmp_path)
    header, body = read_log(tmp_path / "trainlog.csv")
    assert header == tr.TRAINLOG_HEADER and body == []
    lm = tr.load_model(tmp_path / "checkpoint.bin")
    assert lm.step == 0


def test_seeded_runs_identical(tiny_dataset, tmp_path):
    a = tr.Trainer(tiny_cfg(tiny_dataset, seed=5)).run(tmp_path / "a")
    b = tr.Trainer(tiny_cfg(tiny_dataset, seed=5)).run(tmp_path / "b")
    assert [r[:3] for r in a] == [r[:3] for r in b]
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_log_steps_increase_and_final_row(tiny_dataset, tmp_path):
    tr.Trainer(tiny_cfg(tiny_dataset, steps=25, eval_interval=10)).run(tmp_path)
    _, body = read_log(tmp_path / "trainlog.csv")
    steps = [int(r[0]) for r in body]
    assert steps == [10, 20, 25]
    assert all(float(r[1]) >= 0 for r in body)


def test_mm_ais_run_writes_partition(tiny_dataset, tmp_path):
    cfg = tiny_cfg(tiny_dataset, mm=True, ais=True, m_groups=3, steps=4, eval_interval=4)
    t = tr.Trainer(cfg)
    t.run(tmp_path)
    assert (tmp_path / "partition.json").exists()
    assert t.model.m_groups == 3
    lm = tr.load_model(tmp_path / "checkpoint.bin")
    ds = load_dataset(tiny_dataset)
    cam = ds.cameras[ds.test[0]]
    np.testing.assert_array_equal(lm.renderer.render_camera(cam), t.renderer.render_camera(cam))


def test_load_model_renders_like_trainer(tiny_dataset, tmp_path):
    t = tr.Trainer(tiny_cfg(tiny_dataset, steps=5))
    t.run(tmp_path)
    lm = tr.load_model(tmp_path / "checkpoint.bin")
    assert lm.step == 5
    cam = t.ds.cameras[t.ds.test[0]]
    np.testing.assert_array_equal(lm.renderer.render_camera(cam), t.renderer.render_camera(cam))
    for k, v in t.adam.m.items():
        np.testing.assert_array_equal(lm.adam.m[k], v)


def test_mismatch_names_field(tiny_dataset, tmp_path):
    tr.Trainer(tiny_cfg(tiny_dataset, steps=0)).run(tmp_path)
    with pytest.raises(CheckpointError, match="'width'"):
        tr.load_model(tmp_path / "checkpoint.bin", {"width": 32})
    # sampling fields are free to change at render time
    lm = tr.load_model(tmp_path / "checkpoint.bin", {"n_intervals": 8, "ais": True})
    assert lm.renderer.sampler.n_intervals == 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_reports_last_checkpoint(tiny_dataset, tmp_path, monkeypatch):
    t = tr.Trainer(tiny_cfg(tiny_dataset, steps=10, checkpoint_interval=2))
    real = tr.mse_grad
    calls = {"n": 0}

    def poisoned(r, g):
        calls["n"] += 1
        out = real(r, g)
        if calls["n"] == 4:
            out[0, 0] = np.inf
        return out

    monkeypatch.setattr(tr, "mse_grad", poisoned)
    with pytest.raises(tr.NumericError, match=r"checkpoint.*step 2"):
        t.run(tmp_path)
    assert tr.load_model(tmp_path / "checkpoint.bin").step == 2


def test_reuse_gradients_equal_direct(tiny_dataset):
    cfg = tiny_cfg(tiny_dataset, dtype="float64", ais=True)
    t = tr.Trainer(cfg)
    o, d, near, far, target = t.rays
    sel = slice(0, 24)
    r = t.renderer
    out = r.render_rays(o[sel], d[sel], near[sel], far[sel], rng=np.random.default_rng(3), keep=True)
    res, parts = out["main"]
    assert len(parts) == 2
    dcol = tr.mse_grad(res[0], target[sel])
    g_reuse = tr.backprop_render({"coarse": t.model}, res, parts, dcol)

    rgb, sig, ctx = r._eval(t.model, o[sel], d[sel], out["ts"], True)
    res2 = r._composite(out["ts"], far[sel], sig, rgb)
    np.testing.assert_allclose(res2[0], res[0], rtol=1e-12, atol=1e-12)
    g_direct = tr.backprop_render({"coarse": t.model}, res2, [("coarse", ctx, None)], dcol)
    assert g_reuse.keys() == g_direct.keys()
    for k in g_direct:
        np.testing.assert_allclose(g_reuse[k], g_direct[k], rtol=1e-9, atol=1e-12)


def test_coarse_fine_mode(tiny_dataset, tmp_path):
    t = tr.Trainer(tiny_cfg(tiny_dataset, coarse_fine=True, steps=3, eval_interval=3))
    t.run(tmp_path)
    assert any(k.startswith("fine/") for k in t.parameters())
    lm = tr.load_model(tmp_path / "checkpoint.bin")
    assert lm.renderer.fine_model is not None
    cam = t.ds.cameras[0]
    np.testing.assert_array_equal(lm.renderer.render_camera(cam), t.renderer.render_camera(cam))


def test_white_background_renders(tiny_dataset):
    t = tr.Trainer(tiny_cfg(tiny_dataset, white_background=True))
    assert np.isfinite(t.train_step())


def test_single_step_lowers_loss(tiny_dataset):
    cfg = tiny_cfg(tiny_dataset, dtype="float64", lr=1e-4, rays_per_batch=1, n_fine=0)
    t = tr.Trainer(cfg)
    o, d, near, far, target = t.rays
    i = slice(7, 8)

    def loss():
        c = t.renderer.render_rays(o[i], d[i], near[i], far[i])["color"]
        return float(np.mean((c - target[i]) ** 2))

    before = loss()
    out = t.renderer.render_rays(o[i], d[i], near[i], far[i], keep=True)
    res, parts = out["main"]
    g = tr.backprop_render({"coarse": t.model}, res, parts, tr.mse_grad(res[0], target[i]))
    t.adam.lr = 1e-4
    tr.adam_step(t.parameters(), g, t.adam)
    assert loss() < before
