import json
from dataclasses import asdict

import numpy as np
import pytest

from splat4d import cli
from splat4d.camera import write_cameras
from splat4d.metrics import PSNR_CAP
from splat4d.oracle import gen_scene, load_dataset, render_dataset
from splat4d.rasterizer import load_png, render, save_png
from splat4d.scene import read_ply
from splat4d.trainer import Trainer, load_checkpoint, save_checkpoint

from conftest import tiny_config, tiny_spec


@pytest.fixture
def files(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(asdict(tiny_spec())))
    cfg = tmp_path / "cfg.json"
    tiny_config().save(cfg)
    return spec, cfg


def synth(tmp_path, files, name="data", *extra):
    out = tmp_path / name
    assert cli.main(["synth", str(out), "--spec", str(files[0]), "--config", str(files[1]), *extra]) == 0
    return out


def test_synth_manifest_and_force(tmp_path, files):
    out = synth(tmp_path, files)
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["plan"]["scale"] == 0.002
    assert man["consistent"] is True
    assert cli.main(["synth", str(out), "--spec", str(files[0])]) == cli.EXIT_USAGE
    assert cli.main(["synth", str(out), "--spec", str(files[0]), "--force", "--jitter", "0.03"]) == 0
    assert json.loads((out / "manifest.json").read_text())["consistent"] is False


def test_synth_seed_changes_frames(tmp_path, files):
    a = load_dataset(synth(tmp_path, files, "a"))
    b = load_dataset(synth(tmp_path, files, "b", "--seed", "3"))
    assert not np.array_equal(a.freeze_frames, b.freeze_frames)
    again = render_dataset(gen_scene(tiny_spec(), 0))
    np.testing.assert_allclose(a.freeze_frames, again.freeze_frames, atol=0.5 / 255 + 1e-12)


def test_usage_errors(tmp_path, files, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fit-canonical", str(tmp_path / "nope"), str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert cli.main(["synth", str(tmp_path / "x"), "--spec", str(files[0]), "--config", str(tmp_path / "n.json")]) \
        == cli.EXIT_USAGE
    data = synth(tmp_path, files)
    assert cli.main(["fit-canonical", str(data), str(tmp_path / "o2"), "--denoiser", "remote"]) == cli.EXIT_USAGE
    assert not (tmp_path / "o").exists() and not (tmp_path / "o2").exists()
    assert "error" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, files, monkeypatch):
    data = synth(tmp_path, files)

    def boom(self):
        raise FloatingPointError("non-finite loss at iteration 0")
    monkeypatch.setattr(Trainer, "step", boom)
    assert cli.main(["fit-canonical", str(data), str(tmp_path / "run"), "--config", str(files[1])]) == \
        cli.EXIT_NUMERIC


def test_full_pipeline(tmp_path, files):
    data = synth(tmp_path, files)
    canon, motion = tmp_path / "canon", tmp_path / "motion"
    assert cli.main(["fit-canonical", str(data), str(canon), "--config", str(files[1])]) == 0
    state, meta = load_checkpoint(canon / cli.CHECKPOINT)
    assert state.iteration == 40 and state.temporal is None
    assert json.loads((canon / "manifest.json").read_text())["config"] == meta["config"]
    summary = json.loads((canon / "summary.json").read_text())
    assert len(summary["heldout_psnr"]) == 1

    assert cli.main(["fit-motion", str(data), str(canon), str(motion)]) == 0
    mstate, _ = load_checkpoint(motion / cli.CHECKPOINT)
    assert mstate.iteration == 80 and mstate.temporal is not None
    assert len(json.loads((motion / "summary.json").read_text())["reference_psnr"]) == 4

    # t = 0 export is the canonical cloud (to PLY precision) and renders like it
    ply = tmp_path / "t0.ply"
    assert cli.main(["export-ply", str(motion), "--time", "0", str(ply)]) == 0
    back = read_ply(ply)
    np.testing.assert_allclose(back.positions, mstate.cloud.positions, rtol=1e-6, atol=1e-7)
    ds = load_dataset(data)
    pose = ds.reference_pose
    np.testing.assert_allclose(render(back, pose, ds.background).pixels,
                               render(mstate.cloud, pose, ds.background).pixels, atol=1e-6)

    # rendering at the reference camera, then evaluating against the reference video
    cams = tmp_path / "cams.txt"
    write_cameras([pose], cams, [0])
    times = ",".join(str(t) for t in ds.reference_times)
    rdir = tmp_path / "renders"
    assert cli.main(["render", str(motion), "--cameras", str(cams), "--times", times, str(rdir)]) == 0
    tdir = tmp_path / "targets"
    tdir.mkdir()
    for i, img in enumerate(ds.reference_frames):
        save_png(tdir / f"c000_t{i:03d}.png", img)
    report = tmp_path / "report.json"
    assert cli.main(["eval", str(rdir), str(tdir), "--out", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["count"] == 4 and rep["mean_psnr"] > 15


def test_resume_continues_at_saved_iteration(tmp_path, files):
    data = synth(tmp_path, files)
    full = tmp_path / "full"
    assert cli.main(["fit-canonical", str(data), str(full), "--config", str(files[1])]) == 0
    part = tmp_path / "part"
    part.mkdir()
    from splat4d.oracle import sfm_points
    from splat4d.trainer import init_cloud, named_rng
    ds = load_dataset(data)
    cfg = tiny_config()
    scene = gen_scene(tiny_spec(), 0)
    pts, cols = sfm_points(scene, ds, named_rng(cfg.seed, "sfm"), noise=cfg.init.sfm_noise)
    tr = Trainer(ds, cfg, init_cloud(pts, cols, cfg.init.opacity), gt_scene=scene)
    tr.run(25, part / cli.METRICS, part / cli.CHECKPOINT)
    assert cli.main(["fit-canonical", str(data), str(part), "--resume"]) == 0
    lines = (part / cli.METRICS).read_text().splitlines()
    assert [json.loads(x)["iter"] for x in lines] == list(range(40))
    assert lines == (full / cli.METRICS).read_text().splitlines()


def test_runs_are_reproducible(tmp_path, files):
    data = synth(tmp_path, files)
    outs = []
    for name in ("r1", "r2"):
        assert cli.main(["fit-canonical", str(data), str(tmp_path / name), "--config", str(files[1]),
                         "--no-small-motion"]) == 0
        outs.append((tmp_path / name / cli.METRICS).read_bytes())
    assert outs[0] == outs[1]
    assert json.loads(outs[0].splitlines()[0])["iter"] == 0


def test_ground_truth_checkpoint_reproduces_dataset(tmp_path, files):
    data = synth(tmp_path, files)
    ds = load_dataset(data)
    scene = gen_scene(tiny_spec(), 0)
    tr = Trainer(ds, tiny_config(**{"ablation.perframe_deformation": False}), scene.cloud)
    save_checkpoint(tr, tmp_path / "gt.npz")
    rdir = tmp_path / "r"
    assert cli.main(["render", str(tmp_path / "gt.npz"), "--cameras", str(data / "freeze_cameras.txt"),
                     str(rdir)]) == 0
    for idx, frame in zip(ds.freeze_indices, ds.freeze_frames):
        np.testing.assert_allclose(load_png(rdir / f"c{idx:03d}_t000.png"), frame, atol=0.5 / 255 + 1e-12)


def test_eval_identical(tmp_path, capsys):
    d = tmp_path / "imgs"
    d.mkdir()
    save_png(d / "a.png", np.random.default_rng(0).random((16, 16, 3)))
    assert cli.main(["eval", str(d), str(d)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["images"][0]["psnr"] == PSNR_CAP and rep["images"][0]["ssim"] == pytest.approx(1.0)


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "splat4d", "eval", str(tmp_path), str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == cli.EXIT_USAGE and "no PNG" in res.stderr
