import colorsys
import json

import numpy as np
import pytest

from gaborsplat import cli, dataio
from gaborsplat.dataio import read_log
from gaborsplat.rasterizer import render_forward
from gaborsplat.scene import ParamLayout, Scene, logit
from gaborsplat.synth import hemisphere_cameras


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(line):
    return dict(item.split("=", 1) for item in line.split())


@pytest.fixture(scope="module")
def stripes(tmp_path_factory):
    d = tmp_path_factory.mktemp("stripes")
    assert cli.main(["synth", "--preset", "stripes", "--views", "8", "--res", "48x48", "--freq", "8", "--out", str(d), "--seed", "0"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(stripes, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data", str(stripes), "--format", "transforms", "--out", str(out), "--seed", "0",
                     "--iters", "500", "--eval-every", "100"])
    assert code == 0
    return out


def test_help_documents_every_flag():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"train", "render", "eval", "synth", "gradcheck"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_every_config_field_has_a_flag():
    from dataclasses import fields

    from gaborsplat.losses import LossWeights
    from gaborsplat.optimizer import TrainConfig

    train = cli.build_parser()._subparsers._group_actions[0].choices["train"]
    dests = {a.dest for a in train._actions}
    for f in fields(TrainConfig):
        if f.name != "loss":
            assert f.name in dests, f.name
    for f in fields(LossWeights):
        assert f.name in dests, f.name


def test_train_densify_rejected(capsys, stripes, tmp_path):
    code, _, err = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path, "--seed", 0, "--densify")
    assert code == 1 and "densification unsupported" in err


def test_train_densify_in_config_file_rejected(capsys, stripes, tmp_path):
    (tmp_path / "c.cfg").write_text("# settings\ndensify = true\n")
    code, _, err = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path, "--seed", 0,
                       "--config", tmp_path / "c.cfg")
    assert code == 1 and "densification unsupported" in err


def test_train_missing_data(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--format", "transforms", "--out", tmp_path / "o", "--seed", 0)
    assert code == 1 and "error" in err


def test_train_requires_seed(capsys, stripes, tmp_path):
    code, _, _ = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path)
    assert code == 1


def test_train_bad_config_value(capsys, stripes, tmp_path):
    (tmp_path / "c.cfg").write_text("lr_color = fast\n")
    code, _, err = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path, "--seed", 0,
                       "--config", tmp_path / "c.cfg")
    assert code == 1 and "c.cfg:1" in err


def test_train_divergence_exit_code(capsys, stripes, tmp_path, monkeypatch):
    from gaborsplat import optimizer

    real = optimizer.loss_and_grads

    def poisoned(out, target, camera, weights, iteration):
        terms, grads = real(out, target, camera, weights, iteration)
        if iteration == 3:
            terms.total = float("nan")
        return terms, grads

    monkeypatch.setattr(optimizer, "loss_and_grads", poisoned)
    code, _, err = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path / "o", "--seed", 0,
                       "--iters", 10)
    assert code == 2 and "iteration 3" in err


def test_train_writes_500_log_lines(trained):
    rows = read_log(trained / "metrics.log")
    assert len(rows) == 500 and [r["iter"] for r in rows] == list(range(500))
    assert all("total_loss" in r for r in rows)
    assert sum("psnr" in r for r in rows) == 5
    assert (trained / "final.gspl").exists()
    lines = (trained / "test_metrics.tsv").read_text().splitlines()
    assert lines[0] == "view\tpsnr\tssim" and lines[-1].startswith("mean\t")


def test_render_matches_training_log(capsys, stripes, trained, tmp_path):
    logged = read_log(trained / "metrics.log")[-1]["psnr"]
    # 8 views: the held-out set is view 7 alone, so the log holds its PSNR
    code, out, _ = run(capsys, "render", "--ckpt", trained / "final.gspl", "--camera", 7, "--data", stripes, "--out", tmp_path / "t.png")
    assert code == 0
    assert abs(float(kv(out)["psnr"]) - logged) <= 0.01
    # a training view agrees with what eval reports for it
    code, out, _ = run(capsys, "render", "--ckpt", trained / "final.gspl", "--camera", 0, "--data", stripes, "--out", tmp_path / "r.png")
    assert code == 0 and (tmp_path / "r.png").exists()
    rendered = float(kv(out)["psnr"])
    code, out, _ = run(capsys, "eval", "--ckpt", trained / "final.gspl", "--data", stripes, "--split", "train")
    row = next(line.split("\t") for line in out.splitlines() if line.startswith("images/view_000"))
    assert code == 0 and rendered >= float(row[1]) - 0.01


def test_render_pose_file(capsys, trained, tmp_path):
    cam = hemisphere_cameras(3, 40, 30, 5)[1]
    c2w = np.eye(4)
    c2w[:3, :3] = cam.rotation.T
    c2w[:3, 3] = cam.center
    pose = {"fl_x": cam.fx, "w": 40, "h": 30, "transform_matrix": (c2w @ dataio.GL_TO_CV).tolist()}
    (tmp_path / "pose.json").write_text(json.dumps(pose))
    code, _, _ = run(capsys, "render", "--ckpt", trained / "final.gspl", "--camera", tmp_path / "pose.json", "--out", tmp_path / "p.png")
    assert code == 0
    img = dataio.load_image(tmp_path / "p.png")
    expect = render_forward(dataio.load_checkpoint(trained / "final.gspl"), cam).color
    assert np.abs(img - np.clip(expect, 0, 1)).max() <= 0.5 / 255 + 1e-9


def test_render_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "render", "--ckpt", tmp_path / "none.gspl", "--camera", tmp_path / "pose.json", "--out", tmp_path / "x.png")
    assert code == 1 and "missing file" in err


def test_render_bad_camera(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "render", "--ckpt", trained / "final.gspl", "--camera", 3, "--out", tmp_path / "x.png")
    assert code == 1


def _three_splats(path):
    scene = Scene(np.zeros((3, ParamLayout(4).width)), 4)
    for k, x in enumerate((-0.6, 0.0, 0.6)):
        scene.params[k, scene.layout["q"]] = [x, 0.0, 0.0]
        scene.params[k, scene.layout["quat"]] = [1, 0, 0, 0]
        scene.params[k, scene.layout["scale"]] = np.log(0.08)
        scene.params[k, scene.layout["alpha"]] = 2.0
        scene.params[k, scene.layout["color_a"]] = logit(0.5)
        scene.params[k, scene.layout["color_b"]] = logit(0.5)
        scene.params[k, scene.layout["w"]] = [1, 0.3, 0.2, 0.1]
        scene.params[k, scene.layout["f"]] = [0, 3, 2, 1]
    dataio.save_checkpoint(scene, path)


def test_show_splats_has_at_most_three_hues(capsys, tmp_path):
    _three_splats(tmp_path / "s.gspl")
    pose = {"fl_x": 60, "w": 64, "h": 64, "transform_matrix": [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 2.5], [0, 0, 0, 1]]}
    (tmp_path / "pose.json").write_text(json.dumps(pose))
    code, out, _ = run(capsys, "render", "--ckpt", tmp_path / "s.gspl", "--camera", tmp_path / "pose.json",
                       "--out", tmp_path / "v.png", "--show-splats", "--seed", 3)
    assert code == 0 and "splats=" in out
    img = dataio.load_image(tmp_path / "v_splats.png")
    bright = img.reshape(-1, 3)[img.reshape(-1, 3).max(axis=1) > 0.1]
    assert len(bright) > 30
    hues = np.array(sorted(colorsys.rgb_to_hsv(*p)[0] for p in bright))
    clusters = 1 + int(np.sum(np.diff(hues) > 0.03))
    assert clusters <= 3
    # background stays black
    assert np.all(img[0, 0] == 0)


def test_eval_self_comparison(capsys, trained, tmp_path):
    scene = dataio.load_checkpoint(trained / "final.gspl")
    data = tmp_path / "self"
    cli.main(["synth", "--preset", "stripes", "--views", "16", "--res", "24x24", "--out", str(data), "--seed", "2"])
    ds = dataio.load_transforms(data / "transforms.json")
    for v in ds.views:
        dataio.save_image(v.path, render_forward(scene, ds.cameras[v.camera_index]).color)
    capsys.readouterr()
    code, out, _ = run(capsys, "eval", "--ckpt", trained / "final.gspl", "--data", data, "--split", "test")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "view\tpsnr\tssim"
    rows = [line.split("\t") for line in lines[1:] if not line.startswith("#")]
    assert len(rows) == 3 and rows[-1][0] == "mean"
    assert [r[0] for r in rows[:2]] == ["images/view_007.png", "images/view_015.png"]
    for r in rows:
        assert r[1] == "inf" and float(r[2]) == pytest.approx(1.0, abs=1e-12)
    assert lines[-1] == "# LPIPS: not supported"


def test_eval_mismatched_image_size(capsys, trained, tmp_path):
    data = tmp_path / "bad"
    cli.main(["synth", "--preset", "stripes", "--views", "8", "--res", "24x24", "--out", str(data), "--seed", "2"])
    dataio.save_image(data / "images" / "view_003.png", np.zeros((20, 24, 3)))
    doc = json.loads((data / "transforms.json").read_text())
    doc["frames"][3]["w"] = 24  # explicit size kept, image disagrees
    (data / "transforms.json").write_text(json.dumps(doc))
    code, _, err = run(capsys, "eval", "--ckpt", trained / "final.gspl", "--data", data)
    assert code == 1 and "view_003" in err


def test_eval_empty_split(capsys, trained, tmp_path):
    data = tmp_path / "few"
    cli.main(["synth", "--preset", "stripes", "--views", "4", "--res", "16x16", "--out", str(data), "--seed", "2"])
    code, _, err = run(capsys, "eval", "--ckpt", trained / "final.gspl", "--data", data)
    assert code == 1 and "empty" in err


def test_synth_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--preset", "stripes", "--views", 8, "--res", "128x128", "--freq", 8, "--out", tmp_path, "--seed", 1)
    assert code == 0 and "views=8" in out
    assert len(list((tmp_path / "images").glob("*.png"))) == 8
    assert (tmp_path / "transforms.json").exists() and (tmp_path / "points3D.txt").exists()


def test_synth_invalid(capsys, tmp_path):
    assert run(capsys, "synth", "--preset", "plaid", "--out", tmp_path, "--seed", 1)[0] == 1
    assert run(capsys, "synth", "--preset", "stripes", "--views", 1, "--out", tmp_path, "--seed", 1)[0] == 1
    assert run(capsys, "synth", "--preset", "stripes", "--out", tmp_path)[0] == 1


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert out.splitlines()[-1].endswith("status=pass")
    groups = {kv(line)["group"] for line in out.splitlines() if line.startswith("group=")}
    assert groups == {"q", "quat", "scale", "alpha", "color_a", "color_b", "w", "f", "phi"}


def test_gradcheck_corrupted_group_fails(capsys):
    code, out, err = run(capsys, "gradcheck", "--corrupt", "scale")
    assert code == 2 and "scale" in err
    assert "status=fail" in out


def test_gradcheck_invalid_config(capsys):
    assert run(capsys, "gradcheck", "--primitives", 0)[0] == 1
    assert run(capsys, "gradcheck", "--primitives", 33)[0] == 1
    assert run(capsys, "gradcheck", "--res", "65x10")[0] == 1
    assert run(capsys, "gradcheck", "--corrupt", "nothing")[0] == 1


def test_threads_flag_bounds(capsys, stripes, tmp_path):
    code, _, err = run(capsys, "train", "--data", stripes, "--format", "transforms", "--out", tmp_path, "--seed", 0,
                       "--threads", 100000, "--iters", 1)
    assert code == 1 and "threads" in err
