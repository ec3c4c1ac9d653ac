import json

import numpy as np
import pytest

from gaborsplat import dataio, synth


def test_stripes_scene_files(tmp_path):
    synth.write_synthetic(tmp_path, "stripes", n_views=8, width=128, height=128, freq=8.0, seed=0)
    pngs = sorted((tmp_path / "images").glob("*.png"))
    assert len(pngs) == 8
    doc = json.loads((tmp_path / "transforms.json").read_text())
    assert len(doc["frames"]) == 8
    ds = dataio.load_transforms(tmp_path / "transforms.json")
    assert len(ds.views) == 8 and len(ds.sfm_points) == 64
    assert ds.views[0].image.shape == (128, 128, 3)


def test_cameras_round_trip_through_json(tmp_path):
    synth.write_synthetic(tmp_path, "checker", n_views=4, width=32, height=24, freq=2.0, seed=3)
    ds = dataio.load_transforms(tmp_path / "transforms.json", load_images=False)
    for orig, loaded in zip(synth.hemisphere_cameras(4, 32, 24, 3), ds.cameras):
        assert np.allclose(orig.rotation, loaded.rotation, atol=1e-12)
        assert np.allclose(orig.center, loaded.center, atol=1e-12)


def test_cameras_see_the_plane():
    for cam in synth.hemisphere_cameras(6, 32, 32, 1):
        proj, z = cam.project(np.zeros(3))
        assert z > 0 and np.all(np.abs(proj - 16) < 1)
        assert cam.center[2] > 0


def test_texture_formulas():
    x = np.linspace(-0.5, 0.5, 7)
    assert np.allclose(synth.texture("stripes", x, 0 * x, 8.0), 0.5 + 0.5 * np.cos(2 * np.pi * 8 * x))
    assert set(np.unique(synth.texture("checker", x, x[::-1], 4.0))) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        synth.texture("plaid", 0.0, 0.0, 1.0)


@pytest.mark.parametrize("preset", synth.PRESETS)
def test_zero_frequency_is_constant(tmp_path, preset):
    synth.write_synthetic(tmp_path, preset, n_views=2, width=48, height=48, freq=0.0, seed=0)
    img = dataio.load_image(tmp_path / "images" / "view_000.png")
    # achromatic, and one constant value wherever the plane fully covers a pixel
    assert np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 1], img[..., 2])
    covered = img[..., 0][img[..., 0] > 0.99]
    assert covered.size > 100 and np.all(covered == 1.0)
    pts = np.loadtxt(tmp_path / "points3D.txt", comments="#")
    assert np.all(pts[:, 4:7] == 255)


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        synth.write_synthetic(d, "rings", n_views=3, width=24, height=24, freq=3.0, seed=11)
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_invalid_arguments(tmp_path):
    with pytest.raises(ValueError):
        synth.write_synthetic(tmp_path, "plaid")
    with pytest.raises(ValueError):
        synth.write_synthetic(tmp_path, "stripes", n_views=1)
    with pytest.raises(ValueError):
        synth.write_synthetic(tmp_path, "stripes", freq=-1.0)
