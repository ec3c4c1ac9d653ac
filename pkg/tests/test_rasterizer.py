import json
import os
import subprocess
import sys

import numpy as np
import pytest
from conftest import front_camera, random_scene

from gaborsplat.geometry import Camera
from gaborsplat.gradcheck import check_camera
from gaborsplat.gradcheck import random_scene as conditioned_scene
from gaborsplat.rasterizer import (
    NonFiniteGradientError,
    cull_and_bin,
    reference_render,
    render_backward,
    render_forward,
    sort_front_to_back,
)
from gaborsplat.scene import ParamLayout, Scene, logit

BUFFERS = ("color", "accum_alpha", "expected_depth", "normal_map", "distortion")


def axis_camera(size=64, f=60.0):
    # pixel (size/2 - 1) has its center on the optical axis
    c = size / 2 - 0.5
    return Camera(size, size, f, f, c, c, np.eye(3), np.zeros(3))


def facing_splat(scene, k, z, alpha_raw, color, scale=0.3, xy=(0.0, 0.0)):
    scene.params[k, scene.layout["q"]] = [xy[0], xy[1], z]
    scene.params[k, scene.layout["quat"]] = [1, 0, 0, 0]
    scene.params[k, scene.layout["scale"]] = np.log(scale)
    scene.params[k, scene.layout["alpha"]] = alpha_raw
    scene.params[k, scene.layout["color_a"]] = logit(np.asarray(color, float))
    scene.params[k, scene.layout["color_b"]] = logit(np.asarray(color, float))


def blank(n_prims, n_waves=4, mode="gabor"):
    scene = Scene(np.zeros((n_prims, ParamLayout(n_waves).width)), n_waves, mode)
    scene.params[:, scene.layout["w"].start] = 1.0
    return scene


def test_empty_scene():
    cam = front_camera()
    scene = Scene.empty()
    assert all(len(t) == 0 for t in cull_and_bin(scene, cam))
    out = render_forward(scene, cam)
    ref = reference_render(scene, cam)
    for out_ in (out, ref):
        assert np.all(out_.color == 0) and np.all(out_.accum_alpha == 0)


def test_small_splat_lands_in_one_tile():
    cam = axis_camera(64)
    scene = blank(1)
    facing_splat(scene, 0, 5.0, 0.0, [0.5] * 3, scale=0.01, xy=(-1.0, -1.0))
    lists = cull_and_bin(scene, cam)
    assert sum(len(t) > 0 for t in lists) == 1


def test_splat_behind_camera_is_culled():
    cam = axis_camera(64)
    scene = blank(1)
    facing_splat(scene, 0, -2.0, 0.0, [0.5] * 3)
    assert all(len(t) == 0 for t in cull_and_bin(scene, cam))
    assert np.all(render_forward(scene, cam).color == 0)


def test_sort_front_to_back():
    assert list(sort_front_to_back([0, 1, 2], [3.0, 1.0, 2.0])) == [1, 2, 0]
    assert list(sort_front_to_back([2, 0, 1], [1.0, 1.0, 1.0])) == [0, 1, 2]
    assert list(sort_front_to_back([4], np.arange(5.0))) == [4]


def test_opaque_single_splat_center_pixel():
    cam = axis_camera(64)
    scene = blank(1)
    facing_splat(scene, 0, 2.0, 40.0, [0.2, 0.4, 0.6])
    scene.params[0, scene.layout["w"]] = [1.0, 0.5, 0.0, 0.0]
    out = render_forward(scene, cam)
    c = 31
    assert np.allclose(out.color[c, c], 1.5 * np.array([0.2, 0.4, 0.6]), atol=1e-12)
    assert out.accum_alpha[c, c] == pytest.approx(1.0, abs=1e-12)
    assert out.expected_depth[c, c] == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(out.normal_map[c, c], [0, 0, -1], atol=1e-12)


def test_two_splat_compositing():
    cam = axis_camera(64)
    scene = blank(2)
    facing_splat(scene, 0, 2.0, 0.0, [0.9, 0.1, 0.2])  # alpha 0.5 in front
    facing_splat(scene, 1, 3.0, 40.0, [0.1, 0.8, 0.3])  # opaque behind
    out = render_forward(scene, cam)
    c = 31
    expect = 0.5 * np.array([0.9, 0.1, 0.2]) + 0.5 * np.array([0.1, 0.8, 0.3])
    assert np.allclose(out.color[c, c], expect, atol=1e-12)
    # distortion: 2 * 0.5 * 0.5 * |3 - 2|
    assert out.distortion[c, c] == pytest.approx(0.5, abs=1e-12)


def test_gaussian_only_equals_constant_wave_gabor(rng):
    cam = front_camera()
    scene = random_scene(20, rng=rng)
    scene.set("w", np.tile([1.0, 0.0, 0.0, 0.0], (20, 1)))
    scene.set("f", np.zeros((20, 4)))
    scene.set("phi", np.zeros((20, 4)))
    a = render_forward(scene, cam, mode="gabor").color
    b = render_forward(scene, cam, mode="gaussian_only").color
    assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("seed,mode", list(enumerate(["gabor", "baselineA", "baselineB", "baselineC", "gaussian_only"])))
def test_matches_reference(seed, mode):
    rng = np.random.default_rng(seed)
    cam = front_camera()
    for _ in range(5):
        scene = random_scene(int(rng.integers(1, 65)), rng=rng, mode=mode)
        out, ref = render_forward(scene, cam), reference_render(scene, cam)
        for name in BUFFERS:
            assert np.abs(getattr(out, name) - getattr(ref, name)).max() <= 1e-6, name
        assert np.array_equal(out.count, ref.count)


@pytest.mark.parametrize("tile", [4, 8, 32])
def test_tile_size_does_not_change_image(rng, tile):
    cam = front_camera(48, 40)
    scene = random_scene(30, rng=rng)
    a = render_forward(scene, cam)
    b = render_forward(scene, cam, tile_size=tile)
    for name in BUFFERS:
        assert np.abs(getattr(a, name) - getattr(b, name)).max() <= 1e-12


def test_buffer_invariants(rng):
    cam = front_camera()
    out = render_forward(random_scene(64, rng=rng), cam)
    assert out.accum_alpha.min() >= 0 and out.accum_alpha.max() <= 1
    assert np.all(out.expected_depth[out.accum_alpha > 0] >= 0)
    assert np.all(out.distortion >= 0)


def test_accumulated_alpha_grows_with_more_splats(rng):
    cam = front_camera()
    scene = random_scene(40, rng=rng)
    depth = cam.to_camera(scene.get("q"))[:, 2]
    order = np.argsort(depth)
    prev = np.zeros((cam.height, cam.width))
    for k in (5, 10, 20, 40):
        cur = render_forward(scene.permuted(order[:k]), cam).accum_alpha
        assert np.all(cur >= prev - 1e-15)
        prev = cur


def test_permutation_invariance(rng):
    cam = front_camera()
    scene = random_scene(30, rng=rng)
    a = render_forward(scene, cam)
    b = render_forward(scene.permuted(rng.permutation(30)), cam)
    for name in BUFFERS:
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_baseline_a_is_single_wave_gabor(rng):
    cam = front_camera()
    scene = random_scene(15, rng=rng)
    single = Scene(np.zeros((15, ParamLayout(1).width)), 1)
    for name in ("q", "quat", "scale", "alpha", "color_a", "color_b"):
        single.set(name, scene.get(name))
    for name in ("w", "f", "phi"):
        single.set(name, scene.get(name)[:, :1])
    assert np.array_equal(render_forward(scene, cam, "baselineA").color, render_forward(single, cam, "gabor").color)


def test_baseline_c_is_zero_phase_gabor(rng):
    cam = front_camera()
    scene = random_scene(15, rng=rng)
    zero = scene.copy()
    zero.set("phi", np.zeros((15, 4)))
    assert np.array_equal(render_forward(scene, cam, "baselineC").color, render_forward(zero, cam, "gabor").color)


def test_zero_loss_gradient_gives_zero_buffer(rng):
    cam = front_camera(32, 32)
    scene = random_scene(10, rng=rng)
    out = render_forward(scene, cam)
    g = render_backward(scene, cam, np.zeros((32, 32, 3)), out)
    assert np.all(g.data == 0)


def test_uncovered_primitive_has_zero_gradient(rng):
    cam = front_camera(32, 32)
    scene = random_scene(6, rng=rng)
    scene.params[2, scene.layout["q"]] = cam.center - 3 * cam.forward  # behind the camera
    out = render_forward(scene, cam)
    g = render_backward(scene, cam, rng.normal(size=(32, 32, 3)), out, grad_depth=rng.normal(size=(32, 32)))
    assert np.all(g.data[2] == 0)
    assert np.any(g.data != 0)


def test_non_finite_gradient_names_primitive():
    cam = axis_camera(32)
    scene = blank(1)
    facing_splat(scene, 0, 2.0, 0.0, [0.5] * 3)
    out = render_forward(scene, cam)
    grad = np.zeros((32, 32, 3))
    grad[15, 15] = np.nan
    with pytest.raises(NonFiniteGradientError) as info:
        render_backward(scene, cam, grad, out)
    assert info.value.primitive == 0
    assert "primitive 0" in str(info.value)


@pytest.mark.parametrize("seed", [0, 1])
def test_l1_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cam = check_camera(24, 24)

    def loss(s):
        out = render_forward(s, cam)
        return float(np.mean(np.abs(out.color - target))), out

    for _ in range(10):
        scene = conditioned_scene(8, 4, cam, rng)
        out = render_forward(scene, cam)
        # random target kept at least 0.05 away from the render, clear of the L1 kink
        offset = rng.choice([-1.0, 1.0], out.color.shape) * rng.uniform(0.05, 0.5, out.color.shape)
        target = out.color + offset
        diff = out.color - target
        g = render_backward(scene, cam, np.sign(diff) / diff.size, out).data
        h = 1e-5
        crossed = False
        for p in range(len(scene)):
            for c in range(scene.params.shape[1]):
                sp, sm = scene.copy(), scene.copy()
                sp.params[p, c] += h
                sm.params[p, c] -= h
                (lp, op), (lm, om) = loss(sp), loss(sm)
                if not (np.array_equal(op.count, out.count) and np.array_equal(om.count, out.count)):
                    crossed = True
                    break
                fd = (lp - lm) / (2 * h)
                err = abs(fd - g[p, c])
                assert err <= 1e-7 or err / max(abs(fd), abs(g[p, c])) <= 1e-4, (p, scene.layout.column_names()[c])
            if crossed:
                break
        if not crossed:
            return
    pytest.fail("no scene without threshold crossings")


_THREAD_SCRIPT = r"""
import hashlib, json, sys
import numba, numpy as np
sys.path.insert(0, sys.argv[1])
from conftest import random_scene, front_camera
from gaborsplat.rasterizer import render_forward, render_backward
out = {}
for n in (1, 2, 4):
    numba.set_num_threads(n)
    rng = np.random.default_rng(5)
    scene = random_scene(64, rng=rng)
    cam = front_camera(80, 64)
    fwd = render_forward(scene, cam)
    g = render_backward(scene, cam, rng.normal(size=(64, 80, 3)), fwd, grad_depth=rng.normal(size=(64, 80)),
                        grad_distortion=rng.normal(size=(64, 80)))
    h = hashlib.sha256(fwd.color.tobytes() + fwd.distortion.tobytes() + g.data.tobytes()).hexdigest()
    out[n] = h
print(json.dumps(out))
"""


def test_bitwise_identical_across_thread_counts():
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    here = os.path.dirname(__file__)
    res = subprocess.run([sys.executable, "-c", _THREAD_SCRIPT, here], env=env, capture_output=True, text=True, check=True)
    hashes = json.loads(res.stdout.strip().splitlines()[-1])
    assert len(set(hashes.values())) == 1
