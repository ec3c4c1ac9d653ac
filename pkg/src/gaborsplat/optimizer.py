"""Parameter activations, Adam, point-cloud initialization and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from gaborsplat import losses
from gaborsplat.gabor_kernel import GaborPrimitive, WaveParam
from gaborsplat.geometry import Camera, SplatFrame, frame_from_quaternion
from gaborsplat.losses import LossWeights
from gaborsplat.rasterizer import NonFiniteGradientError, render_backward, render_forward
from gaborsplat.scene import ParamLayout, Scene, activate_arrays, check_mode, check_n_waves, logit

log = logging.getLogger(__name__)

INIT_ALPHA = 0.1
INIT_FREQ_MAX = 2.0
# keeps logit(rgb) finite for saturated point colors
COLOR_CLAMP = 1e-3


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, view: str):
        self.iteration = iteration
        self.view = view
        super().__init__(f"non-finite loss at iteration {iteration} (view {view})")


# ----------------------------------------------------------------------------
# activations


def activate(scene: Scene) -> list[GaborPrimitive]:
    """Raw parameters -> validated primitives."""
    if not np.all(np.isfinite(scene.params)):
        bad = np.argwhere(~np.isfinite(scene.params))[0]
        raise ValueError(f"non-finite raw parameter {scene.layout.column_names()[bad[1]]} of primitive {bad[0]}")
    act = activate_arrays(scene)
    prims = []
    for k in range(len(scene)):
        frame = SplatFrame(act.q[k], act.rot[k][:, 0], act.rot[k][:, 1], act.scale[k, 0], act.scale[k, 1])
        waves = [WaveParam(w, f, p) for w, f, p in zip(act.w[k], act.f[k], act.phi[k])]
        prims.append(GaborPrimitive(frame, float(act.alpha[k]), act.color_a[k], act.color_b[k], waves))
    return prims


def _rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    m = rot
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def deactivate(prims: list[GaborPrimitive], mode: str = "gabor") -> Scene:
    """Inverse of :func:`activate` (quaternions come back unit-norm, w >= 0)."""
    if not prims:
        raise ValueError("no primitives")
    n = prims[0].n_waves
    layout = ParamLayout(n)
    params = np.zeros((len(prims), layout.width))
    for k, p in enumerate(prims):
        if p.n_waves != n:
            raise ValueError("all primitives must have the same wave count")
        rot = np.stack([p.frame.t_u, p.frame.t_v, p.frame.n], axis=1)
        w, f, phi = p.wave_arrays()
        row = params[k]
        row[layout["q"]] = p.frame.q
        row[layout["quat"]] = _rotation_to_quat(rot)
        row[layout["scale"]] = np.log([p.frame.s_u, p.frame.s_v])
        row[layout["alpha"]] = logit(p.alpha)
        row[layout["color_a"]] = logit(p.c_a)
        row[layout["color_b"]] = logit(p.c_b)
        row[layout["w"]], row[layout["f"]], row[layout["phi"]] = w, f, phi
    return Scene(params, n, mode)


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr, layout: Optional[ParamLayout] = None) -> np.ndarray:
    """One bias-corrected Adam update of ``params`` in place; ``lr`` broadcasts per column."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        prim, col = np.argwhere(~np.isfinite(grads))[0]
        raise NonFiniteGradientError(int(prim), layout.column_names()[col] if layout else f"column {col}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def exponential_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 0:
        return lr_init
    t = min(max(step / total, 0.0), 1.0)
    return math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)


# ----------------------------------------------------------------------------
# configuration and initialization


@dataclass
class TrainConfig:
    iterations: int = 30000
    mode: str = "gabor"
    n_waves: int = 4
    seed: int = 0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_quat: float = 1e-3
    lr_scale: float = 5e-3
    lr_alpha: float = 5e-2
    lr_color: float = 2.5e-3
    lr_wave: float = 2.5e-3
    # None: scale position rates by the camera extent
    position_lr_scale: Optional[float] = None
    loss: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 1000
    checkpoint_every: int = 0
    test_fraction: float = 1.0 / 8.0
    split_policy: str = "every_nth"
    densify: bool = False

    def validate(self) -> "TrainConfig":
        if self.densify:
            raise ValueError("densification unsupported")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        check_mode(self.mode)
        check_n_waves(self.n_waves)
        for name in ("lr_position", "lr_position_final", "lr_quat", "lr_scale", "lr_alpha", "lr_color", "lr_wave"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.position_lr_scale is not None and not self.position_lr_scale > 0:
            raise ValueError("position_lr_scale must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("cadences must be non-negative")
        if not 0 < self.test_fraction <= 1:
            raise ValueError("test_fraction must lie in (0, 1]")
        if self.split_policy not in ("every_nth", "random"):
            raise ValueError(f"unknown split policy {self.split_policy!r}")
        return self

    @property
    def effective_n_waves(self) -> int:
        return 1 if self.mode == "baselineA" else self.n_waves


def init_from_points(points, config: TrainConfig) -> Scene:
    """One primitive per point, remaining parameters drawn from ``config.seed``.

    ``points`` is an (M, 3) array of positions or (M, 6) positions + RGB in
    [0, 1], or a sequence of ``(xyz, rgb)`` pairs (rgb may be None).
    """
    xyz, rgb = _split_points(points)
    if len(xyz) == 0:
        raise ValueError("cannot initialize from an empty point list")
    n = config.effective_n_waves
    rng = np.random.default_rng(config.seed)
    m = len(xyz)
    scene = Scene(np.zeros((m, ParamLayout(n).width)), n, config.mode)

    if m > 1:
        k = min(3, m - 1)
        dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
        mean_dist = np.sqrt(np.maximum(np.mean(np.square(dist[:, 1:]), axis=1), 1e-7))
    else:
        mean_dist = np.ones(1)
    quat = rng.standard_normal((m, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    freq = rng.uniform(0.0, INIT_FREQ_MAX, (m, n))
    phase = rng.uniform(0.0, 2 * np.pi, (m, n))
    if config.mode == "baselineC":
        phase[:] = 0.0
    weights = np.zeros((m, n))
    weights[:, 0] = 1.0
    colors = logit(np.clip(rgb, COLOR_CLAMP, 1 - COLOR_CLAMP))

    scene.set("q", xyz)
    scene.set("quat", quat)
    scene.set("scale", np.log(mean_dist)[:, None].repeat(2, axis=1))
    scene.set("alpha", logit(INIT_ALPHA))
    scene.set("color_a", colors)
    scene.set("color_b", colors)
    scene.set("w", weights)
    scene.set("f", freq)
    scene.set("phi", phase)
    return scene


def _split_points(points):
    if isinstance(points, np.ndarray):
        if points.size == 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        arr = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
        if arr.shape[1] == 3:
            return arr, np.full((len(arr), 3), 0.5)
        if arr.shape[1] == 6:
            return arr[:, :3], arr[:, 3:]
        raise ValueError(f"points array must have 3 or 6 columns, got {arr.shape[1]}")
    xyz, rgb = [], []
    for p in points:
        pos, col = p
        xyz.append(np.asarray(pos, dtype=np.float64).reshape(3))
        rgb.append(np.full(3, 0.5) if col is None else np.asarray(col, dtype=np.float64).reshape(3))
    if not xyz:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.stack(xyz), np.stack(rgb)


def split_train_test(views, fraction: float = 1.0 / 8.0, seed: int = 0, policy: str = "every_nth", key=None):
    """Hold out ``floor(len * fraction)`` views.

    ``every_nth``: after sorting by ``key`` (default: the view's ``name``),
    every ``round(1/fraction)``-th view goes to the test set; ``random`` picks
    them with ``seed``. Returns (train, test) lists in sorted order.
    """
    views = list(views)
    if not views:
        raise ValueError("cannot split an empty view list")
    key = key or (lambda v: getattr(v, "name", v))
    ordered = sorted(views, key=key)
    if policy == "every_nth":
        step = max(1, int(round(1.0 / fraction)))
        test_idx = set(range(step - 1, len(ordered), step))
    elif policy == "random":
        count = int(math.floor(len(ordered) * fraction))
        test_idx = set(np.random.default_rng(seed).choice(len(ordered), size=count, replace=False).tolist())
    else:
        raise ValueError(f"unknown split policy {policy!r}")
    if not test_idx:
        log.warning("only %d views: the test split is empty", len(ordered))
    train = [v for i, v in enumerate(ordered) if i not in test_idx]
    test = [v for i, v in enumerate(ordered) if i in test_idx]
    return train, test


def lr_vector(config: TrainConfig, layout: ParamLayout, position_lr: float) -> np.ndarray:
    lr = np.zeros(layout.width)
    lr[layout["q"]] = position_lr
    lr[layout["quat"]] = config.lr_quat
    lr[layout["scale"]] = config.lr_scale
    lr[layout["alpha"]] = config.lr_alpha
    lr[layout["color_a"]] = config.lr_color
    lr[layout["color_b"]] = config.lr_color
    for name in ("w", "f", "phi"):
        lr[layout[name]] = config.lr_wave
    return lr


def camera_extent(cameras) -> float:
    """Radius of the camera centers around their mean, padded by 10% (at least 1e-3)."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) * 1.1
    return max(radius, 1e-3)


# ----------------------------------------------------------------------------
# training


@dataclass
class LossTerms:
    total: float
    l1: float
    dssim: float
    dist: float
    normal: float


def loss_and_grads(out, target, camera: Camera, weights: LossWeights, iteration: int):
    """Total training loss for one rendered view and the gradient images it induces."""
    lam = weights.lambda_dssim
    l1, g_l1 = losses.l1_loss_grad(out.color, target)
    dssim, g_dssim = losses.dssim_loss_grad(out.color, target)
    dist = float(np.mean(out.distortion))
    grads = {
        "grad_color": (1 - lam) * g_l1 + lam * g_dssim,
        "grad_distortion": np.full(out.distortion.shape, weights.w_dist / out.distortion.size),
    }
    total = (1 - lam) * l1 + lam * dssim + weights.w_dist * dist
    normal = 0.0
    if iteration >= weights.normal_start_iter and weights.w_normal > 0:
        normal, g_n, g_d, g_a = losses.normal_consistency_loss_grad(
            out.normal_map, out.expected_depth, out.accum_alpha, camera
        )
        total += weights.w_normal * normal
        grads["grad_normal"] = weights.w_normal * g_n
        grads["grad_depth"] = weights.w_normal * g_d
        grads["grad_alpha"] = weights.w_normal * g_a
    return LossTerms(total, l1, dssim, dist, normal), grads


def quantize(image: np.ndarray) -> np.ndarray:
    """What an 8-bit PNG write/read would return."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def evaluate_views(scene: Scene, views, cameras) -> list[dict]:
    rows = []
    for view in views:
        cam = cameras[view.camera_index]
        img = quantize(render_forward(scene, cam).color)
        rows.append({"view": view.name, "psnr": losses.psnr(img, view.image), "ssim": losses.ssim(img, view.image)})
    return rows


def mean_metrics(rows: list[dict]) -> dict:
    if not rows:
        return {}
    return {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}


@dataclass
class TrainResult:
    scene: Scene
    initial: Scene
    log: list[dict]
    test_metrics: list[dict]
    train_views: list
    test_views: list


def train(
    dataset,
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    init_points=None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit a scene to ``dataset`` (see :class:`gaborsplat.dataio.Dataset`).

    Checkpoints go to ``out_dir`` (``ckpt_XXXXXX.gspl`` at the checkpoint
    cadence, ``final.gspl`` at the end) together with ``metrics.log``.
    """
    from gaborsplat import dataio

    config.validate()
    train_views, test_views = split_train_test(
        dataset.views, config.test_fraction, config.seed, config.split_policy
    )
    if len(train_views) < 2:
        raise ValueError(f"need at least 2 training views, got {len(train_views)}")
    points = dataset.sfm_points if init_points is None else init_points
    scene = init_from_points(points, config)
    initial = scene.copy()
    cameras = dataset.cameras
    rng = np.random.default_rng(config.seed + 1)
    pos_scale = config.position_lr_scale or camera_extent(cameras)
    state = AdamState.zeros_like(scene.params)

    records: list[dict] = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.log", "w")

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(dataio.format_record(rec) + "\n")
        if on_record is not None:
            on_record(rec)

    order: list[int] = []
    try:
        for it in range(config.iterations):
            if not order:
                order = list(rng.permutation(len(train_views)))
            view = train_views[order.pop(0)]
            cam = cameras[view.camera_index]
            pos_lr = pos_scale * exponential_lr(it, config.iterations, config.lr_position, config.lr_position_final)
            out = render_forward(scene, cam)
            terms, grads = loss_and_grads(out, view.image, cam, config.loss, it)
            if not math.isfinite(terms.total):
                raise TrainingDiverged(it, view.name)
            g = render_backward(scene, cam, grads.pop("grad_color"), out, **grads)
            adam_step(scene.params, g.data, state, lr_vector(config, scene.layout, pos_lr), scene.layout)
            rec = {
                "iter": it,
                "total_loss": terms.total,
                "l1": terms.l1,
                "dssim": terms.dssim,
                "dist": terms.dist,
                "normal": terms.normal,
            }
            last = it + 1 == config.iterations
            if test_views and (last or (config.eval_every and (it + 1) % config.eval_every == 0)):
                rec.update(mean_metrics(evaluate_views(scene, test_views, cameras)))
            emit(rec)
            if out_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                dataio.save_checkpoint(scene, out_dir / f"ckpt_{it + 1:06d}.gspl")
    finally:
        if log_file is not None:
            log_file.close()

    test_metrics = evaluate_views(scene, test_views, cameras)
    if out_dir is not None:
        dataio.save_checkpoint(scene, out_dir / "final.gspl")
    return TrainResult(scene, initial, records, test_metrics, train_views, test_views)
