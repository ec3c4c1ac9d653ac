"""Raw parameter layout shared by the renderer, optimizer and checkpoint I/O.

Every primitive is stored as one row of pre-activation parameters in this
field order::

    q(3) quat(4) scale(2) alpha(1) color_a(3) color_b(3) w(N) f(N) phi(N)

``quat`` is (w, x, y, z) and is normalized on use; scales are log-space,
opacity and colors are logits, the wave triplets are used as-is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("gabor", "baselineA", "baselineB", "baselineC", "gaussian_only")
MAX_WAVES = 16

_FIXED_FIELDS = (("q", 3), ("quat", 4), ("scale", 2), ("alpha", 1), ("color_a", 3), ("color_b", 3))
FIELD_NAMES = tuple(name for name, _ in _FIXED_FIELDS) + ("w", "f", "phi")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


def check_n_waves(n_waves: int) -> int:
    if not 1 <= int(n_waves) <= MAX_WAVES:
        raise ValueError(f"wave count must be in 1..{MAX_WAVES}, got {n_waves}")
    return int(n_waves)


@dataclass(frozen=True)
class ParamLayout:
    n_waves: int

    @property
    def width(self) -> int:
        return 16 + 3 * self.n_waves

    def slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        for name, size in _FIXED_FIELDS + (("w", self.n_waves), ("f", self.n_waves), ("phi", self.n_waves)):
            out[name] = slice(start, start + size)
            start += size
        return out

    def __getitem__(self, name: str) -> slice:
        return self.slices()[name]

    def column_names(self) -> list[str]:
        names = []
        for name, sl in self.slices().items():
            size = sl.stop - sl.start
            names.extend(name if size == 1 else f"{name}[{i}]" for i in range(size))
        return names


@dataclass
class Scene:
    """A set of Gabor primitives held as raw (pre-activation) parameters."""

    params: np.ndarray
    n_waves: int = 4
    mode: str = "gabor"
    layout: ParamLayout = field(init=False, repr=False)

    def __post_init__(self):
        check_mode(self.mode)
        self.n_waves = check_n_waves(self.n_waves)
        self.layout = ParamLayout(self.n_waves)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[1] != self.layout.width:
            raise ValueError(
                f"params must have shape (P, {self.layout.width}) for N={self.n_waves}, got {self.params.shape}"
            )

    @classmethod
    def empty(cls, n_waves: int = 4, mode: str = "gabor") -> "Scene":
        return cls(np.zeros((0, ParamLayout(check_n_waves(n_waves)).width)), n_waves, mode)

    def __len__(self) -> int:
        return self.params.shape[0]

    def get(self, name: str) -> np.ndarray:
        return self.params[:, self.layout[name]]

    def set(self, name: str, value) -> None:
        self.params[:, self.layout[name]] = value

    def copy(self) -> "Scene":
        return Scene(self.params.copy(), self.n_waves, self.mode)

    def permuted(self, order) -> "Scene":
        return Scene(self.params[np.asarray(order)], self.n_waves, self.mode)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Activated:
    """Post-activation per-primitive arrays (world space)."""

    q: np.ndarray
    quat: np.ndarray
    rot: np.ndarray  # (P, 3, 3); columns are t_u, t_v, n
    scale: np.ndarray  # (P, 2)
    alpha: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray
    w: np.ndarray
    f: np.ndarray
    phi: np.ndarray


def activate_arrays(scene: Scene) -> Activated:
    from gaborsplat.geometry import quat_to_rotmat

    quat = scene.get("quat")
    return Activated(
        q=scene.get("q").copy(),
        quat=quat.copy(),
        rot=quat_to_rotmat(quat) if len(scene) else np.zeros((0, 3, 3)),
        scale=np.exp(scene.get("scale")),
        alpha=sigmoid(scene.get("alpha")[:, 0]),
        color_a=sigmoid(scene.get("color_a")),
        color_b=sigmoid(scene.get("color_b")),
        w=scene.get("w").copy(),
        f=scene.get("f").copy(),
        phi=scene.get("phi").copy(),
    )
