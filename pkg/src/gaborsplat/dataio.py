"""Dataset ingestion (COLMAP text models, transforms JSON), PNG I/O, checkpoints.

Checkpoint layout (``.gspl``, little endian)::

    offset 0   4s   magic b"GSPL"
           4   u32  format version (1)
           8   u32  wave count N
          12   u32  primitive count P
          16   u32  mode tag (index into gaborsplat.scene.MODES)
          20   f32  P * (16 + 3N) raw parameters, row-major in Scene field order
         end   u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from gaborsplat.geometry import Camera
from gaborsplat.scene import MAX_WAVES, MODES, ParamLayout, Scene

CHECKPOINT_MAGIC = b"GSPL"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# OpenGL camera axes (y up, z back) -> ours (y down, z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class FormatError(ValueError):
    """A file could not be parsed; the message names the location."""


@dataclass
class View:
    name: str
    camera_index: int
    path: Path | None = None
    image: np.ndarray | None = None


@dataclass
class Dataset:
    cameras: list[Camera]
    views: list[View]
    sfm_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # xyz + rgb in [0, 1]
    intrinsics: dict = field(default_factory=dict)  # COLMAP camera id -> (model, w, h, params)

    def validate(self) -> "Dataset":
        for v in self.views:
            if not 0 <= v.camera_index < len(self.cameras):
                raise FormatError(f"view {v.name} references missing camera {v.camera_index}")
            cam = self.cameras[v.camera_index]
            if v.image is not None and v.image.shape[:2] != (cam.height, cam.width):
                raise FormatError(
                    f"view {v.name}: image is {v.image.shape[1]}x{v.image.shape[0]}, camera is {cam.width}x{cam.height}"
                )
        return self


# ----------------------------------------------------------------------------
# COLMAP text model


def qvec_to_rotmat(qvec) -> np.ndarray:
    w, x, y, z = np.asarray(qvec, dtype=np.float64) / np.linalg.norm(qvec)
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def _floats(tokens, where):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{where}: expected numbers, got {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"{where}: non-finite value")
    return vals


def _int(token, where):
    try:
        val = int(token)
    except ValueError:
        raise FormatError(f"{where}: expected an integer, got {token!r}") from None
    if not -(2**63) <= val < 2**63:
        raise FormatError(f"{where}: integer {token!r} out of range")
    return val


def parse_cameras_txt(text: str, source: str = "cameras.txt") -> dict:
    """COLMAP camera id -> (model, width, height, (fx, fy, cx, cy))."""
    cams = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        tok = line.split()
        if len(tok) < 4:
            raise FormatError(f"{where}: malformed camera line")
        cam_id, model = _int(tok[0], where), tok[1]
        width, height = _int(tok[2], where), _int(tok[3], where)
        params = _floats(tok[4:], where)
        if model == "PINHOLE":
            if len(params) != 4:
                raise FormatError(f"{where}: PINHOLE needs 4 parameters, got {len(params)}")
            intr = tuple(params)
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise FormatError(f"{where}: SIMPLE_PINHOLE needs 3 parameters, got {len(params)}")
            intr = (params[0], params[0], params[1], params[2])
        else:
            raise FormatError(f"{where}: unsupported camera model {model}")
        if width < 1 or height < 1 or intr[0] <= 0 or intr[1] <= 0:
            raise FormatError(f"{where}: invalid camera size or focal length")
        if cam_id in cams:
            raise FormatError(f"{where}: duplicate camera id {cam_id}")
        cams[cam_id] = (model, width, height, intr)
    if not cams:
        raise FormatError(f"{source}: no cameras")
    return cams


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray
    point3d_ids: np.ndarray


def parse_images_txt(text: str, source: str = "images.txt") -> list[ColmapImage]:
    """Header line then a 2D-point line (possibly empty) per image."""
    lines = text.splitlines()
    images = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        tok = line.split()
        if len(tok) < 10:
            raise FormatError(f"{where}: malformed image line")
        vals = _floats(tok[1:8], where)
        qvec = np.array(vals[:4])
        if np.linalg.norm(qvec) == 0:
            raise FormatError(f"{where}: zero quaternion")
        img = ColmapImage(
            _int(tok[0], where), qvec, np.array(vals[4:7]), _int(tok[8], where), " ".join(tok[9:]),
            np.zeros((0, 2)), np.zeros(0, dtype=np.int64),
        )
        if i < len(lines):
            pts = lines[i].split()
            where2 = f"{source}:{i + 1}"
            i += 1
            if len(pts) % 3:
                raise FormatError(f"{where2}: 2D point list length is not a multiple of 3")
            if pts:
                arr = np.array(_floats(pts, where2)).reshape(-1, 3)
                if np.any(np.abs(arr[:, 2]) >= 2**53) or np.any(arr[:, 2] != np.round(arr[:, 2])):
                    raise FormatError(f"{where2}: invalid 3D point id")
                img.xys = arr[:, :2]
                img.point3d_ids = arr[:, 2].astype(np.int64)
        images.append(img)
    return images


def parse_points3d_txt(text: str, source: str = "points3D.txt"):
    """Returns (ids, (M, 6) xyz + rgb/255)."""
    ids, rows = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        tok = line.split()
        if len(tok) < 8:
            raise FormatError(f"{where}: malformed point line")
        pid = _int(tok[0], where)
        xyz = _floats(tok[1:4], where)
        rgb = [_int(t, where) for t in tok[4:7]]
        if any(c < 0 or c > 255 for c in rgb):
            raise FormatError(f"{where}: color out of 0..255")
        _floats(tok[7:8], where)
        ids.append(pid)
        rows.append(xyz + [c / 255.0 for c in rgb])
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(-1, 6)


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8", errors="replace")
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None


def _find_model_dir(root: Path) -> Path:
    for cand in (root, root / "sparse" / "0", root / "sparse"):
        if (cand / "cameras.txt").exists():
            return cand
    raise FormatError(f"missing file {root / 'cameras.txt'}")


def build_colmap_dataset(cams: dict, images: list[ColmapImage], points: np.ndarray) -> Dataset:
    cameras, views = [], []
    for img in images:
        if img.camera_id not in cams:
            raise FormatError(f"image {img.name!r} references unknown camera {img.camera_id}")
        _, width, height, (fx, fy, cx, cy) = cams[img.camera_id]
        try:
            cameras.append(Camera(width, height, fx, fy, cx, cy, qvec_to_rotmat(img.qvec), img.tvec))
        except ValueError as exc:
            raise FormatError(f"image {img.name!r}: {exc}") from None
        views.append(View(img.name, len(cameras) - 1))
    return Dataset(cameras, views, points, cams)


def load_colmap_text(directory, images_dir=None, load_images: bool = True) -> Dataset:
    root = Path(directory)
    model = _find_model_dir(root)
    cams = parse_cameras_txt(_read_text(model / "cameras.txt"), str(model / "cameras.txt"))
    images = parse_images_txt(_read_text(model / "images.txt"), str(model / "images.txt"))
    _, points = parse_points3d_txt(_read_text(model / "points3D.txt"), str(model / "points3D.txt"))
    ds = build_colmap_dataset(cams, images, points)
    img_root = Path(images_dir) if images_dir is not None else root / "images"
    for v in ds.views:
        v.path = img_root / v.name
        if load_images:
            v.image = load_image(v.path)
    return ds.validate()


# ----------------------------------------------------------------------------
# transforms JSON


def _rigid_from_c2w(mat, where) -> tuple[np.ndarray, np.ndarray]:
    try:
        c2w = np.array(mat, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: transform_matrix is not numeric") from None
    if c2w.shape == (3, 4):
        c2w = np.vstack([c2w, [0, 0, 0, 1]])
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise FormatError(f"{where}: transform_matrix must be a finite 4x4 matrix")
    c2w = c2w @ GL_TO_CV
    rot = c2w[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-9:
        raise FormatError(f"{where}: non-invertible transform")
    u, s, vt = np.linalg.svd(rot)
    if np.abs(s - 1).max() > 1e-3 or np.linalg.det(rot) < 0:
        raise FormatError(f"{where}: transform is not a rigid rotation")
    rot = u @ vt
    w2c_rot = rot.T
    return w2c_rot, -w2c_rot @ c2w[:3, 3]


def _field(obj, frame, name, where, cast=float, default=None):
    for src in (frame, obj):
        if isinstance(src, dict) and name in src:
            try:
                val = cast(src[name])
            except (TypeError, ValueError, OverflowError):
                raise FormatError(f"{where}: field {name!r} has invalid value {src[name]!r}") from None
            if cast is float and not math.isfinite(val):
                raise FormatError(f"{where}: field {name!r} is not finite")
            return val
    if default is not None:
        return default
    raise FormatError(f"{where}: missing field {name!r}")


def parse_transforms(obj, source: str = "transforms.json", image_sizes=None) -> Dataset:
    """Cameras and views from a parsed transforms document.

    ``image_sizes`` maps frame index -> (w, h), used when ``w``/``h`` are absent.
    """
    if not isinstance(obj, dict):
        raise FormatError(f"{source}: top level must be an object")
    frames = obj.get("frames")
    if frames is None:
        raise FormatError(f"{source}: missing field 'frames'")
    if not isinstance(frames, list):
        raise FormatError(f"{source}: 'frames' must be a list")
    if not frames:
        raise FormatError(f"{source}: no frames")
    cameras, views = [], []
    for i, fr in enumerate(frames):
        where = f"{source}: frames[{i}]"
        if not isinstance(fr, dict):
            raise FormatError(f"{where}: frame must be an object")
        path = fr.get("file_path")
        if not isinstance(path, str):
            raise FormatError(f"{where}: missing field 'file_path'")
        if "transform_matrix" not in fr:
            raise FormatError(f"{where}: missing field 'transform_matrix'")
        size = (image_sizes or {}).get(i)
        w = _field(obj, fr, "w", where, int, default=size[0] if size else None)
        h = _field(obj, fr, "h", where, int, default=size[1] if size else None)
        if w < 1 or h < 1:
            raise FormatError(f"{where}: image size must be positive")
        if any(k in fr or k in obj for k in ("fl_x",)):
            fx = _field(obj, fr, "fl_x", where)
        else:
            angle = _field(obj, fr, "camera_angle_x", where)
            fx = 0.5 * w / math.tan(0.5 * angle) if 0 < angle < math.pi else -1.0
        fy = _field(obj, fr, "fl_y", where, default=fx)
        cx = _field(obj, fr, "cx", where, default=w / 2)
        cy = _field(obj, fr, "cy", where, default=h / 2)
        rot, trans = _rigid_from_c2w(fr["transform_matrix"], where)
        try:
            cameras.append(Camera(w, h, fx, fy, cx, cy, rot, trans))
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        views.append(View(path, i))
    return Dataset(cameras, views)


def decode_transforms(text: str, source: str = "transforms.json"):
    """JSON text -> parsed document, with the line number on syntax errors."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except RecursionError:
        raise FormatError(f"{source}: JSON nested too deeply") from None


def _frame_image_path(base: Path, file_path: str) -> Path:
    p = base / file_path
    return p if p.suffix else p.with_suffix(".png")


def load_transforms(path, load_images: bool = True, points_file=None) -> Dataset:
    """Load a transforms-style JSON (camera-to-world matrices in OpenGL axes).

    Init points are read from ``points_file`` or, if present, a COLMAP-format
    ``points3D.txt`` next to the JSON.
    """
    path = Path(path)
    obj = decode_transforms(_read_text(path), str(path))
    sizes, images = None, {}
    if load_images and isinstance(obj, dict) and isinstance(obj.get("frames"), list):
        sizes = {}
        for i, fr in enumerate(obj["frames"]):
            if isinstance(fr, dict) and isinstance(fr.get("file_path"), str):
                img = load_image(_frame_image_path(path.parent, fr["file_path"]))
                images[i] = img
                sizes[i] = (img.shape[1], img.shape[0])
    ds = parse_transforms(obj, str(path), sizes)
    for i, v in enumerate(ds.views):
        v.path = _frame_image_path(path.parent, v.name)
        v.image = images.get(i)
    pts = Path(points_file) if points_file is not None else path.parent / "points3D.txt"
    if pts.exists():
        _, ds.sfm_points = parse_points3d_txt(_read_text(pts), str(pts))
    elif points_file is not None:
        raise FormatError(f"missing file {pts}")
    return ds.validate()


def load_dataset(path, fmt: str, load_images: bool = True) -> Dataset:
    path = Path(path)
    if fmt == "colmap":
        return load_colmap_text(path, load_images=load_images)
    if fmt == "transforms":
        return load_transforms(path / "transforms.json" if path.is_dir() else path, load_images)
    raise ValueError(f"unknown dataset format {fmt!r}")


def write_points3d_txt(path, xyz, rgb) -> None:
    """COLMAP points3D.txt with empty tracks; rgb in [0, 1]."""
    rgb8 = np.round(np.clip(rgb, 0, 1) * 255).astype(int)
    lines = ["# 3D point list with one line of data per point:", "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]"]
    for i, (p, c) in enumerate(zip(xyz, rgb8), 1):
        lines.append(f"{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]} 0")
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------------
# images


def _png_bit_depth(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(26)
    if head[:8] != _PNG_SIGNATURE:
        return None
    if len(head) < 26:
        raise FormatError(f"{path}: truncated PNG header")
    return head[24]


def load_image(path) -> np.ndarray:
    """8-bit RGB image as float64 in [0, 1] (values as stored, no gamma change)."""
    path = Path(path)
    try:
        depth = _png_bit_depth(path)
        if depth is not None and depth != 8:
            raise FormatError(f"{path}: unsupported bit depth {depth}")
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise FormatError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from None
    return arr / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    Image.fromarray(to_uint8(image), "RGB").save(Path(path), format="PNG")


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(scene: Scene) -> bytes:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, scene.n_waves, len(scene), MODES.index(scene.mode))
    body = header + np.ascontiguousarray(scene.params, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(data: bytes, source: str = "checkpoint") -> Scene:
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: unexpected end at offset {len(data)} (header needs {_HEADER.size} bytes)")
    magic, version, n_waves, count, mode_tag = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4 (expected {CHECKPOINT_VERSION})")
    if not 1 <= n_waves <= MAX_WAVES:
        raise FormatError(f"{source}: invalid wave count {n_waves} at offset 8")
    if mode_tag >= len(MODES):
        raise FormatError(f"{source}: invalid mode tag {mode_tag} at offset 16")
    width = ParamLayout(n_waves).width
    payload_end = _HEADER.size + count * width * 4
    if len(data) < payload_end + 4:
        raise FormatError(f"{source}: unexpected end at offset {len(data)} (expected {payload_end + 4} bytes)")
    if len(data) > payload_end + 4:
        raise FormatError(f"{source}: trailing data at offset {payload_end + 4}")
    (stored,) = struct.unpack_from("<I", data, payload_end)
    actual = zlib.crc32(data[:payload_end])
    if stored != actual:
        raise FormatError(f"{source}: CRC mismatch at offset {payload_end} (stored {stored:08x}, computed {actual:08x})")
    params = np.frombuffer(data, dtype="<f4", count=count * width, offset=_HEADER.size).reshape(count, width)
    return Scene(params.astype(np.float64), n_waves, MODES[mode_tag])


def save_checkpoint(scene: Scene, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(scene))


def load_checkpoint(path) -> Scene:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return parse_checkpoint(data, str(path))


# ----------------------------------------------------------------------------
# metrics log: one ``key=value`` record per line, space separated


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "inf" if value == math.inf else repr(value)
    text = str(value)
    if not text or any(c.isspace() or c == "=" for c in text):
        raise ValueError(f"cannot encode {text!r} in a log record")
    return text


def format_record(record: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in record.items())


def parse_record(line: str) -> dict:
    out = {}
    for item in line.split():
        key, sep, val = item.partition("=")
        if not sep:
            raise FormatError(f"log item {item!r} is not key=value")
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


def read_log(path) -> list[dict]:
    return [parse_record(line) for line in _read_text(Path(path)).splitlines() if line.strip()]
