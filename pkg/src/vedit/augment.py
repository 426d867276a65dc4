"""Pseudo-video synthesis from (original, edited) image pairs.

A trajectory of affine transforms is sampled once and applied to both
images, so the two resulting clips differ only by the edit, never by the
simulated camera motion.

Conventions:

* images are float arrays shaped ``(C, H, W)`` with values in ``[0, 1]``;
* pixel ``(x, y)`` is the centre of column ``x``, row ``y``; the image
  centre is ``((W-1)/2, (H-1)/2)``;
* :func:`affine_matrix` maps *output* pixel coordinates to *source*
  coordinates as ``C @ translate @ rotate @ shear @ scale @ C^-1`` where
  ``C`` moves the origin to the image centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .numkit import Rng

SOURCE_TAGS = ("image_synth", "openworld")
Mode = Literal["iid", "interpolated"]
Border = Literal["replicate", "reflect"]


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineRanges:
    max_rotation_deg: float = 5.0
    translate_frac: float = 0.05
    scale: tuple[float, float] = (0.95, 1.05)
    shear_deg: float = 5.0
    resize_short: int | None = 288
    crop: int | None = 256

    def __post_init__(self):
        lo, hi = self.scale
        if min(self.max_rotation_deg, self.translate_frac, self.shear_deg) < 0:
            raise ValueError("rotation, translation and shear bounds must be non-negative")
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale}")
        if (self.crop is None) != (self.resize_short is None):
            raise ValueError("crop and resize_short must be set or unset together")
        if self.crop is not None and not 1 <= self.crop <= self.resize_short:
            raise ValueError(f"need 1 <= crop <= resize_short, got crop={self.crop}, resize_short={self.resize_short}")

    def without_crop(self) -> "AffineRanges":
        return replace(self, resize_short=None, crop=None)

    @classmethod
    def preset(cls, name: str) -> "AffineRanges":
        """Augmentation strategies used by the ablation runner."""
        full = cls()
        none = dict(max_rotation_deg=0.0, translate_frac=0.0, scale=(1.0, 1.0), shear_deg=0.0,
                    resize_short=None, crop=None)
        presets = {
            "all": full,
            "translate": cls(**{**none, "translate_frac": full.translate_frac}),
            "rotate": cls(**{**none, "max_rotation_deg": full.max_rotation_deg}),
            "crop": cls(**{**none, "resize_short": full.resize_short, "crop": full.crop}),
            "none": cls(**none),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown augmentation preset {name!r}; choose from {sorted(presets)}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "AffineRanges":
        """Read ``key=value`` lines; ``scale`` is ``lo,hi``; ``none`` disables crop."""
        known = {f.name for f in fields(cls)}
        kw: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "scale":
                lo, hi = (float(v) for v in val.split(","))
                kw[key] = (lo, hi)
            elif key in ("resize_short", "crop"):
                kw[key] = None if val.lower() == "none" else int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    translate_frac: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    shear_deg: tuple[float, float] = (0.0, 0.0)

    def as_vector(self) -> np.ndarray:
        return np.array([self.rotation_deg, *self.translate_frac, self.scale, *self.shear_deg])

    @classmethod
    def from_vector(cls, v) -> "AffineParams":
        v = [float(x) for x in v]
        return cls(v[0], (v[1], v[2]), v[3], (v[4], v[5]))


@dataclass(frozen=True)
class CropSpec:
    """Random-resized-crop shared by every frame: offsets are fractions of the free margin."""

    offset_frac: tuple[float, float]
    resize_short: int
    size: int

    def rectangle(self, width: int, height: int) -> tuple[float, int, int, int, int]:
        """Return ``(zoom, x0, y0, resized_w, resized_h)`` for a source of the given size."""
        zoom = self.resize_short / min(width, height)
        rw = max(self.size, int(round(width * zoom)))
        rh = max(self.size, int(round(height * zoom)))
        fx, fy = self.offset_frac
        x0 = min(int(fx * (rw - self.size + 1)), rw - self.size)
        y0 = min(int(fy * (rh - self.size + 1)), rh - self.size)
        return zoom, x0, y0, rw, rh


@dataclass(frozen=True)
class TransformTrajectory:
    frames: tuple[AffineParams, ...]
    crop: CropSpec | None = None
    mode: str = "interpolated"

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a trajectory needs at least one frame")

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def identity(cls, T: int = 1) -> "TransformTrajectory":
        return cls(tuple(AffineParams() for _ in range(T)), None, "iid")


@dataclass(eq=False)
class EditTriplet:
    """One training record: input clip, instruction, edited clip.

    Videos are float32 arrays shaped ``(T, C, H, W)`` in ``[0, 1]``.
    Equality is bitwise on the pixel data.
    """

    video_in: np.ndarray
    instruction: str
    video_out: np.ndarray
    source_tag: str = "image_synth"
    seed: int = 0

    def __post_init__(self):
        self.video_in = np.ascontiguousarray(self.video_in, dtype=np.float32)
        self.video_out = np.ascontiguousarray(self.video_out, dtype=np.float32)
        if self.video_in.ndim != 4:
            raise ValueError(f"videos must be (T, C, H, W), got shape {self.video_in.shape}")
        if self.video_in.shape != self.video_out.shape:
            raise ValueError(f"video_in {self.video_in.shape} and video_out {self.video_out.shape} differ in shape")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        for v in (self.video_in, self.video_out):
            if np.isfinite(v).all() and (v.min() < 0 or v.max() > 1):
                raise ValueError("pixel values must lie in [0, 1]")

    def __eq__(self, other) -> bool:
        if not isinstance(other, EditTriplet):
            return NotImplemented
        return (self.instruction == other.instruction and self.source_tag == other.source_tag
                and int(self.seed) == int(other.seed)
                and self.video_in.shape == other.video_in.shape
                and self.video_in.tobytes() == other.video_in.tobytes()
                and self.video_out.tobytes() == other.video_out.tobytes())

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.video_in.shape


# ---------------------------------------------------------------------------
# sampling


def _draw_params(rng: Rng, r: AffineRanges) -> AffineParams:
    rot = rng.uniform_range(-r.max_rotation_deg, r.max_rotation_deg)
    tx = rng.uniform_range(-r.translate_frac, r.translate_frac)
    ty = rng.uniform_range(-r.translate_frac, r.translate_frac)
    sc = rng.uniform_range(*r.scale)
    shx = rng.uniform_range(-r.shear_deg, r.shear_deg)
    shy = rng.uniform_range(-r.shear_deg, r.shear_deg)
    return AffineParams(rot, (tx, ty), sc, (shx, shy))


def sample_affine_params(seed: int, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    """Uniform draw inside every range; rotation is strictly inside (-max, max)."""
    return _draw_params(Rng(seed), ranges)


def interpolate_params(start: AffineParams, end: AffineParams, T: int) -> tuple[AffineParams, ...]:
    a, b = start.as_vector(), end.as_vector()
    if T == 1:
        return (start,)
    return tuple(AffineParams.from_vector(a + (b - a) * (i / (T - 1))) for i in range(T))


def make_trajectory(seed: int, T: int, ranges: AffineRanges = AffineRanges(),
                    mode: Mode = "interpolated") -> TransformTrajectory:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = Rng(seed)
    if mode == "iid":
        frames = tuple(_draw_params(rng, ranges) for _ in range(T))
    elif mode == "interpolated":
        start = _draw_params(rng, ranges)
        end = _draw_params(rng, ranges)
        frames = interpolate_params(start, end, T)
    else:
        raise ValueError(f"unknown trajectory mode {mode!r}")
    crop = None
    if ranges.crop is not None:
        crop = CropSpec((rng.random(), rng.random()), ranges.resize_short, ranges.crop)
    return TransformTrajectory(frames, crop, mode)


# ---------------------------------------------------------------------------
# geometry


def _h(m: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    out[:2] = m[:2]
    return out


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def affine_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    """2x3 matrix taking output pixel coordinates to source coordinates."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    if p.scale == 0:
        raise SingularTransformError("scale must be non-zero")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    th = math.radians(p.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shx, shy = (math.tan(math.radians(a)) for a in p.shear_deg)
    shear = np.array([[1.0, shx, 0.0], [shy, 1.0, 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([p.scale, p.scale, 1.0])
    tr = _translation(p.translate_frac[0] * width, p.translate_frac[1] * height)
    m = _translation(cx, cy) @ tr @ rot @ shear @ sc @ _translation(-cx, -cy)
    if abs(np.linalg.det(m[:2, :2])) < 1e-12:
        raise SingularTransformError("transform is singular")
    # exact zeros/ones for the identity case
    m = np.where(np.abs(m) < 1e-15, 0.0, m)
    return m[:2].copy()


def _border_index(i: np.ndarray, n: int, border: str) -> np.ndarray:
    if border == "replicate":
        return np.clip(i, 0, n - 1)
    if border == "reflect":
        if n == 1:
            return np.zeros_like(i)
        period = 2 * (n - 1)
        j = np.mod(i, period)
        return np.where(j >= n, period - j, j)
    raise ValueError(f"unknown border mode {border!r}")


def warp_bilinear(img: np.ndarray, m: np.ndarray, border: Border = "replicate",
                  out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Resample ``img (C, H, W)`` at ``m @ [x, y, 1]`` for every output pixel.

    ``out_size`` is ``(height, width)`` and defaults to the input size.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 3) or not np.all(np.isfinite(m)):
        raise ValueError("matrix must be a finite 2x3 array")
    src = np.asarray(img, dtype=np.float64)
    C, H, W = src.shape
    oh, ow = out_size if out_size is not None else (H, W)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = _border_index(x0, W, border), _border_index(x0 + 1, W, border)
    ya, yb = _border_index(y0, H, border), _border_index(y0 + 1, H, border)
    top = src[:, ya, xa] * (1.0 - fx) + src[:, ya, xb] * fx
    bot = src[:, yb, xa] * (1.0 - fx) + src[:, yb, xb] * fx
    out = top * (1.0 - fy) + bot * fy
    return out.astype(np.float32)


def frame_matrix(p: AffineParams, crop: CropSpec | None, width: int, height: int
                 ) -> tuple[np.ndarray, tuple[int, int]]:
    """Full output-to-source map for one frame, with the shared crop folded in."""
    if crop is None:
        return affine_matrix(p, width, height), (height, width)
    zoom, x0, y0, rw, rh = crop.rectangle(width, height)
    m = _h(affine_matrix(p, rw, rh))
    to_source = np.array([[1 / zoom, 0.0, 0.5 / zoom - 0.5], [0.0, 1 / zoom, 0.5 / zoom - 0.5], [0.0, 0.0, 1.0]])
    total = to_source @ m @ _translation(x0, y0)
    return total[:2].copy(), (crop.size, crop.size)


def apply_trajectory(img: np.ndarray, traj: TransformTrajectory, border: Border = "replicate") -> np.ndarray:
    """Render ``img (C, H, W)`` into a ``(T, C, H', W')`` pseudo-video."""
    _, H, W = img.shape
    frames = []
    for p in traj.frames:
        m, size = frame_matrix(p, traj.crop, W, H)
        frames.append(warp_bilinear(img, m, border, size))
    return np.clip(np.stack(frames), 0.0, 1.0)


def synth_triplet(I: np.ndarray, E: np.ndarray, instruction: str, traj: TransformTrajectory,
                  seed: int = 0, border: Border = "replicate") -> EditTriplet:
    I = np.asarray(I, dtype=np.float32)
    E = np.asarray(E, dtype=np.float32)
    if I.shape != E.shape:
        raise ValueError(f"original {I.shape} and edited {E.shape} images differ in size")
    return EditTriplet(apply_trajectory(I, traj, border), instruction, apply_trajectory(E, traj, border),
                       "image_synth", seed)


# ---------------------------------------------------------------------------
# image io


def load_image(path: str | Path) -> np.ndarray:
    """8-bit PNG to ``(C, H, W)`` float32 in ``[0, 1]``; C is 1 or 3."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "LA", "I", "I;16") else "RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def save_image(arr: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(arr)
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0]).save(path)
    elif u8.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(u8.transpose(1, 2, 0))).save(path)
    else:
        raise ValueError(f"can only save 1- or 3-channel images, got {u8.shape[0]}")


def load_frames(directory: str | Path) -> np.ndarray:
    """Sorted PNG sequence in ``directory`` as ``(T, C, H, W)``."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [load_image(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames in {directory} have differing shapes {sorted(shapes)}")
    return np.stack(frames)


def save_frames(video: np.ndarray, directory: str | Path, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, frame in enumerate(video):
        p = directory / f"{prefix}_{i:04d}.png"
        save_image(frame, p)
        out.append(p)
    return out
