"""8-bit image codecs, preprocessing and geometric augmentation.

Images are stored as ``uint8`` arrays of shape (height, width, channels).
Only binary PGM (P5) and PPM (P6) with maxval 255 are decoded; anything else
can be converted to one of those beforehand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .tensor import Tensor


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported PGM/PPM data."""


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # uint8, (height, width, channels)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image pixels must be (H, W, 1|3), got {px.shape}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


# --------------------------------------------------------------------- codecs


def _read_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"truncated header at byte {start}")
    return data[start:pos], pos


def decode_image(data: bytes) -> Image:
    """Decode a binary PGM (P5) or PPM (P6) with maxval 255."""
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic[:8]!r} at byte 0 (expected P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    values = []
    for label in ("width", "height", "maxval"):
        tok_start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad {label} {tok[:16]!r} near byte {tok_start}")
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError(f"image dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255 is accepted)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(f"truncated payload at byte {pos}: expected {expected} bytes, "
                               f"got {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(px.copy())


def encode_image(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


def read_image(path) -> Image:
    return decode_image(Path(path).read_bytes())


def write_image(img: Image, path) -> None:
    Path(path).write_bytes(encode_image(img))


# -------------------------------------------------------------- pixel ops


def _round_u8(values: np.ndarray) -> np.ndarray:
    # round half up, then clamp
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return Image(_round_u8(y)[:, :, None])


def equalize_histogram(img: Image) -> Image:
    """Classic CDF remap: ``round((cdf(v) - cdf_min) / (N - cdf_min) * 255)``."""
    if img.channels != 1:
        raise ValueError("histogram equalization needs a single-channel image")
    flat = img.pixels.reshape(-1)
    n = flat.size
    cdf = np.cumsum(np.bincount(flat, minlength=256))
    cdf_min = cdf[cdf > 0][0]
    if n == cdf_min:
        return img
    lut = _round_u8((cdf - cdf_min) / (n - cdf_min) * 255.0)
    return Image(lut[img.pixels])


def _axis_coords(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    """Half-pixel-centre bilinear resize, rounded back to 8 bits."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    px = img.pixels.astype(np.float64)
    x0, x1, fx = _axis_coords(img.width, out_w)
    y0, y1, fy = _axis_coords(img.height, out_h)
    fx = fx[None, :, None]
    top = px[y0][:, x0] * (1 - fx) + px[y0][:, x1] * fx
    bot = px[y1][:, x0] * (1 - fx) + px[y1][:, x1] * fx
    fy = fy[:, None, None]
    return Image(_round_u8(top * (1 - fy) + bot * fy))


def horizontal_flip(img: Image) -> Image:
    return Image(img.pixels[:, ::-1, :])


def _rotation(degrees: float):
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    # exact values at multiples of 90 degrees keep lattice symmetries exact
    c, s = round(c, 15), round(s, 15)
    return c, s


def rotate(img: Image, degrees: float) -> Image:
    """Rotate about the image centre with bilinear resampling; zero fill.

    Positive angles turn the picture counter-clockwise as displayed (y axis
    pointing down). :func:`rotate_points` applies the same mapping to
    coordinates.
    """
    if abs(degrees) > 45 and degrees % 90:
        raise ValueError(f"rotation limited to |degrees| <= 45 or multiples of 90, got {degrees}")
    if degrees == 0:
        return img
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = _rotation(degrees)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    # inverse map: output pixel -> source location
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(np.intp)
    y0 = np.floor(syc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sxc - x0)[..., None]
    fy = (syc - y0)[..., None]
    px = img.pixels.astype(np.float64)
    val = (px[y0, x0] * (1 - fx) * (1 - fy) + px[y0, x1] * fx * (1 - fy)
           + px[y1, x0] * (1 - fx) * fy + px[y1, x1] * fx * fy)
    val = np.where(inside[..., None], val, 0.0)
    return Image(_round_u8(val))


def flip_points(points: np.ndarray, width: int) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, 0] = (width - 1) - out[:, 0]
    return out


def rotate_points(points: np.ndarray, degrees: float, width: int, height: int) -> np.ndarray:
    """Where each point lands after ``rotate(img, degrees)``."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = _rotation(degrees)
    pts = np.asarray(points, dtype=np.float64)
    dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
    return np.stack([c * dx + s * dy + cx, -s * dx + c * dy + cy], axis=1)


# --------------------------------------------------------------- augment


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rot_deg: float = 10.0


def draw_transform(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Draw (flip, angle). Always consumes two uniforms so streams stay aligned."""
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg))
    return flip, angle


def apply_transform(img: Image, flip: bool, angle: float,
                    points: Optional[np.ndarray] = None):
    if flip:
        img = horizontal_flip(img)
        if points is not None:
            points = flip_points(points, img.width)
    if angle:
        img = rotate(img, angle)
        if points is not None:
            points = rotate_points(points, angle, img.width, img.height)
    return img, points


def augment(img: Image, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Image:
    flip, angle = draw_transform(rng, cfg)
    return apply_transform(img, flip, angle)[0]


def augment_with_points(img: Image, points: np.ndarray, rng: np.random.Generator,
                        cfg: AugmentConfig = AugmentConfig()):
    """Augment an image and carry its landmark coordinates along."""
    flip, angle = draw_transform(rng, cfg)
    return apply_transform(img, flip, angle, points)


# ---------------------------------------------------------------- bridge


def replicate_channels(img: Image) -> Tensor:
    """Single-channel image -> float32 tensor (3, H, W) with values v / 255."""
    if img.channels != 1:
        raise ValueError("replicate_channels needs a single-channel image")
    plane = img.pixels[:, :, 0].astype(np.float32) / np.float32(255.0)
    return Tensor(np.repeat(plane[None], 3, axis=0))


@dataclass(frozen=True)
class PreprocConfig:
    side: int = 224
    equalize: bool = True

    def to_dict(self) -> dict:
        return {"side": self.side, "equalize": self.equalize}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocConfig":
        return cls(side=int(d.get("side", 224)), equalize=bool(d.get("equalize", True)))


def preprocess(img: Image, cfg: PreprocConfig = PreprocConfig()) -> Image:
    """Resize to ``side`` x ``side``, convert to gray, equalize."""
    out = to_grayscale(resize_bilinear(img, cfg.side, cfg.side))
    return equalize_histogram(out) if cfg.equalize else out
