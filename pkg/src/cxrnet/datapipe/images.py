"""Grayscale image decoding, geometric augmentation and resizing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DecodeError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
LUMA = (0.299, 0.587, 0.114)


@dataclass
class ImageBuffer:
    """Single-channel image, ``pixels`` is H x W float64 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def sniff_format(path):
    """Return ``"pgm"``, ``"png"`` or ``None`` from the file's leading bytes."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError:
        return None
    if head.startswith(b"P5"):
        return "pgm"
    if head == PNG_SIGNATURE:
        return "png"
    return None


def load_image(path) -> ImageBuffer:
    """Decode an 8-bit PGM (P5) or PNG file. RGB is reduced to luma."""
    fmt = sniff_format(path)
    if fmt is None:
        raise DecodeError(f"{path}: not a PGM (P5) or PNG file")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.getchannel(0), dtype=np.float64)
            elif im.mode in ("RGB", "RGBA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = rgb @ np.array(LUMA)
            else:
                raise DecodeError(f"{path}: unsupported pixel mode {im.mode}")
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"{path}: {exc}") from exc
    return ImageBuffer(arr / 255.0)


def save_pgm(path, pixels):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def save_png(path, pixels):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# -- sampling helpers


def _snap(coords, tol=1e-9):
    r = np.rint(coords)
    return np.where(np.abs(coords - r) < tol, r, coords)


def sample_bilinear(pixels, rows, cols):
    """Bilinear lookup at fractional (row, col) positions; outside reads as 0."""
    h, w = pixels.shape
    rows, cols = _snap(rows), _snap(cols)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0
    out = np.zeros(rows.shape)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape)
            vals[inside] = pixels[rr[inside], cc[inside]]
            out += wr * wc * vals
    return out


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    """Counter-clockwise rotation (as displayed) about the image centre."""
    h, w = img.pixels.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_x = cx + dx * cos - dy * sin
    src_y = cy + dx * sin + dy * cos
    return ImageBuffer(sample_bilinear(img.pixels, src_y, src_x))


def displacement_field(h, w, amplitude, seed, grid=4):
    """Smooth (dy, dx) field in pixels with every component bounded by ``amplitude * w``."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=(2, grid, grid))
    # corner-aligned upsampling of the coarse grid keeps values inside [-1, 1]
    gy = np.linspace(0, grid - 1, h)
    gx = np.linspace(0, grid - 1, w)
    ry, rx = np.meshgrid(gy, gx, indexing="ij")
    field = np.stack([sample_bilinear(c, ry, rx) for c in coarse])
    return field * amplitude * w


def distort(img: ImageBuffer, amplitude: float, seed: int) -> ImageBuffer:
    h, w = img.pixels.shape
    dy, dx = displacement_field(h, w, amplitude, seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ImageBuffer(sample_bilinear(img.pixels, yy + dy, xx + dx))


def resize_bilinear(pixels, out_h, out_w):
    """Half-pixel-centre bilinear resize (the align_corners=False convention)."""
    in_h, in_w = pixels.shape
    if (in_h, in_w) == (out_h, out_w):
        return pixels.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(in_h, out_h)
    c0, c1, fc = axis(in_w, out_w)
    top = pixels[r0][:, c0] * (1 - fc) + pixels[r0][:, c1] * fc
    bot = pixels[r1][:, c0] * (1 - fc) + pixels[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def resize_normalize(img: ImageBuffer, target, per_image=False, dtype=np.float32):
    """Resize to ``target = (H, W)`` and return a 1 x H x W array in [0, 1].

    Pixels are already scaled by the fixed 8-bit range at decode time;
    ``per_image=True`` additionally stretches each image's own min..max.
    """
    h, w = target
    out = resize_bilinear(img.pixels, h, w)
    if per_image:
        lo, hi = out.min(), out.max()
        out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
    return np.clip(out, 0.0, 1.0).astype(dtype)[None]
