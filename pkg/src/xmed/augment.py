"""Deterministic, seedable on-the-fly image augmentation.

The pipeline rescales raw [0,255] pixels, then applies a random affine warp
(rotation up to 15 degrees, shifts up to 10% of each dimension, zoom within
10%, optional horizontal flip) with bilinear sampling and mirror reflection
at the borders. Every draw is a pure function of (seed, sample index,
epoch), so an augmented epoch stream is reproducible no matter how batches
are assembled.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ops import as_tensor4


@dataclass
class AugmentConfig:
    rescale: float = 1.0 / 255.0
    max_rotation_deg: float = 15.0
    max_shift_frac: float = 0.10
    max_zoom_frac: float = 0.10
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.max_shift_frac < 1 or not 0 <= self.max_zoom_frac < 1:
            raise ConfigError("shift/zoom fractions must be in [0, 1)")
        if self.max_rotation_deg < 0:
            raise ConfigError("max_rotation_deg must be >= 0")


@dataclass
class AffineParams:
    angle_deg: float
    dx_frac: float  # horizontal shift as a fraction of width
    dy_frac: float
    zoom: float
    flip: bool

    @property
    def is_identity(self):
        return (self.angle_deg == 0 and self.dx_frac == 0 and
                self.dy_frac == 0 and self.zoom == 1 and not self.flip)


IDENTITY = AffineParams(0.0, 0.0, 0.0, 1.0, False)


def rescale(image, factor=1.0 / 255.0):
    """Scale raw pixel values ([0,255] in, [0, factor*255] out)."""
    return np.asarray(image) * factor


def sample_params(config, sample_index, epoch):
    """Draw affine parameters from a stream keyed by (seed, index, epoch)."""
    key = (config.seed & 0xFFFFFFFFFFFFFFFF, int(sample_index), int(epoch))
    rng = np.random.default_rng(key)
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    dx = rng.uniform(-config.max_shift_frac, config.max_shift_frac)
    dy = rng.uniform(-config.max_shift_frac, config.max_shift_frac)
    zoom = rng.uniform(1 - config.max_zoom_frac, 1 + config.max_zoom_frac)
    flip = bool(rng.uniform() < 0.5) if config.hflip else False
    return AffineParams(angle, dx, dy, zoom, flip)


def reflect_index(i, length):
    """Mirror-without-edge-repeat index fold: pad of [1,2,3] is [3,2,|1,2,3|,2]."""
    if length == 1:
        return np.zeros_like(i) if isinstance(i, np.ndarray) else 0
    period = 2 * length - 2
    m = np.mod(i, period) if isinstance(i, np.ndarray) else i % period
    return np.where(m >= length, period - m, m) if isinstance(m, np.ndarray) \
        else (period - m if m >= length else m)


def apply_affine(image, params):
    """Inverse-mapped affine warp of one image about its center.

    Accepts (c,h,w) or a batch axis of 1; the output keeps the input's
    rank. The forward map is rotation(zoom(shift(p))), followed by an
    optional horizontal flip; sampling is bilinear and out-of-bounds
    coordinates reflect. Identity parameters reproduce the input
    bit-exactly.
    """
    arr = np.asarray(image)
    single = arr.ndim == 3
    image = as_tensor4(arr[None] if single else arr, "image")
    if image.shape[0] != 1:
        raise ValueError(f"apply_affine expects a single image (n=1), "
                         f"got n={image.shape[0]}")
    if params.is_identity:
        return arr.copy()
    _, c, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty = params.dy_frac * h
    tx = params.dx_frac * w

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    if params.flip:
        xx = (w - 1) - xx
    # invert: p = center - shift + (1/zoom) * R(-theta) (q - center)
    theta = math.radians(params.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    qy, qx = yy - cy, xx - cx
    sy = (cos_t * qy - sin_t * qx) / params.zoom + cy - ty
    sx = (sin_t * qy + cos_t * qx) / params.zoom + cx - tx

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(image.dtype if image.dtype.kind == "f" else np.float64)
    fx = (sx - x0).astype(fy.dtype)
    y0r = reflect_index(y0, h)
    y1r = reflect_index(y0 + 1, h)
    x0r = reflect_index(x0, w)
    x1r = reflect_index(x0 + 1, w)

    out = np.empty_like(image, dtype=fy.dtype)
    for ch in range(c):
        plane = image[0, ch]
        top = plane[y0r, x0r] * (1 - fx) + plane[y0r, x1r] * fx
        bot = plane[y1r, x0r] * (1 - fx) + plane[y1r, x1r] * fx
        out[0, ch] = top * (1 - fy) + bot * fy
    if image.dtype.kind == "f":
        out = out.astype(image.dtype, copy=False)
    return out[0] if single else out


def augment_sample(image, config, sample_index, epoch):
    """Rescale then warp one raw [0,255] image; the training-split pipeline."""
    scaled = rescale(image, config.rescale)
    return apply_affine(scaled, sample_params(config, sample_index, epoch))
