"""Grad-CAM: class-discriminative heatmaps from a model's captured feature
map, plus the rendering pipeline (bilinear resize, colormap, blending).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import as_tensor4

# Piecewise-linear colormap control points (t, R, G, B).
_CMAP_T = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_CMAP_R = np.array([0.0, 0.0, 0.0, 255.0, 255.0])
_CMAP_G = np.array([0.0, 255.0, 255.0, 255.0, 0.0])
_CMAP_B = np.array([255.0, 255.0, 0.0, 0.0, 0.0])


@dataclass
class Heatmap:
    values: np.ndarray  # 2-D, in [0,1], peak exactly 1 unless all zero
    source_layer: str
    class_index: int


@dataclass
class OverlayImage:
    pixels: np.ndarray  # (h, w, 3) uint8
    alpha: float


def cam_weights(grad_capture):
    """Per-channel weights: spatial mean of the captured gradient."""
    g = as_tensor4(grad_capture, "captured gradient")
    if g.shape[0] != 1:
        raise ShapeError("cam_weights expects a single-image batch",
                         got=g.shape)
    return g[0].mean(axis=(1, 2))


def cam_map(activation, alpha):
    """ReLU of the alpha-weighted channel sum, as a 2-D grid."""
    a = as_tensor4(activation, "captured activation")
    alpha = np.asarray(alpha)
    if a.shape[0] != 1 or alpha.shape != (a.shape[1],):
        raise ShapeError("activation channels and weights disagree",
                         got=(a.shape, alpha.shape))
    raw = np.tensordot(alpha, a[0], axes=(0, 0))
    return np.maximum(raw, 0)


def normalize(raw_map):
    """Scale so the peak is 1; an identically-zero map is returned as-is."""
    raw_map = np.asarray(raw_map, dtype=np.float64)
    peak = raw_map.max(initial=0.0)
    if peak <= 0:
        return np.zeros_like(raw_map)
    return raw_map / peak


def upsample_bilinear(grid, out_h, out_w):
    """Align-corners bilinear resize of a 2-D grid.

    Source coordinate for output index i is i*(in-1)/(out-1); a size-1
    output axis samples the center of the input axis. Corner values are
    reproduced exactly.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError("upsample_bilinear expects a 2-D grid",
                         got=grid.shape)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be >= 1, got {out_h}x{out_w}")
    in_h, in_w = grid.shape

    def src_coords(n_out, n_in):
        if n_out == 1:
            return np.full(1, (n_in - 1) / 2)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    sy = src_coords(out_h, in_h)
    sx = src_coords(out_w, in_w)
    y0 = np.minimum(np.floor(sy).astype(int), in_h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def colormap(t):
    """Map t in [0,1] to RGB via blue→cyan→green→yellow→red, rounded
    half-up to 8 bits. Accepts scalars or arrays; returns uint8 with a
    trailing RGB axis."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(t, _CMAP_T, _CMAP_R),
                    np.interp(t, _CMAP_T, _CMAP_G),
                    np.interp(t, _CMAP_T, _CMAP_B)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def _to_rgb(image):
    """(h,w), (h,w,1), (h,w,3), (1,h,w) or (3,h,w) -> (h,w,3) float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[2] not in (1, 3):
        img = np.moveaxis(img, 0, 2)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError("expected a grayscale or RGB image",
                         got=np.asarray(image).shape)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def overlay(image, heatmap, alpha=0.4):
    """Blend the colormapped heatmap over the image.

    `heatmap` is a Heatmap or a 2-D [0,1] grid matching the image's h×w.
    Returns an OverlayImage; with alpha=0 the pixels equal the (RGB) input.
    """
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must be in [0,1], got {alpha}")
    heat = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    rgb = _to_rgb(image)
    if heat.shape != rgb.shape[:2]:
        raise ShapeError("heatmap size does not match image",
                         got=heat.shape, expected=rgb.shape[:2])
    blended = (1 - alpha) * rgb + alpha * colormap(heat).astype(np.float64)
    return OverlayImage(np.floor(blended + 0.5).astype(np.uint8), alpha)


def explain(model, image, class_index=None, alpha=0.4):
    """Full pipeline: forward with capture, backprop the class logit to the
    captured layer, weight/ReLU/normalize, resize to the image, blend.

    `image` is a single raw [0,255] image shaped like the model input
    (an extra leading batch axis of 1 is allowed). The class defaults to
    the model's prediction. Returns (Heatmap, OverlayImage); the heatmap
    is rescaled after resizing so its peak is exactly 1.
    """
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape != (1,) + model.input_shape:
        raise ShapeError("image does not match the model input",
                         got=x.shape, expected=(1,) + model.input_shape)
    logits, captured, caches = model.forward(x * np.float32(1 / 255),
                                             mode="infer")
    if class_index is None:
        class_index = int(np.argmax(logits[0]))
    elif not 0 <= class_index < model.num_classes:
        raise ConfigError(
            f"class index {class_index} out of range for "
            f"{model.num_classes} classes")
    grad = model.backward_to_capture(caches, class_index)
    small = normalize(cam_map(captured, cam_weights(grad)))
    up = upsample_bilinear(small, x.shape[2], x.shape[3])
    values = normalize(up)
    heat = Heatmap(values, model.capture_layer, class_index)
    return heat, overlay(x[0], heat, alpha)
