"""Fifteen common image corruptions at severities 1-5.

Parameters follow the usual common-corruption benchmark tables. Spatial
parameters (kernel radii, displacements, noise scales in pixels) were tuned
for 224-pixel images and are multiplied by ``min(H, W) / 224`` with a floor
of one pixel. Each operator takes a ``uint8`` (H, W, 3) image, a severity in
1..5 and a numpy ``Generator``, and returns a ``uint8`` image. Kernels are
listed in ``docs/corruptions.md``.
"""

from __future__ import annotations

import io
from typing import Callable

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

Corruption = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def _f(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) / 255.0


def _u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _scale(x: np.ndarray) -> float:
    return min(x.shape[:2]) / 224.0


def _pick(table, severity):
    if not 1 <= severity <= len(table):
        raise ValueError(f"severity must be in 1..{len(table)}, got {severity}")
    return table[severity - 1]


def _blur_channels(x, kernel):
    return np.stack([ndimage.convolve(x[..., c], kernel, mode="reflect") for c in range(3)], axis=-1)


def gaussian_noise(img, severity, rng):
    c = _pick([0.08, 0.12, 0.18, 0.26, 0.38], severity)
    x = _f(img)
    return _u8(x + rng.normal(0.0, c, x.shape))


def shot_noise(img, severity, rng):
    c = _pick([60, 25, 12, 5, 3], severity)
    return _u8(rng.poisson(_f(img) * c) / c)


def impulse_noise(img, severity, rng):
    c = _pick([0.03, 0.06, 0.09, 0.17, 0.27], severity)
    x = _f(img).copy()
    u = rng.uniform(size=x.shape)
    x[u < c / 2] = 0.0
    x[(u >= c / 2) & (u < c)] = 1.0
    return _u8(x)


def _disk(radius: float) -> np.ndarray:
    r = max(1, int(np.ceil(radius)))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def defocus_blur(img, severity, rng):
    radius, alias = _pick([(3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)], severity)
    k = ndimage.gaussian_filter(_disk(max(1.0, radius * _scale(img))), alias)
    return _u8(_blur_channels(_f(img), k / k.sum()))


def glass_blur(img, severity, rng):
    sigma, delta, iterations = _pick([(0.7, 1, 2), (0.9, 2, 1), (1, 2, 3), (1.1, 3, 2), (1.5, 4, 2)], severity)
    x = ndimage.gaussian_filter(_f(img), (sigma, sigma, 0))
    h, w = x.shape[:2]
    d = max(1, int(round(delta * _scale(img) * 2)))
    rows, cols = np.mgrid[0:h, 0:w]
    for _ in range(iterations):
        dr = rng.integers(-d, d + 1, size=(h, w))
        dc = rng.integers(-d, d + 1, size=(h, w))
        x = x[np.clip(rows + dr, 0, h - 1), np.clip(cols + dc, 0, w - 1)]
    return _u8(ndimage.gaussian_filter(x, (sigma, sigma, 0)))


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    length = max(2, length)
    k = np.zeros((2 * length + 1, 2 * length + 1))
    t = np.deg2rad(angle_deg)
    for s in np.linspace(0, length, 4 * length + 1):
        k[int(round(length - s * np.sin(t))), int(round(length + s * np.cos(t)))] = 1.0
    return k / k.sum()


def motion_blur(img, severity, rng):
    _, sigma = _pick([(10, 3), (15, 5), (15, 8), (15, 12), (20, 15)], severity)
    length = int(round(sigma * _scale(img) * 2))
    return _u8(_blur_channels(_f(img), _line_kernel(length, rng.uniform(-45, 45))))


def _center_zoom(x: np.ndarray, factor: float) -> np.ndarray:
    h, w = x.shape[:2]
    zoomed = ndimage.zoom(x, (factor, factor, 1), order=1)
    top = (zoomed.shape[0] - h) // 2
    left = (zoomed.shape[1] - w) // 2
    return zoomed[top:top + h, left:left + w]


def zoom_blur(img, severity, rng):
    factors = _pick(
        [
            np.arange(1, 1.11, 0.01),
            np.arange(1, 1.16, 0.01),
            np.arange(1, 1.21, 0.02),
            np.arange(1, 1.26, 0.02),
            np.arange(1, 1.31, 0.03),
        ],
        severity,
    )
    x = _f(img)
    out = x.copy()
    for z in factors[1:]:
        out += _center_zoom(x, z)
    return _u8(out / len(factors))


def snow(img, severity, rng):
    loc, scale, zoom, threshold, length, brighten = _pick(
        [
            (0.1, 0.3, 3, 0.5, 10, 0.8),
            (0.2, 0.3, 2, 0.5, 12, 0.7),
            (0.55, 0.3, 4, 0.9, 12, 0.7),
            (0.55, 0.3, 4.5, 0.85, 12, 0.65),
            (0.55, 0.3, 2.5, 0.85, 12, 0.55),
        ],
        severity,
    )
    x = _f(img)
    h, w = x.shape[:2]
    layer = rng.normal(loc, scale, (h, w))
    layer = _center_zoom(layer[..., None], zoom)[..., 0]
    layer[layer < threshold] = 0.0
    layer = ndimage.convolve(layer, _line_kernel(max(2, int(length * _scale(img))), rng.uniform(-135, -45)), mode="reflect")
    gray = x.mean(axis=2, keepdims=True) * 1.5 + 0.5
    x = brighten * x + (1 - brighten) * np.maximum(x, gray)
    return _u8(x + layer[..., None] + np.rot90(layer, 2)[..., None])


def _plasma(h: int, w: int, rng: np.random.Generator, decay: float = 3.0) -> np.ndarray:
    """Fractal noise from summed, upsampled octaves of white noise, scaled to [0, 1]."""
    size = max(h, w)
    out = np.zeros((size, size))
    amp, cells = 1.0, 2
    while cells <= size:
        coarse = rng.uniform(-1, 1, (cells, cells))
        out += amp * ndimage.zoom(coarse, size / cells, order=1)[:size, :size]
        amp /= decay / 2.0
        cells *= 2
    out = out[:h, :w]
    out -= out.min()
    return out / (out.max() + 1e-12)


def frost(img, severity, rng):
    a, b = _pick([(1, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)], severity)
    x = _f(img)
    h, w = x.shape[:2]
    crystals = _plasma(h, w, rng, decay=1.6)
    streaks = ndimage.convolve(rng.uniform(size=(h, w)) ** 8, _line_kernel(max(2, h // 16), rng.uniform(0, 180)))
    ice = np.clip(0.6 * crystals + 0.4 * streaks / (streaks.max() + 1e-12), 0, 1)
    ice = np.stack([ice * 0.9, ice * 0.95, ice], axis=-1)
    return _u8(a * x + b * ice)


def fog(img, severity, rng):
    c0, c1 = _pick([(1.5, 2), (2.0, 2), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)], severity)
    x = _f(img)
    peak = x.max()
    x = x + c0 * _plasma(*x.shape[:2], rng, decay=c1)[..., None]
    return _u8(x * peak / (peak + c0))


def _hsv_adjust(img, fn):
    hsv = rgb_to_hsv(_f(img))
    hsv = fn(hsv)
    return _u8(hsv_to_rgb(np.clip(hsv, 0, 1)))


def brightness(img, severity, rng):
    c = _pick([0.1, 0.2, 0.3, 0.4, 0.5], severity)

    def up(hsv):
        hsv[..., 2] = np.clip(hsv[..., 2] + c, 0, 1)
        return hsv

    return _hsv_adjust(img, up)


def contrast(img, severity, rng):
    c = _pick([0.4, 0.3, 0.2, 0.1, 0.05], severity)
    x = _f(img)
    means = x.mean(axis=(0, 1), keepdims=True)
    return _u8((x - means) * c + means)


def elastic_transform(img, severity, rng):
    # smooth random displacement field, peak magnitude a fraction of the image side
    magnitude, sigma = _pick([(0.01, 0.07), (0.02, 0.06), (0.03, 0.05), (0.045, 0.04), (0.06, 0.03)], severity)
    x = _f(img)
    h, w = x.shape[:2]
    side = min(h, w)
    fields = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), max(1.0, sigma * side))
        fields.append(d / max(np.abs(d).max(), 1e-12) * magnitude * side)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [rows + fields[0], cols + fields[1]]
    out = np.stack([ndimage.map_coordinates(x[..., c], coords, order=1, mode="reflect") for c in range(3)], axis=-1)
    return _u8(out)


def pixelate(img, severity, rng):
    c = _pick([0.6, 0.5, 0.4, 0.3, 0.25], severity)
    h, w = img.shape[:2]
    small = Image.fromarray(img).resize((max(1, int(w * c)), max(1, int(h * c))), Image.BOX)
    return np.asarray(small.resize((w, h), Image.NEAREST))


def jpeg_compression(img, severity, rng):
    q = _pick([25, 18, 15, 10, 7], severity)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=q)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"))


CORRUPTIONS: dict[str, Corruption] = {
    "gaussian_noise": gaussian_noise,
    "shot_noise": shot_noise,
    "impulse_noise": impulse_noise,
    "defocus_blur": defocus_blur,
    "glass_blur": glass_blur,
    "motion_blur": motion_blur,
    "zoom_blur": zoom_blur,
    "snow": snow,
    "frost": frost,
    "fog": fog,
    "brightness": brightness,
    "contrast": contrast,
    "elastic_transform": elastic_transform,
    "pixelate": pixelate,
    "jpeg_compression": jpeg_compression,
}


def corrupt(img: np.ndarray, name: str, severity: int, seed: int = 0) -> np.ndarray:
    if name not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {name!r}")
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("corruptions expect an (H, W, 3) uint8 image")
    rng = np.random.default_rng([seed, list(CORRUPTIONS).index(name), severity])
    return CORRUPTIONS[name](img, severity, rng)
