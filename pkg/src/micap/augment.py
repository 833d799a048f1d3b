"""Seeded image augmentation on ``[B x] 3 x S x S`` arrays in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .rng import make_generator

# JPEG luminance quantisation table (quality 50)
_JPEG_Q50 = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


@dataclass
class AugmentPolicy:
    crop_p: float = 0.5
    crop_min_scale: float = 0.6
    jitter_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    gaussian_p: float = 0.2
    noise_sigma: float = 0.05
    salt_pepper_p: float = 0.1
    salt_pepper_amount: float = 0.01
    jpeg_p: float = 0.2
    jpeg_quality: int = 50

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(crop_p=0.0, jitter_p=0.0, gaussian_p=0.0, salt_pepper_p=0.0, jpeg_p=0.0)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize over the last two axes."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = arr[..., y0, :] * (1 - fy)[:, None] + arr[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def _random_crop(img, rng, min_scale):
    _, s, _ = img.shape
    scale = rng.uniform(min_scale, 1.0)
    side = max(1, int(round(s * np.sqrt(scale))))
    top = rng.integers(0, s - side + 1)
    left = rng.integers(0, s - side + 1)
    return bilinear_resize(img[:, top:top + side, left:left + side], s, s)


def _color_jitter(img, rng, p: AugmentPolicy):
    b = 1.0 + rng.uniform(-p.brightness, p.brightness)
    c = 1.0 + rng.uniform(-p.contrast, p.contrast)
    sat = 1.0 + rng.uniform(-p.saturation, p.saturation)
    hue = rng.uniform(-p.hue, p.hue) * 2 * np.pi
    img = img * b
    img = (img - img.mean()) * c + img.mean()
    yiq = np.tensordot(_RGB2YIQ, img, axes=1)
    cos, sin = np.cos(hue), np.sin(hue)
    i, q = yiq[1].copy(), yiq[2].copy()
    yiq[1] = sat * (cos * i - sin * q)
    yiq[2] = sat * (sin * i + cos * q)
    return np.tensordot(_YIQ2RGB, yiq, axes=1)


def _block_compress(img, quality):
    """Quantise 8x8 block DCT coefficients per channel, as a lossy codec would."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    q = np.maximum(np.floor((_JPEG_Q50 * scale + 50) / 100), 1) / 255.0
    c, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") - 0.5
    blocks = padded.reshape(c, (h + ph) // 8, 8, (w + pw) // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 1, 3, 2, 4).reshape(c, h + ph, w + pw)
    return rec[:, :h, :w] + 0.5


def _augment_one(img, policy: AugmentPolicy, rng):
    out = img.astype(np.float64)
    if rng.random() < policy.crop_p:
        out = _random_crop(out, rng, policy.crop_min_scale)
    if rng.random() < policy.jitter_p:
        out = _color_jitter(out, rng, policy)
    if rng.random() < policy.gaussian_p:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape)
    if rng.random() < policy.salt_pepper_p:
        hit = rng.random(out.shape[1:]) < policy.salt_pepper_amount
        salt = rng.random(out.shape[1:]) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), out)
    if rng.random() < policy.jpeg_p:
        out = _block_compress(out, policy.jpeg_quality)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment(images: np.ndarray, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """Pure function of (images, policy, seed); output has the input's shape and dtype."""
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    rng = make_generator(seed, "augment")
    out = np.stack([_augment_one(img, policy, rng) for img in batch])
    return out[0] if single else out
