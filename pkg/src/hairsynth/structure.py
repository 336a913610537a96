"""Oriented Gabor bank and the differentiable structure extraction layer.

Coordinates: ``u`` runs along image columns (x, rightwards) and ``v`` along
rows (y, downwards). A kernel at angle ``theta`` oscillates along the unit
vector (cos theta, sin theta) in (u, v), so it responds to stripes that run
perpendicular to that direction. A hair strand with tangent angle ``phi``
therefore lights up the kernel at ``phi + pi/2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LUMA = (0.299, 0.587, 0.114)


def gabor_value(u, v, theta, sigma_u, sigma_v, wavelength):
    """Raw even-symmetric cosine Gabor evaluated at integer offset (u, v)."""
    ut = u * np.cos(theta) + v * np.sin(theta)
    vt = -u * np.sin(theta) + v * np.cos(theta)
    return np.exp(-0.5 * (ut**2 / sigma_u**2 + vt**2 / sigma_v**2)) * np.cos(2 * np.pi * ut / wavelength)


def min_support(sigma_u, sigma_v):
    return 2 * math.ceil(2 * max(sigma_u, sigma_v)) + 1


@dataclass(frozen=True)
class GaborBank:
    sigma_u: float
    sigma_v: float
    wavelength: float
    orientations: tuple
    support: int
    kernels: np.ndarray  # K x 1 x support x support, DC-corrected
    raw_kernels: np.ndarray  # same, before DC correction
    dc_offsets: np.ndarray  # per-kernel mean removed by the correction

    @property
    def count(self):
        return len(self.orientations)

    def angles(self, index):
        """Map an index map to angles in radians."""
        return np.asarray(self.orientations)[index]

    def kernel_tensor(self, dtype=np.float64):
        return Tensor(self.kernels.astype(dtype))


def build_bank(sigma_u=1.8, sigma_v=2.4, wavelength=4.0, count=8, support=11, dc_correct=True) -> GaborBank:
    if min(sigma_u, sigma_v, wavelength) <= 0:
        raise ValueError("Gabor parameters must be positive")
    if count < 2:
        raise ValueError("a bank needs at least two orientations")
    if support % 2 == 0:
        raise ValueError(f"support must be odd, got {support}")
    if support < min_support(sigma_u, sigma_v):
        raise ValueError(f"support {support} is below {min_support(sigma_u, sigma_v)} for these spreads")
    r = support // 2
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    thetas = tuple(k * np.pi / count for k in range(count))
    raw = np.stack([gabor_value(u, v, t, sigma_u, sigma_v, wavelength) for t in thetas])
    # averaging with the point reflection makes K(u,v) == K(-u,-v) bit-for-bit
    raw = 0.5 * (raw + raw[:, ::-1, ::-1])
    offsets = raw.mean(axis=(1, 2)) if dc_correct else np.zeros(count)
    ker = raw - offsets[:, None, None]
    return GaborBank(
        sigma_u, sigma_v, wavelength, thetas, support,
        ker[:, None].copy(), raw[:, None].copy(), offsets,
    )


def luminance(image: Tensor) -> Tensor:
    """Rec. 601 luma for 3-channel input; 1-channel input passes through."""
    if image.ndim not in (3, 4):
        raise ShapeError(f"expected C x H x W or N x C x H x W, got {image.shape}")
    c = image.shape[-3]
    if c == 1:
        return image
    if c != 3:
        raise ShapeError(f"luminance needs 1 or 3 channels, got {c}")
    w = Tensor(np.array(LUMA, dtype=image.dtype).reshape(1, 3, 1, 1))
    return T.conv2d(image, w, padding="zero")


def apply_g(gray: Tensor, bank: GaborBank):
    """One pass of the layer: filter, then per-pixel max/argmax of |response|.

    Returns ``(texture, index)``; texture keeps a singleton channel axis.
    """
    responses = T.conv2d(gray, bank.kernel_tensor(gray.dtype), padding="reflect")
    return T.channel_max(T.tabs(responses))


@dataclass
class StructurePair:
    texture: Tensor
    orientation: Tensor
    raw_texture: Tensor
    raw_orientation: Tensor
    index: np.ndarray
    raw_index: np.ndarray


def extract(image: Tensor, bank: GaborBank) -> StructurePair:
    """Duplicated application: g on the luminance, then g again on the first
    texture map. Texture outputs stay on the tape; orientations are constants."""
    if not np.all(np.isfinite(image.data)):
        raise ValueError("image contains non-finite values")
    t0, i0 = apply_g(luminance(image), bank)
    t1, i1 = apply_g(t0, bank)
    theta0 = Tensor(bank.angles(i0)[..., None, :, :].astype(image.dtype))
    theta1 = Tensor(bank.angles(i1)[..., None, :, :].astype(image.dtype))
    return StructurePair(t1, theta1, t0, theta0, i1, i0)


def texture_map(image: Tensor, bank: GaborBank) -> Tensor:
    """Single application of g; the map compared by the texture loss."""
    return apply_g(luminance(image), bank)[0]


def encode_orientation(pair: StructurePair) -> Tensor:
    """Stack (I_t, sin 2θ, cos 2θ) along the channel axis."""
    theta = pair.orientation.data
    s = Tensor(np.sin(2 * theta))
    c = Tensor(np.cos(2 * theta))
    return T.concat([pair.texture, s, c], axis=-3)


def colorize_orientation(theta: np.ndarray) -> np.ndarray:
    """HSV-wheel colouring of a π-periodic angle map, returns H x W x 3 in [0, 1]."""
    h = (np.asarray(theta) % np.pi) / np.pi * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    one = np.ones_like(f)
    zero = np.zeros_like(f)
    table = [
        (one, f, zero), (1 - f, one, zero), (zero, one, f),
        (zero, 1 - f, one), (f, zero, one), (one, zero, 1 - f),
    ]
    rgb = np.zeros(theta.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        m = i == k
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    return rgb


def circular_entropy(index: np.ndarray, bins: int) -> float:
    """Shannon entropy (nats) of the orientation-bin histogram."""
    p = np.bincount(np.asarray(index).ravel(), minlength=bins) / np.asarray(index).size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
