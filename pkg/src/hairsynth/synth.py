"""Procedural hair images and the task inputs derived from them.

A sample is a smooth orientation field, a soft hair-region silhouette, a
line-integral-convolution (LIC) texture that streaks noise along the field,
and a set of brighter strands traced through the field. Sketches are a
random subset of those strands; low-resolution inputs are box-filtered
copies of the render.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from . import htx

SR_FACTORS = (4, 8)


@dataclass
class HairField:
    seed: int
    flow: np.ndarray  # H x W strand tangent angles in [0, pi)
    mask: np.ndarray  # H x W bool hair region
    strands: list  # (n, 2) float arrays of (x, y) sample points
    rendered: np.ndarray  # 3 x H x W in [0, 1]
    coverage: np.ndarray = dc_field(repr=False, default=None)  # H x W strand alpha

    @property
    def size(self):
        return self.rendered.shape[-1]


@dataclass
class SketchImage:
    mask: np.ndarray  # H x W, 1 inside hair
    strokes: np.ndarray  # H x W, 0 on strokes, 1 elsewhere

    def stroke_pixels(self):
        return self.strokes == 0

    def as_array(self):
        return np.stack([self.mask, self.strokes]).astype(np.float32)


def _flow_field(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0, np.pi)
    theta = np.full((size, size), base)
    for _ in range(3):
        fx, fy = rng.uniform(-1.5, 1.5, 2)
        theta += rng.uniform(0.15, 0.45) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return np.mod(theta, np.pi)


def _region(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cx, cy = size * rng.uniform(0.42, 0.58, 2)
    rx, ry = size * rng.uniform(0.36, 0.46, 2)
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0
    for k in (2, 3, 5):
        wobble = wobble + rng.uniform(0, 0.06) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    r = np.hypot((xx - cx) / rx, (yy - cy) / ry)
    return r <= wobble


def _sample_flow(flow, x, y):
    size = flow.shape[0]
    xi = np.clip(np.rint(x).astype(int), 0, size - 1)
    yi = np.clip(np.rint(y).astype(int), 0, size - 1)
    return flow[yi, xi]


def _lic(flow, noise, half_len=7, step=1.0):
    """Average ``noise`` along the field's streamlines through every pixel."""
    size = flow.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    acc = noise.copy()
    weight = np.ones_like(noise)
    for sign in (1.0, -1.0):
        x, y = xx.copy(), yy.copy()
        prev = None
        for _ in range(half_len):
            th = _sample_flow(flow, x, y)
            dx, dy = np.cos(th), np.sin(th)
            if prev is not None:
                flip = dx * prev[0] + dy * prev[1] < 0
                dx, dy = np.where(flip, -dx, dx), np.where(flip, -dy, dy)
            else:
                dx, dy = sign * dx, sign * dy
            prev = (dx, dy)
            x, y = x + step * dx, y + step * dy
            acc += map_coordinates(noise, [y, x], order=1, mode="reflect")
            weight += 1.0
    return acc / weight


def trace_strand(flow, mask, start, length, step=0.5):
    """Euler-trace a polyline through ``flow`` in both directions from
    ``start``, staying inside ``mask``. Segment k points along the flow
    sampled at point k."""
    size = flow.shape[0]

    def inside(p):
        xi, yi = int(round(p[0])), int(round(p[1]))
        return 0 <= xi < size and 0 <= yi < size and mask[yi, xi]

    halves = []
    for sign in (1.0, -1.0):
        pts = [np.asarray(start, float)]
        prev = None
        for _ in range(int(length / (2 * step))):
            th = _sample_flow(flow, pts[-1][0], pts[-1][1])
            d = np.array([np.cos(th), np.sin(th)])
            if prev is None:
                d = sign * d
            elif d @ prev < 0:
                d = -d
            nxt = pts[-1] + step * d
            if not inside(nxt):
                break
            prev = d
            pts.append(nxt)
        halves.append(pts)
    fwd, back = halves
    # walk the backward half in reverse so the polyline is continuous
    return np.array(back[::-1] + fwd[1:])


def _splat(points, size, sigma=0.55):
    """Anti-aliased coverage of a polyline: max of Gaussian splats."""
    cov = np.zeros((size, size))
    r = 2
    for x, y in points:
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        ys = np.arange(max(0, y0 - r), min(size, y0 + r + 2))
        xs = np.arange(max(0, x0 - r), min(size, x0 + r + 2))
        if ys.size == 0 or xs.size == 0:
            continue
        d2 = (xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2
        blob = np.exp(-0.5 * d2 / sigma**2)
        sub = cov[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
        np.maximum(sub, blob, out=sub)
    return cov


def synth_ground_truth(seed: int, size: int = 64, strand_count: int = 32) -> HairField:
    if size < 8 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 8, got {size}")
    if strand_count < 1:
        raise ValueError("strand_count must be at least 1")
    rng = np.random.default_rng(seed)
    flow = _flow_field(rng, size)
    mask = _region(rng, size)
    noise = gaussian_filter(rng.normal(0, 1, (size, size)), 0.7)
    tex = _lic(flow, noise)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)

    inside = np.argwhere(mask)
    strands = []
    for _ in range(strand_count):
        yx = inside[rng.integers(len(inside))] + rng.uniform(-0.4, 0.4, 2)
        pts = trace_strand(flow, mask, (yx[1], yx[0]), rng.uniform(8, 22))
        if len(pts) >= 2:
            strands.append(pts)
    coverage = np.zeros((size, size))
    highlight = np.zeros((size, size))
    for pts in strands:
        cov = _splat(pts, size)
        b = rng.uniform(0.6, 1.0)
        highlight = np.maximum(highlight, cov * b)
        coverage = np.maximum(coverage, cov)

    hair_rgb = np.array([0.42, 0.28, 0.16]) * rng.uniform(0.7, 1.3, 3)
    light_rgb = np.array([0.95, 0.85, 0.7])
    soft = gaussian_filter(mask.astype(float), 0.6)
    yy = np.arange(size)[:, None] / size
    shade = 1.05 - 0.3 * yy
    lum = np.clip(0.55 + 0.22 * tex, 0.0, 1.2) * shade
    hair = hair_rgb[:, None, None] * lum[None] + 0.45 * highlight[None] * light_rgb[:, None, None]
    bg = np.array([0.07, 0.06, 0.06])[:, None, None] * np.ones((3, size, size))
    img = bg * (1 - soft[None]) + hair * soft[None]
    return HairField(seed, flow, mask, strands, np.clip(img, 0.0, 1.0), coverage)


def derive_sketch(field: HairField, stroke_fraction: float = 0.15) -> SketchImage:
    if not 0 < stroke_fraction <= 1:
        raise ValueError("stroke_fraction must lie in (0, 1]")
    rng = np.random.default_rng([field.seed, 7])
    n = len(field.strands)
    k = n if stroke_fraction == 1 else max(1, int(round(stroke_fraction * n)))
    chosen = sorted(rng.choice(n, size=k, replace=False)) if n else []
    size = field.size
    stroke = np.zeros((size, size), dtype=bool)
    for i in chosen:
        pts = field.strands[i]
        xi = np.clip(np.rint(pts[:, 0]).astype(int), 0, size - 1)
        yi = np.clip(np.rint(pts[:, 1]).astype(int), 0, size - 1)
        stroke[yi, xi] = True
    stroke &= field.mask
    return SketchImage(field.mask.astype(np.float32), np.where(stroke, 0.0, 1.0).astype(np.float32))


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    return image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def downsample_input(field: HairField, factor: int) -> np.ndarray:
    if factor not in SR_FACTORS:
        raise ValueError(f"factor must be one of {SR_FACTORS}, got {factor}")
    return box_downsample(field.rendered, factor)


def bicubic_upsample(image: np.ndarray, size: int) -> np.ndarray:
    """Per-channel bicubic resize of a C x h x w array to C x size x size."""
    out = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BICUBIC))
           for ch in np.asarray(image)]
    return np.clip(np.stack(out), 0.0, 1.0)


# --- on-disk dataset ---------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """C x H x W floats in [0,1] -> H x W x C uint8 (or H x W for one channel)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_png(path, image):
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_ids(seed: int, count: int, split_ratio: float = 0.8):
    if count < 5:
        raise ValueError("a dataset needs at least 5 samples")
    if not 0 < split_ratio < 1:
        raise ValueError("split_ratio must lie in (0, 1)")
    order = np.random.default_rng([seed, 1]).permutation(count)
    n_train = int(round(count * split_ratio))
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


def make_dataset(seed: int, count: int, split_ratio: float = 0.8, out_dir=None, size: int = 64,
                 strand_count: int = 32, stroke_fraction: float = 0.15) -> dict:
    """Generate ``count`` samples and a deterministic train/test split.

    Writes ``gt/``, ``sketch/``, ``lr4/``, ``lr8/`` and ``manifest.json`` under
    ``out_dir`` when given. Returns the manifest.
    """
    train, test = split_ids(seed, count, split_ratio)
    manifest = {
        "seed": seed,
        "count": count,
        "split_ratio": split_ratio,
        "train": [f"{i:04d}" for i in train],
        "test": [f"{i:04d}" for i in test],
        "params": {"size": size, "strand_count": strand_count, "stroke_fraction": stroke_fraction,
                   "sr_factors": list(SR_FACTORS)},
    }
    if out_dir is None:
        return manifest
    root = Path(out_dir)
    for sub in ("gt", "sketch", "lr4", "lr8"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(count):
        name = f"{i:04d}"
        fld = synth_ground_truth(sample_seed(seed, i), size, strand_count)
        save_png(root / "gt" / f"{name}.png", fld.rendered)
        htx.save(root / "sketch" / f"{name}.htx", derive_sketch(fld, stroke_fraction).as_array())
        for f in SR_FACTORS:
            save_png(root / f"lr{f}" / f"{name}.png", downsample_input(fld, f))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        mf = self.root / "manifest.json"
        if not mf.exists():
            raise FileNotFoundError(f"dataset manifest missing: {mf}")
        self.manifest = json.loads(mf.read_text())
        self._cache = {}

    @property
    def size(self):
        return self.manifest["params"]["size"]

    def split(self, name):
        return list(self.manifest[name])

    def sample(self, item: str) -> dict:
        if item not in self._cache:
            self._cache[item] = {
                "gt": load_png(self.root / "gt" / f"{item}.png"),
                "sketch": htx.load(self.root / "sketch" / f"{item}.htx"),
                "lr4": load_png(self.root / "lr4" / f"{item}.png"),
                "lr8": load_png(self.root / "lr8" / f"{item}.png"),
            }
        return self._cache[item]
