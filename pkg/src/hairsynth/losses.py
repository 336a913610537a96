"""Training losses and the weighted generator objective.

All functions take and return :class:`~hairsynth.tensor.Tensor` objects and
are differentiable through the active tape. Images may be a single
``C x H x W`` tensor or an ``N x C x H x W`` batch; batch reductions are
means over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .structure import GaborBank, texture_map
from .tensor import ShapeError, Tensor

ADV_EPS = 1e-7
# per-channel statistics that ImageNet-trained feature networks expect at input
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    w_pixel: float = 100.0
    w_adv: float = 1.0
    w_style: float = 10.0
    w_fm: float = 10.0

    def __post_init__(self):
        vals = (self.w_pixel, self.w_adv, self.w_style, self.w_fm)
        if any(w < 0 for w in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(w > 0 for w in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_dict(self):
        return {"pixel": self.w_pixel, "adv": self.w_adv, "style": self.w_style, "fm": self.w_fm}


def _check_pair(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: output {a.shape} and target {b.shape} differ")


def pixel_loss(output: Tensor, target: Tensor) -> Tensor:
    _check_pair("pixel_loss", output, target)
    return T.mean(T.tabs(T.sub(target, output)))


def adv_loss_generator(scores: Tensor) -> Tensor:
    """Mean of -log D over every patch score in the batch."""
    return T.scale(T.mean(T.log(T.clamp(scores, ADV_EPS, 1.0 - ADV_EPS))), -1.0)


def disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Binary cross-entropy for the discriminator (real -> 1, fake -> 0)."""
    real = T.log(T.clamp(real_scores, ADV_EPS, 1.0 - ADV_EPS))
    fake = T.log(T.clamp(T.shift(T.scale(fake_scores, -1.0), 1.0), ADV_EPS, 1.0 - ADV_EPS))
    return T.scale(T.add(T.mean(real), T.mean(fake)), -1.0)


def gram(features: Tensor) -> Tensor:
    """Channel Gram matrix chi chi^T / (C H W); batched input gives N x C x C."""
    if features.ndim not in (3, 4):
        raise ShapeError(f"gram expects C x H x W features, got {features.shape}")
    c, h, w = features.shape[-3:]
    chi = T.reshape(features, features.shape[:-3] + (c, h * w))
    return T.scale(T.matmul(chi, T.transpose(chi)), 1.0 / (c * h * w))


class FeatureExtractor:
    """Frozen random conv stack standing in for a pretrained style network.

    Four 3x3 conv + leaky-ReLU layers; layers 2 and 4 halve the resolution
    with 2x average pooling. Activations after layers 2 and 3 are tapped.
    Three-channel input is first standardised with the usual ImageNet
    statistics, as a pretrained network would require; this also puts the
    style term on the same scale as the other losses.
    """

    def __init__(self, seed=1234, channels=(3, 16, 32, 64, 64), taps=(1, 2), dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.taps = tuple(taps)
        self.norm = None
        if channels[0] == 3:
            std = np.array(IMAGENET_STD)
            scale = np.diag(1.0 / std).reshape(3, 3, 1, 1)
            self.norm = (Tensor(scale.astype(dtype)), Tensor((-np.array(IMAGENET_MEAN) / std).astype(dtype)))
        self.weights = []
        self.biases = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = cin * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, 3, 3))
            self.weights.append(Tensor(w.astype(dtype)))
            self.biases.append(Tensor(rng.uniform(-0.1, 0.1, cout).astype(dtype)))

    def features(self, image: Tensor):
        out = []
        x = image
        if self.norm is not None:
            x = T.bias_add(T.conv2d(x, self.norm[0], padding="zero"), self.norm[1])
        last = max(self.taps)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.leaky_relu(T.bias_add(T.conv2d(x, w, padding="zero"), b))
            if i in self.taps:
                out.append(x)
            if i == last:
                break
            if i % 2 == 1:
                x = T.avgpool2x(x)
        return out


def style_loss(output: Tensor, target: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Sum over tapped layers of the squared Frobenius Gram difference."""
    _check_pair("style_loss", output, target)
    total = None
    for fo, ft in zip(extractor.features(output), extractor.features(target)):
        d = T.sub(gram(fo), gram(ft))
        term = T.tsum(T.square(d))
        total = term if total is None else T.add(total, term)
    if output.ndim == 4:
        total = T.scale(total, 1.0 / output.shape[0])
    return total


def fm_loss(real_features, fake_features) -> Tensor:
    """Sum over layers of the per-element mean L1 distance.

    ``real_features`` are treated as constants (their gradient is not used
    for the generator update).
    """
    if len(real_features) != len(fake_features):
        raise ShapeError(f"fm_loss: {len(real_features)} real vs {len(fake_features)} fake layers")
    if not fake_features:
        raise ShapeError("fm_loss: empty feature lists")
    total = None
    for r, f in zip(real_features, fake_features):
        _check_pair("fm_loss", f, r)
        term = T.mean(T.tabs(T.sub(Tensor(r.data), f)))
        total = term if total is None else T.add(total, term)
    return total


def texture_loss(output: Tensor, target: Tensor, bank: GaborBank) -> Tensor:
    """Summed absolute difference of single-pass texture maps (per-sample sum,
    averaged over a batch)."""
    _check_pair("texture_loss", output, target)
    diff = T.tsum(T.tabs(T.sub(texture_map(target, bank), texture_map(output, bank))))
    if output.ndim == 4:
        diff = T.scale(diff, 1.0 / output.shape[0])
    return diff


def total_objective(parts: dict, weights: LossWeights) -> Tensor:
    """w1 pixel + w2 adv + w3 style + w4 fm; zero-weight terms are skipped."""
    total = None
    for key, w in weights.as_dict().items():
        if w == 0:
            continue
        part = parts[key]
        if not np.all(np.isfinite(part.data)):
            raise ValueError(f"non-finite {key} term")
        term = T.scale(part, w)
        total = term if total is None else T.add(total, term)
    return total
