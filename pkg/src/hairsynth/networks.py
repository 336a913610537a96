"""Toy-scale generators and the conditional patch discriminator.

Everything is built from the ops in :mod:`hairsynth.tensor`; "stride-2"
layers are a same-size conv followed by 2x average pooling, and decoders
upsample by nearest-neighbour doubling.
"""
from __future__ import annotations

import json
import math
import shutil
from pathlib import Path

import numpy as np

from . import htx
from . import tensor as T
from .tensor import ShapeError, Tensor


class Conv:
    """3x3 (or kxk) zero-padded conv with bias, fan-in scaled uniform init."""

    def __init__(self, cin, cout, rng, k=3, dtype=np.float32):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / ((1 + 0.2**2) * fan_in))
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.bias_add(T.conv2d(x, self.weight, padding="zero"), self.bias)


class Module:
    kind = "module"

    def named_parameters(self):
        out = {}
        for name, conv in self._convs():
            out[f"{name}.weight"] = conv.weight
            out[f"{name}.bias"] = conv.bias
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def config(self) -> dict:
        raise NotImplementedError

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ShapeError("parameter names do not match the architecture")
        for k, p in params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {a.shape} != expected {p.shape}")
            p.data = a.astype(p.dtype)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


class UNet(Module):
    """Encoder/decoder with a skip connection at every level.

    With ``depth == log2(size)`` the bottleneck is 1x1. ``extra_up`` appends
    upsample+conv stages after the decoder, for super-resolution.
    """

    kind = "unet"

    def __init__(self, in_channels, out_channels=3, depth=4, base_channels=16, max_channels=64,
                 extra_up=0, seed=0, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.depth = depth
        self.base_channels = base_channels
        self.max_channels = max_channels
        self.extra_up = extra_up
        self.seed = seed
        self.dtype = np.dtype(dtype).name
        rng = np.random.default_rng(seed)
        width = [min(base_channels * 2**l, max_channels) for l in range(depth)]
        self.width = width
        self.enc = []
        cin = in_channels
        for w in width:
            self.enc.append(Conv(cin, w, rng, dtype=dtype))
            cin = w
        self.mid = Conv(cin, cin, rng, dtype=dtype)
        self.dec = [None] * depth
        up = cin
        for l in reversed(range(depth)):
            self.dec[l] = Conv(up + width[l], width[l], rng, dtype=dtype)
            up = width[l]
        self.up = [Conv(up, up, rng, dtype=dtype) for _ in range(extra_up)]
        self.head = Conv(up, out_channels, rng, dtype=dtype)

    def _convs(self):
        for l, c in enumerate(self.enc):
            yield f"enc{l}", c
        yield "mid", self.mid
        for l, c in enumerate(self.dec):
            yield f"dec{l}", c
        for e, c in enumerate(self.up):
            yield f"up{e}", c
        yield "head", self.head

    def config(self):
        return {
            "kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
            "depth": self.depth, "base_channels": self.base_channels, "max_channels": self.max_channels,
            "extra_up": self.extra_up, "seed": self.seed, "dtype": self.dtype,
        }

    def __call__(self, x):
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[-3]}")
        h, w = x.shape[-2:]
        if h % (2**self.depth) or w % (2**self.depth):
            raise ShapeError(f"spatial size {h}x{w} is not divisible by 2^{self.depth}")
        skips = []
        for conv in self.enc:
            x = T.leaky_relu(conv(x))
            skips.append(x)
            x = T.avgpool2x(x)
        x = T.leaky_relu(self.mid(x))
        for l in reversed(range(self.depth)):
            x = T.concat([T.upsample2x(x), skips[l]], axis=-3)
            x = T.leaky_relu(self.dec[l](x))
        for conv in self.up:
            x = T.leaky_relu(conv(T.upsample2x(x)))
        return T.sigmoid(self.head(x))

    def bottleneck_size(self, size):
        return size // 2**self.depth


class PatchDiscriminator(Module):
    """Conditional patch discriminator; every stride-2 layer's activation is
    exported for feature matching."""

    kind = "patch_disc"

    def __init__(self, in_channels, channels=(16, 32, 64), seed=0, dtype=np.float32):
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.seed = seed
        self.dtype = np.dtype(dtype).name
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = in_channels
        for c in channels:
            self.layers.append(Conv(cin, c, rng, dtype=dtype))
            cin = c
        self.score = Conv(cin, 1, rng, dtype=dtype)

    def _convs(self):
        for i, c in enumerate(self.layers):
            yield f"layer{i}", c
        yield "score", self.score

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "channels": list(self.channels),
                "seed": self.seed, "dtype": self.dtype}

    def __call__(self, x):
        feats = []
        for conv in self.layers:
            x = T.avgpool2x(T.leaky_relu(conv(x)))
            feats.append(x)
        return T.sigmoid(self.score(x)), feats


def build_module(cfg: dict) -> Module:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == UNet.kind:
        return UNet(**cfg)
    if kind == PatchDiscriminator.kind:
        return PatchDiscriminator(**cfg)
    raise ValueError(f"unknown module kind {kind!r}")


def basic_net(task: str, image_size=64, base_channels=16, seed=0, dtype=np.float32) -> UNet:
    """G_b: a 1x1-bottleneck U-Net; super-resolution variants add upsampling."""
    if task == "sketch2hair":
        return UNet(2, 3, depth=int(math.log2(image_size)), base_channels=base_channels, seed=seed, dtype=dtype)
    factor = {"hair_sr4": 4, "hair_sr8": 8}.get(task)
    if factor is None:
        raise ValueError(f"unknown task {task!r}")
    lr = image_size // factor
    return UNet(3, 3, depth=int(math.log2(lr)), base_channels=base_channels,
                extra_up=int(math.log2(factor)), seed=seed, dtype=dtype)


def regen_net(task: str, base_channels=16, depth=4, seed=0, dtype=np.float32) -> UNet:
    """G_r: coarse image + 3-channel structure (+ upsampled input for SR)."""
    in_ch = 6 if task == "sketch2hair" else 9
    return UNet(in_ch, 3, depth=depth, base_channels=base_channels, seed=seed, dtype=dtype)


def discriminator(task: str, seed=0, channels=(16, 32, 64), dtype=np.float32) -> PatchDiscriminator:
    cond = 2 if task == "sketch2hair" else 3
    return PatchDiscriminator(3 + cond, channels=channels, seed=seed, dtype=dtype)


def forward_gb(net: UNet, x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"input size {h}x{w} is not a power of two")
    return net(x)


def forward_gr(net: UNet, coarse: Tensor, structure: Tensor, aux: Tensor | None = None) -> Tensor:
    parts = [coarse, structure] + ([aux] if aux is not None else [])
    for p in parts[1:]:
        if p.shape[-2:] != coarse.shape[-2:] or p.ndim != coarse.ndim:
            raise ShapeError(f"spatial mismatch: {p.shape} vs coarse {coarse.shape}")
    expected = coarse.shape[-3] + structure.shape[-3] + (aux.shape[-3] if aux is not None else 0)
    if expected != net.in_channels:
        raise ShapeError(f"re-generator expects {net.in_channels} channels, inputs give {expected}"
                         " (aux must be given exactly for super-resolution)")
    return net(T.concat(parts, axis=-3))


def forward_disc(disc: PatchDiscriminator, image: Tensor, condition: Tensor):
    if image.shape[-2:] != condition.shape[-2:] or image.ndim != condition.ndim:
        raise ShapeError(f"image {image.shape} and condition {condition.shape} differ spatially")
    return disc(T.concat([image, condition], axis=-3))


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, modules: dict, meta: dict):
    """Directory of HTX1 tensors (one sub-directory per module) plus manifest.json."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    manifest = dict(meta)
    manifest["modules"] = {}
    for name, mod in modules.items():
        (tmp / name).mkdir()
        for pname, p in mod.named_parameters().items():
            if p.dtype != np.float32:
                raise ValueError("HTX1 checkpoints store float32 parameters only")
            htx.save(tmp / name / f"{pname}.htx", p.data)
        manifest["modules"][name] = mod.config()
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    # swap in atomically-ish so an abort never leaves a half-written checkpoint
    if path.exists():
        old = path.with_name(path.name + ".old")
        path.rename(old)
        tmp.rename(path)
        shutil.rmtree(old)
    else:
        tmp.rename(path)


def load_checkpoint(path):
    """Returns ``(modules, manifest)``."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    modules = {}
    for name, cfg in manifest["modules"].items():
        mod = build_module(cfg)
        arrays = {p.stem: htx.load(p) for p in (path / name).glob("*.htx")}
        mod.load_arrays(arrays)
        modules[name] = mod
    return modules, manifest
