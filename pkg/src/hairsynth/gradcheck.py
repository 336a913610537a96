"""Central finite-difference checks against the tape's analytic gradients."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step=1e-3) -> np.ndarray:
    """d fn() / d x by central differences; ``fn`` reads ``x.data`` each call."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            pert = base.copy().reshape(-1)
            pert[i] += sign * step
            x.data = pert.reshape(base.shape)
            flat[i] += sign * float(fn().data)
        flat[i] /= 2.0 * step
    x.data = base
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check(fn: Callable[[], Tensor], inputs, step=1e-3) -> float:
    """Worst relative error over ``inputs`` for the scalar-valued ``fn``."""
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = grads.get(x, np.zeros_like(x.data))
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, step)))
    return worst


def project(out: Tensor, seed=0) -> Tensor:
    """Reduce ``out`` to a scalar with a fixed random weighting so every
    output entry contributes a distinct coefficient."""
    w = np.random.default_rng(seed).uniform(0.5, 1.5, out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


@contextlib.contextmanager
def corrupted(op: str, factor=1.1):
    """Test hook: temporarily scale the gradient returned by ``op``'s rule."""
    original = T.VJP[op]

    def bad(ctx, g, needs):
        return tuple(None if gi is None else gi * factor for gi in original(ctx, g, needs))

    T.VJP[op] = bad
    try:
        yield
    finally:
        T.VJP[op] = original


def _away_from(x, points, gap):
    # nudge values off kinks so the finite difference stays on one branch
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.where(x >= p, gap, -gap) * 2, x)
    return x


def _rand(rng, shape, lo=-1.0, hi=1.0, kinks=(0.0,)):
    return Tensor(_away_from(rng.uniform(lo, hi, shape), kinks, 0.05), requires_grad=True)


def _distinct_channels(rng, shape):
    # channel values separated by >= 0.1 so the argmax survives +-1e-3 steps
    c = shape[-3]
    base = np.stack([rng.permutation(c) for _ in range(int(np.prod(shape)) // c)])
    base = base.reshape(*shape[:-3], shape[-2], shape[-1], c)
    vals = np.moveaxis(base, -1, -3) * 0.1 + rng.uniform(0, 0.02, shape)
    return Tensor(vals, requires_grad=True)


def _op_cases():
    """(name, builder) pairs; builder(rng) -> (fn, inputs)."""
    def unary(op, **kw):
        def build(rng):
            x = _rand(rng, tuple(rng.integers(1, 5, size=3)), **kw)
            return (lambda: project(op(x))), [x]
        return build

    def binary(op):
        def build(rng):
            shape = tuple(rng.integers(1, 5, size=3))
            a, b = _rand(rng, shape), _rand(rng, shape)
            return (lambda: project(op(a, b))), [a, b]
        return build

    def b_scale(rng):
        x = _rand(rng, (3, 4))
        return (lambda: project(T.scale(x, -2.5))), [x]

    def b_sum(rng):
        x = _rand(rng, (2, 3, 4))
        return (lambda: T.square(T.tsum(x))), [x]

    def b_mean(rng):
        x = _rand(rng, (2, 3, 4))
        return (lambda: T.square(T.mean(x))), [x]

    def b_matmul(rng):
        m, k, n = rng.integers(1, 5, size=3)
        a, b = _rand(rng, (m, k)), _rand(rng, (k, n))
        return (lambda: project(T.matmul(a, b))), [a, b]

    def b_bmatmul(rng):
        a, b = _rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 2))
        return (lambda: project(T.matmul(a, b))), [a, b]

    def b_transpose(rng):
        x = _rand(rng, (2, 3, 4))
        return (lambda: project(T.transpose(x))), [x]

    def b_reshape(rng):
        x = _rand(rng, (2, 3, 4))
        return (lambda: project(T.reshape(x, (4, 6)))), [x]

    def b_conv(padding):
        def build(rng):
            c, k = rng.integers(1, 4, size=2)
            h, w = rng.integers(2, 5, size=2)
            kh = int(rng.choice([1, 3]))
            x, wt = _rand(rng, (c, h, w)), _rand(rng, (k, c, kh, 3))
            return (lambda: project(T.conv2d(x, wt, padding))), [x, wt]
        return build

    def b_conv_batch(rng):
        x, wt = _rand(rng, (2, 2, 4, 4)), _rand(rng, (3, 2, 3, 3))
        return (lambda: project(T.conv2d(x, wt, "reflect"))), [x, wt]

    def b_bias(rng):
        x, b = _rand(rng, (2, 3, 4, 4)), _rand(rng, (3,))
        return (lambda: project(T.bias_add(x, b))), [x, b]

    def b_up(rng):
        x = _rand(rng, (2, 3, 2))
        return (lambda: project(T.upsample2x(x))), [x]

    def b_pool(rng):
        x = _rand(rng, (2, 4, 4))
        return (lambda: project(T.avgpool2x(x))), [x]

    def b_concat(rng):
        a, b = _rand(rng, (1, 3, 3)), _rand(rng, (2, 3, 3))
        return (lambda: project(T.concat([a, b]))), [a, b]

    def b_cmax(rng):
        x = _distinct_channels(rng, (4, 3, 3))
        return (lambda: project(T.channel_max(x)[0])), [x]

    def b_clamp(rng):
        x = _rand(rng, (3, 4), kinks=(-0.5, 0.5))
        return (lambda: project(T.clamp(x, -0.5, 0.5))), [x]

    return [
        ("add", binary(T.add)),
        ("sub", binary(T.sub)),
        ("mul", binary(T.mul)),
        ("scale", b_scale),
        ("shift", unary(lambda x: T.shift(x, 0.7))),
        ("abs", unary(T.tabs)),
        ("square", unary(T.square)),
        ("log", unary(T.log, lo=0.2, hi=2.0, kinks=())),
        ("sigmoid", unary(T.sigmoid, lo=-3, hi=3, kinks=())),
        ("leaky_relu", unary(T.leaky_relu)),
        ("clamp", b_clamp),
        ("sum", b_sum),
        ("mean", b_mean),
        ("matmul", b_matmul),
        ("matmul_batched", b_bmatmul),
        ("transpose", b_transpose),
        ("reshape", b_reshape),
        ("conv2d_zero", b_conv("zero")),
        ("conv2d_reflect", b_conv("reflect")),
        ("conv2d_batched", b_conv_batch),
        ("bias_add", b_bias),
        ("upsample2x", b_up),
        ("avgpool2x", b_pool),
        ("concat", b_concat),
        ("channel_max", b_cmax),
    ]


def _loss_cases():
    from . import losses, structure

    def b_pixel(rng):
        out, tgt = _rand(rng, (3, 4, 4)), Tensor(rng.uniform(-1, 1, (3, 4, 4)))
        tgt = Tensor(np.where(np.abs(out.data - tgt.data) < 0.05, tgt.data + 0.2, tgt.data))
        return (lambda: losses.pixel_loss(out, tgt)), [out]

    def b_adv(rng):
        s = Tensor(rng.uniform(0.1, 0.9, (1, 2, 2)), requires_grad=True)
        return (lambda: losses.adv_loss_generator(s)), [s]

    def b_gram(rng):
        x = _rand(rng, (3, 4, 4))
        return (lambda: project(losses.gram(x))), [x]

    def b_style(rng):
        ext = losses.FeatureExtractor(seed=7, channels=(3, 4, 4, 4, 4), dtype=np.float64)
        out = Tensor(rng.uniform(0, 1, (3, 4, 4)), requires_grad=True)
        tgt = Tensor(rng.uniform(0, 1, (3, 4, 4)))
        return (lambda: losses.style_loss(out, tgt, ext)), [out]

    def b_fm(rng):
        fake = [_rand(rng, (2, 4, 4)), _rand(rng, (3, 2, 2))]
        real = [Tensor(f.data + rng.choice([-0.3, 0.3], f.shape)) for f in fake]
        return (lambda: losses.fm_loss(real, fake)), fake

    def b_texture(rng):
        bank = structure.build_bank()
        out, tgt = _textured_pair(rng, 8, channels=1)
        return (lambda: losses.texture_loss(out, tgt, bank)), [out]

    def b_total(rng):
        parts = [_rand(rng, ()) for _ in range(4)]
        w = losses.LossWeights(2.0, 0.5, 1.5, 3.0)
        return (lambda: losses.total_objective(dict(zip(("pixel", "adv", "style", "fm"), parts)), w)), parts

    return [
        ("pixel_loss", b_pixel),
        ("adv_loss_generator", b_adv),
        ("gram", b_gram),
        ("style_loss", lambda rng: smooth_case(b_style, rng)),
        ("fm_loss", b_fm),
        ("texture_loss", lambda rng: smooth_case(b_texture, rng)),
        ("total_objective", b_total),
    ]


def _textured_pair(rng, size, channels=3):
    """Grating-like image (with gradient) and a distinct target image."""
    yy, xx = np.mgrid[0:size, 0:size]
    phi = rng.uniform(0, np.pi)
    base = 0.5 + 0.4 * np.cos(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / 4 + rng.uniform(0, 6))
    out = Tensor(np.clip(base + rng.normal(0, 0.05, (channels, size, size)), 0, 1), requires_grad=True)
    tgt = Tensor(np.clip(base[::-1] + rng.normal(0, 0.05, (channels, size, size)), 0, 1))
    return out, tgt


def branch_signature(fn: Callable[[], Tensor]) -> list:
    """Discrete decisions (signs, masks, argmax maps) taken by piecewise ops
    while evaluating ``fn``.

    An abs feeding a channel max only matters on the selected channel, so its
    signs are recorded there alone.
    """
    with Tape() as tape:
        fn()
    sig = {}
    producer = {}
    for k, node in enumerate(tape.nodes):
        producer[id(node.output)] = k
        if node.op == "abs":
            sig[k] = np.sign(node.ctx)
        elif node.op == "leaky_relu":
            sig[k] = node.ctx[0]
        elif node.op == "clamp":
            sig[k] = node.ctx
        elif node.op == "channel_max":
            idx = node.ctx[1]
            sig[k] = idx
            src = producer.get(id(node.inputs[0]))
            if src is not None and tape.nodes[src].op == "abs":
                sig[src] = np.take_along_axis(sig[src], idx[..., None, :, :], axis=-3)
    return [sig[k] for k in sorted(sig)]


def is_smooth_at(fn: Callable[[], Tensor], inputs, step=1e-3) -> bool:
    """True when no +-step perturbation of any single input entry changes a
    branch decision, i.e. the finite difference stays on one smooth piece."""
    ref = branch_signature(fn)
    for x in inputs:
        base = x.data.copy()
        try:
            for i in range(base.size):
                for sign in (1.0, -1.0):
                    pert = base.copy().reshape(-1)
                    pert[i] += sign * step
                    x.data = pert.reshape(base.shape)
                    sig = branch_signature(fn)
                    if len(sig) != len(ref) or any(not np.array_equal(a, b) for a, b in zip(ref, sig)):
                        return False
        finally:
            x.data = base
    return True


def smooth_case(build, rng, step=1e-3, attempts=50):
    """Redraw ``build(rng)`` until the case is branch-stable."""
    for _ in range(attempts):
        fn, inputs = build(rng)
        if is_smooth_at(fn, inputs, step):
            return fn, inputs
    raise RuntimeError("could not draw a branch-stable case")


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    passed: bool


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]


def grad_check_suite(seeds=range(5), tol=1e-4, step=1e-3, include_losses=True) -> SuiteReport:
    """Check every registered op (and every loss) at each seed in 64-bit."""
    cases = _op_cases() + (_loss_cases() if include_losses else [])
    report = SuiteReport()
    start = time.perf_counter()
    for name, build in cases:
        for seed in seeds:
            rng = np.random.default_rng(1000 + seed)
            fn, inputs = build(rng)
            err = check(fn, inputs, step)
            report.results.append(CheckResult(name, seed, err, bool(err <= tol)))
    report.seconds = time.perf_counter() - start
    return report
