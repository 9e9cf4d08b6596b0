"""Finite-difference verification of every differentiable op and loss.

All checks run in float64.  The error reported for a check is the normwise
relative error ``max|analytic - numeric| / max|numeric|`` over the sampled
coordinates, with central differences of step 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, functional as F, precision

OP_TOL = 1e-4
LOSS_TOL = 1e-3
STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    module: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(self.error < self.tol)


def _fd(fn, flat, i, step):
    orig = flat[i]
    base = fn().item()
    flat[i] = orig + step
    up = fn().item()
    flat[i] = orig - step
    down = fn().item()
    flat[i] = orig
    return (up - down) / (2 * step), (up - base) / step, (base - down) / step


def compare(fn, leaves, rng, sample=None, step=STEP):
    """Max normwise relative error of d fn()/d leaf.

    With ``sample=None`` every coordinate of every leaf is checked.  Otherwise
    ``sample`` coordinates are drawn at random across all leaves, skipping any
    where the forward and backward one-sided differences disagree (a ReLU or
    max-pool switching inside the step, where no derivative exists).
    """
    for leaf in leaves:
        leaf.grad = None
    fn().backward()
    grads = [leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(leaf.data.size) for leaf in leaves]
    candidates = [(j, i) for j, leaf in enumerate(leaves) for i in range(leaf.data.size)]
    if sample is not None:
        candidates = [candidates[c] for c in rng.permutation(len(candidates))]
    analytic, numeric = [], []
    for j, i in candidates:
        central, fwd, bwd = _fd(fn, leaves[j].data.reshape(-1), i, step)
        if sample is not None:
            if abs(fwd - bwd) > 1e-3 * max(abs(central), 1e-3):
                continue
            if len(numeric) >= sample:
                break
        numeric.append(central)
        analytic.append(grads[j][i])
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _jitter_biases(model, rng):
    # zero biases put dead-ReLU pre-activations exactly on the kink
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = rng.uniform(-0.1, 0.1, size=p.shape)
    return model


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, gap=0.05):
    u = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(u, requires_grad=True)


def _weighted(out_fn, rng, shape):
    w = Tensor(rng.uniform(-1, 1, size=shape))
    return lambda: F.sum(out_fn() * w)


def _op_checks():
    def unary(op, lo=-1.0, hi=1.0, kink=False):
        def build(rng):
            x = _away_from_zero(rng, (3, 4)) if kink else _leaf(rng, (3, 4), lo, hi)
            return _weighted(lambda: op(x), rng, (3, 4)), [x]
        return build

    def binary(op, bshape=(3, 4), positive_b=False):
        def build(rng):
            a = _leaf(rng, (3, 4))
            b = _leaf(rng, bshape, 0.5, 1.5) if positive_b else _leaf(rng, bshape)
            return _weighted(lambda: op(a, b), rng, (3, 4)), [a, b]
        return build

    def conv(shape, kshape, stride, padding, bias=True):
        def build(rng):
            x, k = _leaf(rng, shape), _leaf(rng, kshape)
            bvec = _leaf(rng, (kshape[0],)) if bias else None
            out_shape = F.conv2d(x, k, bvec, stride, padding).shape
            leaves = [x, k] + ([bvec] if bias else [])
            return _weighted(lambda: F.conv2d(x, k, bvec, stride, padding), rng, out_shape), leaves
        return build

    def shaped(op, shape, out_shape, lo=-1.0, hi=1.0):
        def build(rng):
            x = _leaf(rng, shape, lo, hi)
            return _weighted(lambda: op(x), rng, out_shape), [x]
        return build

    def concat(rng):
        a, b = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (1, 3, 3, 3))
        return _weighted(lambda: F.concat([a, b], axis=1), rng, (1, 5, 3, 3)), [a, b]

    def matmul(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
        return _weighted(lambda: F.matmul(a, b), rng, (3, 2)), [a, b]

    return {
        "add": binary(F.add),
        "add_broadcast": binary(F.add, (1, 4)),
        "sub": binary(F.sub),
        "mul": binary(F.mul),
        "div": binary(F.div, positive_b=True),
        "power": unary(lambda x: F.power(x, 3.0)),
        "sqrt": unary(F.sqrt, 0.5, 1.5),
        "exp": unary(F.exp),
        "log": unary(F.log, 0.5, 1.5),
        "abs": unary(F.absolute, kink=True),
        "clip": unary(lambda x: F.clip(x, -0.5, 0.5), kink=True),
        "relu": unary(F.relu, kink=True),
        "leaky_relu": unary(F.leaky_relu, kink=True),
        "sigmoid": unary(F.sigmoid),
        "tanh": unary(lambda x: F.tanh(x)),
        "sum": shaped(lambda x: F.sum(x, axis=1), (3, 4, 2), (3, 2)),
        "mean": shaped(lambda x: F.mean(x, axis=(0, 2), keepdims=True), (3, 4, 2), (1, 4, 1)),
        "reshape_transpose": shaped(lambda x: F.transpose(F.reshape(x, (4, 6)), (1, 0)), (2, 3, 4), (6, 4)),
        "concat": concat,
        "matmul": matmul,
        "pad_edge": shaped(lambda x: F.pad_edge(x, 2, 3), (1, 1, 4, 5), (1, 1, 6, 8)),
        "conv2d": conv((2, 2, 5, 5), (3, 2, 3, 3), 1, 1),
        "conv2d_stride2": conv((1, 2, 7, 7), (2, 2, 3, 3), 2, 0),
        "conv2d_1x1": conv((1, 3, 4, 4), (2, 3, 1, 1), 1, 0, bias=False),
        "upsample_nearest2x": shaped(F.upsample_nearest2x, (1, 2, 3, 3), (1, 2, 6, 6)),
        "max_pool2x": shaped(F.max_pool2x, (1, 2, 4, 4), (1, 2, 2, 2)),
        "softmax_channels": shaped(F.softmax_channels, (1, 3, 2, 2), (1, 3, 2, 2), -2.0, 2.0),
    }


def _segmentor_checks():
    from .segmentor import Segmentor, SegmentorConfig, cross_entropy_loss, heatmap_from_probs, label_intensities, seg_forward

    def heatmap(rng):
        logits = _leaf(rng, (1, 4, 3, 3), -2, 2)
        g = label_intensities(4)
        return _weighted(lambda: heatmap_from_probs(F.softmax_channels(logits), g), rng, (1, 1, 3, 3)), [logits]

    def cross_entropy(rng):
        logits = _leaf(rng, (1, 3, 4, 4), -2, 2)
        target = rng.integers(0, 3, size=(4, 4))
        return lambda: cross_entropy_loss(F.softmax_channels(logits), target), [logits]

    def network(rng):
        model = _jitter_biases(Segmentor(SegmentorConfig(k_classes=3, base_channels=2, depth=2), seed=int(rng.integers(1 << 30))), rng)
        x = Tensor(rng.uniform(0, 1, size=(1, 1, 8, 8)))
        g = label_intensities(3)
        fn = _weighted(lambda: heatmap_from_probs(seg_forward(model, x), g) * (1 / 255), rng, (1, 1, 8, 8))
        return fn, model.parameters()

    return {"heatmap_from_probs": (heatmap, None), "cross_entropy_loss": (cross_entropy, None),
            "seg_forward_heatmap": (network, 60)}


def _synthesizer_checks():
    from .synthesizer import Synthesizer, SynthConfig, disc_forward, synth_forward

    cfg = SynthConfig(gen_base=2, gen_depth=2, disc_base=2, disc_levels=2)

    def gen_wrt_heatmap(rng):
        synth = _jitter_biases(Synthesizer(cfg, seed=int(rng.integers(1 << 30))), rng)
        heat = _leaf(rng, (1, 1, 8, 8), 0, 255)
        sketch = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.7).astype(float))
        return _weighted(lambda: synth_forward(synth.gen, heat, sketch), rng, (1, 1, 8, 8)), [heat] + synth.gen.parameters()

    def disc(rng):
        synth = _jitter_biases(Synthesizer(cfg, seed=int(rng.integers(1 << 30))), rng)
        image = _leaf(rng, (1, 1, 16, 16), 0, 1)
        heat = _leaf(rng, (1, 1, 16, 16), 0, 255)
        sketch = Tensor((rng.uniform(size=(1, 1, 16, 16)) > 0.7).astype(float))
        return _weighted(lambda: disc_forward(synth.disc, image, heat, sketch), rng, (1, 1, 4, 4)), [image, heat] + synth.disc.parameters()

    return {"synth_forward": (gen_wrt_heatmap, 60), "disc_forward": (disc, 60)}


def _similarity_checks():
    from .segmentor import Segmentor, SegmentorConfig, heatmap_from_probs, label_intensities, seg_forward
    from .similarity import SimilarityConfig, apply_attention, mi_parzen, ncc_loss, reflective_loss
    from .synthesizer import Synthesizer, SynthConfig, synth_forward

    cfg = SimilarityConfig()

    def ncc(rng):
        a, b = _leaf(rng, (18, 18), 0, 1), _leaf(rng, (18, 18), 0, 1)
        return lambda: ncc_loss(a, b, cfg), [a, b]

    def ncc_padded(rng):
        a, b = _leaf(rng, (1, 1, 11, 13), 0, 1), _leaf(rng, (1, 1, 11, 13), 0, 1)
        return lambda: ncc_loss(a, b, cfg), [a, b]

    def mi(rng):
        a = _leaf(rng, (8, 8), 0, 1)
        b = Tensor(np.clip(a.data + rng.normal(0, 0.1, size=(8, 8)), 0, 1), requires_grad=True)
        return lambda: mi_parzen(a, b, cfg), [a, b]

    def attention(rng):
        img, heat = _leaf(rng, (1, 1, 4, 4), 0, 1), _leaf(rng, (1, 1, 4, 4), 0, 255)
        return _weighted(lambda: apply_attention(img, heat), rng, (1, 1, 4, 4)), [img, heat]

    def reflective(rng):
        a = Tensor(rng.uniform(0, 1, size=(1, 1, 16, 16)))
        b = Tensor(np.clip(a.data * 0.7 + rng.normal(0, 0.1, size=a.shape) + 0.1, 0, 1), requires_grad=True)
        heat = _leaf(rng, (1, 1, 16, 16), 0, 255)
        return lambda: reflective_loss(a, b, heat, cfg), [b, heat]

    def pipeline(rng):
        seg = _jitter_biases(Segmentor(SegmentorConfig(k_classes=3, base_channels=4, depth=2), seed=int(rng.integers(1 << 30))), rng)
        gen = _jitter_biases(Synthesizer(SynthConfig(gen_base=4, gen_depth=2), seed=int(rng.integers(1 << 30))).gen, rng)
        yy, xx = np.mgrid[0:16, 0:16]
        scene = 0.2 + 0.6 * ((yy - 8) ** 2 + (xx - 7) ** 2 < 25) + rng.normal(0, 0.03, size=(16, 16))
        x = Tensor(np.clip(scene, 0, 1)[None, None])
        sketch = Tensor((np.abs(np.gradient(scene)[0]) > 0.1).astype(float)[None, None])
        g = label_intensities(3)

        def fn():
            heat = heatmap_from_probs(seg_forward(seg, x), g)
            return reflective_loss(x, synth_forward(gen, heat, sketch), heat, cfg)

        return fn, seg.parameters() + gen.parameters()

    return {"ncc_loss": (ncc, None), "ncc_loss_padded": (ncc_padded, None), "mi_parzen": (mi, None),
            "apply_attention": (attention, None), "reflective_loss": (reflective, None),
            "pipeline_20_params": (pipeline, 20)}


MODULES = ("autodiff", "segmentor", "synthesizer", "similarity")
LOSS_CHECKS = {"ncc_loss", "ncc_loss_padded", "mi_parzen", "reflective_loss", "pipeline_20_params"}


def registry():
    out = {}
    for name, build in _op_checks().items():
        out[name] = ("autodiff", build, None)
    for module, checks in (("segmentor", _segmentor_checks()), ("synthesizer", _synthesizer_checks()),
                           ("similarity", _similarity_checks())):
        for name, (build, sample) in checks.items():
            out[name] = (module, build, sample)
    return out


def run(module=None, seed=0):
    """Run all checks (or one module's) and return a list of CheckResult."""
    if module is not None and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    results = []
    with precision(np.float64):
        for name, (mod, build, sample) in registry().items():
            if module is not None and mod != module:
                continue
            rng = np.random.default_rng([seed, sum(map(ord, name))])
            fn, leaves = build(rng)
            err = compare(fn, leaves, rng, sample)
            results.append(CheckResult(name, mod, err, LOSS_TOL if name in LOSS_CHECKS else OP_TOL))
    return results
