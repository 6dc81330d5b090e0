"""Central finite-difference checks of every differentiable kernel and module.

The scalar probed is ``sum(out * R)`` for a fixed random ``R``, so every
output element contributes. The error reported for an input is
``max |analytic - numeric| / max(|analytic|, |numeric|, floor)`` with
``floor = 1e-3``, which keeps exact-zero gradients from dividing by zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from glpnet import ops
from glpnet.fusion import GCFM, LCFM, GcfmConfig, RgbdFeatures, Stage4Fusion, additive_fuse
from glpnet.tensor import Tensor, get_default_dtype, precision
from glpnet.training import cross_entropy_loss

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check(name: str, fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator,
          wrt: Sequence[int] | None = None, h: float = STEP) -> CheckResult:
    """Compare the tape gradient of ``fn(*tensors)`` with central differences."""
    arrays = [np.array(a, dtype=get_default_dtype()) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    ops.sum(ops.mul(out, Tensor(proj))).backward()

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst, total = 0.0, 0
    for i in wrt:
        a = arrays[i]
        numeric = np.zeros_like(a)
        flat, nflat = a.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = scalar()
            flat[j] = orig - h
            down = scalar()
            flat[j] = orig
            nflat[j] = (up - down) / (2 * h)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, numeric))
        total += flat.size
    return CheckResult(name, worst, total)


def check_module(name: str, module, forward: Callable, inputs: Sequence[np.ndarray],
                 rng: np.random.Generator, h: float = STEP) -> CheckResult:
    """Gradcheck w.r.t. the inputs and every parameter of ``module``.

    Modules are run in eval mode so batch-norm layers use their buffers;
    train-mode batch norm is covered by the kernel checks.
    """
    module.eval()
    n_in = len(inputs)
    arrays = list(inputs) + [p.data.copy() for p in module.parameters()]
    return check(name, lambda *t: forward(*t[:n_in], param_tensors=t[n_in:]), arrays, rng, h=h)


def _bind(module, param_tensors):
    """Temporarily substitute parameter objects by probe tensors."""
    swaps = []
    for (name, p), t in zip(module.named_parameters(), param_tensors):
        owner = module
        parts = name.split(".")
        for part in parts[:-1]:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        swaps.append((owner, parts[-1], p))
        setattr(owner, parts[-1], t)
    return swaps


def _unbind(swaps) -> None:
    for owner, attr, p in swaps:
        setattr(owner, attr, p)


def _module_forward(module, call):
    def forward(*inputs, param_tensors):
        swaps = _bind(module, param_tensors)
        try:
            return call(*inputs)
        finally:
            _unbind(swaps)
    return forward


def _off_integer(rng, shape, hi):
    """Coordinates in [0.1, hi - 1.1] kept at least 0.1 px from integers."""
    base = rng.integers(0, hi - 1, size=shape)
    return base + rng.uniform(0.1, 0.9, size=shape)


def kernel_cases(rng: np.random.Generator):
    r = rng.standard_normal
    yield "matmul", lambda a, b: ops.matmul(a, b), [r((3, 4)), r((4, 2))]
    yield "matmul_batched", lambda a, b: ops.matmul(a, b), [r((2, 3, 4)), r((2, 4, 5))]
    yield "conv2d", lambda x, w, b: ops.conv2d(x, w, b, 1, 1, 1), [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r(4)]
    yield "conv2d_stride2", lambda x, w, b: ops.conv2d(x, w, b, 2, 1, 1), [r((1, 2, 6, 6)), r((3, 2, 3, 3)), r(3)]
    yield "conv2d_dilation2", lambda x, w: ops.conv2d(x, w, None, 1, 2, 2), [r((1, 2, 5, 5)), r((2, 2, 3, 3))]
    yield "conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b), [r((2, 4, 3, 3)), r((2, 4, 1, 1)), r(2)]
    yield "spatial_softmax", ops.spatial_softmax, [r((2, 3, 4, 5))]
    yield "channel_softmax", ops.channel_softmax, [r((2, 6, 5))]
    coords = np.stack([_off_integer(rng, (2, 4, 5), 5), _off_integer(rng, (2, 4, 5), 4)], axis=1)
    yield "bilinear_sample", ops.bilinear_sample, [r((2, 3, 4, 5)), coords]
    yield "bilinear_resize", lambda x: ops.bilinear_resize(x, 5, 6), [r((1, 2, 3, 4))]
    yield "bilinear_resize_down", lambda x: ops.bilinear_resize(x, 2, 3, align_corners=False), [r((1, 2, 5, 6))]
    rm, rv = r(3) * 0.1, rng.uniform(0.5, 2.0, 3)

    def bn_train(x, g, b):
        return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True)

    def bn_eval(x, g, b):
        return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=False)

    yield "batch_norm_train", bn_train, [r((2, 3, 3, 3)), r(3), r(3)]
    yield "batch_norm_eval", bn_eval, [r((2, 3, 3, 3)), r(3), r(3)]
    x = r((2, 3, 4))
    x[np.abs(x) < 0.05] = 0.5
    yield "relu", ops.relu, [x]
    yield "add", ops.add, [r((2, 3, 4, 4)), r((1, 3, 1, 1))]
    yield "mul", ops.mul, [r((2, 3)), r((2, 3))]
    yield "concat_channels", ops.concat_channels, [r((1, 2, 3, 3)), r((1, 3, 3, 3))]
    yield "reshape", lambda x: ops.reshape(x, (6, 4)), [r((2, 3, 4))]
    yield "transpose", lambda x: ops.transpose(x, (2, 0, 1)), [r((2, 3, 4))]
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    yield "cross_entropy", lambda z: cross_entropy_loss(z, labels), [r((2, 4, 3, 3))]
    yield "sub", ops.sub, [r((2, 3, 4)), r((3, 1))]
    yield "sum", lambda x: ops.sum(x, axis=(0, 2), keepdims=True), [r((2, 3, 4))]
    yield "mean", lambda x: ops.mean(x, axis=1), [r((2, 3, 4))]
    yield "concat", lambda a, b: ops.concat([a, b], axis=2), [r((2, 3, 2)), r((2, 3, 4))]
    yield "index", lambda x: ops.index(x, (slice(None), [0, 2, 0])), [r((2, 3, 4))]


def module_cases(rng: np.random.Generator):
    r = rng.standard_normal
    c, h, w = 8, 5, 6

    lcfm = LCFM(c, rng)
    # non-zero offsets so sample points avoid the integer kinks of bilinear interpolation
    lcfm.offset_conv.weight.data[...] = r(lcfm.offset_conv.weight.shape) * 0.05
    lcfm.offset_conv.bias.data[...] = np.array([0.3, 0.4, -0.35, 0.25])
    yield ("lcfm_forward", lcfm, _module_forward(lcfm, lambda a, b: lcfm(RgbdFeatures(a, b))),
           [r((1, c, h, w)), r((1, c, h, w))])

    for variant in ("full", "var1", "var2"):
        g = GCFM(GcfmConfig(k_contexts=3, channels=c, variant=variant), rng)
        yield (f"gcfm_forward_{variant}", g, _module_forward(g, lambda a, b, g=g: g(RgbdFeatures(a, b))),
               [r((1, c, 4, 4)), r((1, c, 4, 4))])

    lc, gc = LCFM(c, rng), GCFM(GcfmConfig(k_contexts=2, channels=c), rng)
    lc.offset_conv.weight.data[...] = r(lc.offset_conv.weight.shape) * 0.05
    lc.offset_conv.bias.data[...] = np.array([0.3, 0.4, -0.35, 0.25])
    stage = Stage4Fusion(c, True, True, rng)
    stage.merge_conv.bn.running_var[...] = rng.uniform(0.5, 2.0, c)

    class _Joint:
        def __init__(self):
            self.lcfm, self.gcfm, self.stage4 = lc, gc, stage

        def named_parameters(self):
            for prefix, m in (("lcfm", lc), ("gcfm", gc), ("stage4", stage)):
                yield from m.named_parameters(prefix + ".")

        def parameters(self):
            return [p for _, p in self.named_parameters()]

        def eval(self):
            for m in (lc, gc, stage):
                m.eval()

    joint = _Joint()
    yield ("fusion_stage4", joint,
           _module_forward(joint, lambda a, b: joint.stage4(RgbdFeatures(a, b), joint.lcfm, joint.gcfm)),
           [r((1, c, 4, 4)), r((1, c, 4, 4))])
    yield ("additive_fuse", None, None, [r((1, 2, 3, 3)), r((1, 2, 3, 3))])


def run_suite(seed: int = 0, dtype=np.float64) -> list[CheckResult]:
    """All kernel and module checks; the tolerance is only meaningful in 64-bit precision."""
    rng = np.random.default_rng(seed)
    results = []
    with precision(dtype):
        for name, fn, arrays in kernel_cases(rng):
            results.append(check(name, fn, arrays, rng))
        for name, module, forward, inputs in module_cases(rng):
            if module is None:
                results.append(check(name, lambda a, b: additive_fuse(RgbdFeatures(a, b)), inputs, rng))
            else:
                results.append(check_module(name, module, forward, inputs, rng))
    return results


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'op':<26} {'max_rel_err':>12} {'n':>6}  status"]
    for res in results:
        lines.append(f"{res.name:<26} {res.max_rel_err:12.3e} {res.n_checked:6d}  {'ok' if res.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s, tolerance {TOLERANCE:g}")
    return "\n".join(lines)


def main_report(seed: int = 0, dtype=np.float64) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(seed, dtype)
    return all(r.passed for r in results), format_report(results, time.perf_counter() - start)
