"""SGD training recipe, augmentation and (multi-scale) evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from glpnet import ops
from glpnet.data.dataset import RgbdSample
from glpnet.data.glt import save_bundle
from glpnet.metrics import IGNORE_INDEX, ConfusionMatrix, compute_metrics
from glpnet.nn import Module
from glpnet.tensor import ContractError, NonFiniteError, Parameter, Tensor, make_node, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iter", "lr", "loss", "main", "aux1", "aux2", "miou")


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    epochs: int = 20
    poly_power: float = 0.9
    aux_weight: float = 0.2
    scale_range: tuple = (0.5, 2.25)
    crop_hw: tuple = (64, 64)
    augment: bool = True
    flip: bool = True
    scale_depth: bool = True
    seed: int = 0
    ignore_index: int = IGNORE_INDEX
    offset_lr_mult: float = 1.0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.crop_hw = tuple(int(v) for v in self.crop_hw)
        if min(self.base_lr, self.momentum, self.weight_decay, self.offset_lr_mult) < 0:
            raise ValueError("learning rates, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.poly_power <= 0:
            raise ValueError("batch_size, epochs and poly_power must be positive")
        lo, hi = self.scale_range
        if not 0 < lo < hi:
            raise ValueError(f"scale_range must satisfy 0 < min < max, got {self.scale_range}")


# ---------------------------------------------------------------- optimisation

def poly_lr(iteration: int, max_iter: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {max_iter}]")
    return cfg.base_lr * (1 - iteration / max_iter) ** cfg.poly_power


class OptimState:
    """Momentum buffers keyed by parameter identity."""

    def __init__(self):
        self.buffers: dict[int, np.ndarray] = {}


def sgd_step(params: list[Parameter], opt: OptimState, lr: float, cfg: TrainConfig,
             lr_mult: Optional[dict] = None) -> None:
    """``g = grad + wd * w;  buf = mu * buf + g;  w -= lr * buf``. Grads are left for the caller to zero.

    ``lr_mult`` optionally maps ``id(param)`` to a learning-rate multiplier.
    """
    for p in params:
        buf = opt.buffers.get(id(p))
        if buf is None:
            buf = opt.buffers[id(p)] = np.zeros_like(p.data)
        if buf.shape != p.grad.shape:
            raise ValueError(f"{p.name}: momentum buffer {buf.shape} vs grad {p.grad.shape}")
        g = p.grad + p.data.dtype.type(cfg.weight_decay) * p.data
        buf *= p.data.dtype.type(cfg.momentum)
        buf += g
        scale = lr if lr_mult is None else lr * lr_mult.get(id(p), 1.0)
        p.data -= p.data.dtype.type(scale) * buf


# ---------------------------------------------------------------- losses

def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel cross-entropy over non-ignored labels; 0 if every pixel is ignored."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"label ids must lie in [0, {k}) or equal {ignore_index}")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else logp.dtype.type(0)

    def backward(g):
        if not count:
            return (np.zeros_like(logp),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        return (grad * (valid[:, None] * (g / count)).astype(grad.dtype),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def total_loss(main: Tensor, aux: tuple = (), cfg: Optional[TrainConfig] = None) -> Tensor:
    weight = cfg.aux_weight if cfg is not None else 0.2
    out = main
    for a in aux:
        out = ops.add(out, ops.mul(a, weight))
    return out


# ---------------------------------------------------------------- augmentation

def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1, dtype=np.int64)
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    return np.minimum(np.floor(src + 0.5).astype(np.int64), n_in - 1)


def resize_image(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear (align-corners) resize of a ``[C,H,W]`` array."""
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = ops.interpolation_matrix(h, out_h, True, x.dtype)
    rx = ops.interpolation_matrix(w, out_w, True, x.dtype)
    return np.matmul(ry, np.matmul(x, rx.T))


def resize_labels(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = label.shape
    return label[_nearest_index(h, out_h)][:, _nearest_index(w, out_w)]


def augment(sample: RgbdSample, rng: np.random.Generator, cfg: TrainConfig) -> RgbdSample:
    """Random scale, pad-to-crop, random crop and horizontal flip, applied
    identically to all three maps. Depth values are divided by the scale
    factor when ``cfg.scale_depth`` is set."""
    rgb, depth, label = sample.rgb, sample.depth, sample.label
    h, w = label.shape
    s = rng.uniform(*cfg.scale_range)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    rgb = resize_image(rgb, nh, nw)
    depth = resize_image(depth, nh, nw)
    if cfg.scale_depth:
        depth = depth / depth.dtype.type(s)
    label = resize_labels(label, nh, nw)

    ch, cw = cfg.crop_hw
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    if ph or pw:
        rgb = np.pad(rgb, ((0, 0), (0, ph), (0, pw)))
        depth = np.pad(depth, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=cfg.ignore_index)
    top = int(rng.integers(0, label.shape[0] - ch + 1))
    left = int(rng.integers(0, label.shape[1] - cw + 1))
    rgb = rgb[:, top:top + ch, left:left + cw]
    depth = depth[:, top:top + ch, left:left + cw]
    label = label[top:top + ch, left:left + cw]
    if cfg.flip and rng.random() < 0.5:
        rgb, depth, label = rgb[..., ::-1], depth[..., ::-1], label[..., ::-1]
    return RgbdSample(np.ascontiguousarray(rgb), np.ascontiguousarray(depth), np.ascontiguousarray(label))


def hflip(sample: RgbdSample) -> RgbdSample:
    return RgbdSample(sample.rgb[..., ::-1].copy(), sample.depth[..., ::-1].copy(), sample.label[..., ::-1].copy())


# ---------------------------------------------------------------- evaluation

def _input_tensor(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


def _model_dtype(model: Module):
    return model.parameters()[0].dtype


def predict_logits(model: Module, rgb: np.ndarray, depth: np.ndarray) -> np.ndarray:
    dtype = _model_dtype(model)
    with no_grad():
        logits, _ = model(_input_tensor(rgb, dtype), _input_tensor(depth, dtype))
    return logits.data


def multiscale_eval(model: Module, rgb: np.ndarray, depth: np.ndarray, scales=(1.0,), flip: bool = False,
                    scale_depth: bool = True) -> np.ndarray:
    """Average logits over rescaled (and optionally mirrored) inputs.

    Each rescaled extent is rounded to a multiple of 16; logits are resized
    back to the input size before averaging.
    """
    dtype = _model_dtype(model)
    n, _, h, w = rgb.shape
    total, count = None, 0
    with no_grad():
        for s in scales:
            sh, sw = max(16, int(round(h * s / 16)) * 16), max(16, int(round(w * s / 16)) * 16)
            r = resize_image(np.asarray(rgb, dtype=dtype), sh, sw)
            d = resize_image(np.asarray(depth, dtype=dtype), sh, sw)
            if scale_depth and s != 1.0:
                d = d / dtype.type(s)
            for mirrored in ((False, True) if flip else (False,)):
                ri, di = (r[..., ::-1], d[..., ::-1]) if mirrored else (r, d)
                logits, _ = model(_input_tensor(ri, dtype), _input_tensor(di, dtype))
                out = ops.bilinear_resize(logits, h, w).data
                if mirrored:
                    out = out[..., ::-1]
                total = out.copy() if total is None else total + out
                count += 1
    return total / count


def evaluate(model: Module, rgb: np.ndarray, depth: np.ndarray, label: np.ndarray, num_classes: int,
             batch_size: int = 8, scales=(1.0,), flip: bool = False, scale_depth: bool = True) -> dict:
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(num_classes)
    try:
        for lo in range(0, len(rgb), batch_size):
            sl = slice(lo, lo + batch_size)
            if tuple(scales) == (1.0,) and not flip:
                logits = predict_logits(model, rgb[sl], depth[sl])
            else:
                logits = multiscale_eval(model, rgb[sl], depth[sl], scales, flip, scale_depth)
            cm.update(logits.argmax(axis=1), label[sl])
    finally:
        model.train(was_training)
    return compute_metrics(cm)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    iterations: int = 0
    final_metrics: Optional[dict] = None


def _batch(rgb, depth, label, idx, epoch, cfg: TrainConfig):
    samples = []
    for i in idx:
        s = RgbdSample(rgb[i], depth[i], label[i])
        if cfg.augment:
            s = augment(s, np.random.default_rng([cfg.seed, epoch, int(i)]), cfg)
        samples.append(s)
    return (np.stack([s.rgb for s in samples]), np.stack([s.depth for s in samples]),
            np.stack([s.label for s in samples]))


def train_loop(model: Module, train_data, cfg: TrainConfig, test_data=None, num_classes: Optional[int] = None,
               log_path=None, on_step: Optional[Callable] = None, dump_dir=None) -> TrainResult:
    """Train ``model`` in place.

    ``train_data``/``test_data`` are ``(rgb, depth, label)`` array triples.
    Per-epoch rows (see ``LOG_FIELDS``) are returned and, if ``log_path`` is
    given, written as CSV. Raises :class:`NonFiniteError` on a NaN/Inf loss
    after dumping the offending batch to ``dump_dir``.
    """
    rgb, depth, label = train_data
    named = list(model.named_parameters())
    params = [p for _, p in named]
    lr_mult = {id(p): cfg.offset_lr_mult for n, p in named if "offset_conv" in n}
    dtype = params[0].dtype
    opt = OptimState()
    n = len(rgb)
    steps = -(-n // cfg.batch_size)
    max_iter = max(cfg.epochs * steps, 1)
    result = TrainResult()
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    model.train()
    model.zero_grad()
    it = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            sums = np.zeros(4)
            lr = 0.0
            for b in range(steps):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                xb, db, yb = _batch(rgb, depth, label, idx, epoch, cfg)
                lr = poly_lr(it, max_iter, cfg)
                logits, aux = model(_input_tensor(xb, dtype), _input_tensor(db, dtype))
                main = cross_entropy_loss(logits, yb, cfg.ignore_index)
                aux_losses = tuple(cross_entropy_loss(a, yb, cfg.ignore_index) for a in aux)
                loss = total_loss(main, aux_losses, cfg)
                if not np.isfinite(loss.data).all():
                    if dump_dir is not None:
                        save_bundle(Path(dump_dir) / "nonfinite_batch.glt",
                                    {"rgb": xb, "depth": db, "label": yb.astype(np.int64)})
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} iteration {it}")
                loss.backward()
                sgd_step(params, opt, lr, cfg, lr_mult)
                model.zero_grad()
                parts = [loss.item(), main.item()] + [a.item() for a in aux_losses] + [0.0] * (2 - len(aux_losses))
                sums += parts
                it += 1
                if on_step is not None:
                    on_step(it, model, float(parts[0]))
            row = {"epoch": epoch, "iter": it, "lr": lr}
            row.update(dict(zip(("loss", "main", "aux1", "aux2"), (sums / steps).tolist())))
            row["miou"] = ""
            if test_data is not None and num_classes is not None:
                result.final_metrics = evaluate(model, *test_data, num_classes=num_classes)
                row["miou"] = result.final_metrics["miou"]
            result.history.append(row)
            log.info("epoch %d loss %.4f miou %s", epoch, row["loss"], row["miou"])
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    result.iterations = it
    return result


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
