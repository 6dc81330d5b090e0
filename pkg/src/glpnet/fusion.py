"""Depth-to-RGB fusion at a single encoder stage.

Three ways to inject the depth feature into the RGB branch:

* :func:`additive_fuse` -- plain element-wise sum (the baseline).
* :class:`LCFM` -- predict a per-pixel offset for each modality from their
  concatenation, warp both maps by bilinear resampling, then sum them.
* :class:`GCFM` -- pool ``K`` context vectors per modality with spatial
  softmax masks and attend from every RGB pixel over the joint ``2K`` bank,
  adding the result back to the RGB feature.

:class:`Stage4Fusion` runs L-CFM and G-CFM side by side and merges their
outputs with a conv block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from glpnet import ops
from glpnet.nn import Conv2d, ConvBNReLU, Linear, Module
from glpnet.tensor import ShapeError, Tensor

GCFM_VARIANTS = ("full", "var1", "var2")


@dataclass
class RgbdFeatures:
    rgb: Tensor
    depth: Tensor

    def __post_init__(self):
        if self.rgb.shape != self.depth.shape:
            raise ShapeError(f"modality shapes differ: {self.rgb.shape} vs {self.depth.shape}")


@dataclass
class OffsetField:
    rgb_offset: Tensor  # [N,2,H,W]: channel 0 = dx, 1 = dy, in pixels
    d_offset: Tensor


@dataclass
class PoolingMasks:
    rgb_mask: Tensor
    d_mask: Optional[Tensor] = None


@dataclass
class ContextBank:
    rgb_cxt: Tensor
    d_cxt: Optional[Tensor]
    joint: Tensor


@dataclass
class GcfmIntermediates:
    q: Tensor
    keys: Tensor
    values: Tensor
    attn: Tensor


@dataclass
class GcfmConfig:
    k_contexts: int = 15
    channels: int = 64
    variant: str = "full"

    def __post_init__(self):
        if not 1 <= self.k_contexts <= 64:
            raise ValueError(f"k_contexts must be in [1, 64], got {self.k_contexts}")
        if self.channels % 4:
            raise ValueError(f"G-CFM channels must be divisible by 4, got {self.channels}")
        if self.variant not in GCFM_VARIANTS:
            raise ValueError(f"unknown G-CFM variant {self.variant!r}")


@dataclass
class NormMonitor:
    """Running worst-case deviation of mask planes and attention rows from 1."""

    forwards: int = 0
    mask_err: float = 0.0
    attn_err: float = 0.0
    history: list = field(default_factory=list)

    def record(self, masks: PoolingMasks, attn: Tensor) -> None:
        mask_err = 0.0
        for m in (masks.rgb_mask, masks.d_mask):
            if m is not None:
                sums = m.data.astype(np.float64).sum(axis=(2, 3))
                mask_err = max(mask_err, float(np.abs(sums - 1).max()))
        attn_err = float(np.abs(attn.data.astype(np.float64).sum(axis=-1) - 1).max())
        self.forwards += 1
        self.mask_err = max(self.mask_err, mask_err)
        self.attn_err = max(self.attn_err, attn_err)
        self.history.append((mask_err, attn_err))


def additive_fuse(f: RgbdFeatures) -> Tensor:
    return ops.add(f.rgb, f.depth)


def identity_grid(n: int, h: int, w: int, dtype) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys])[None], (n, 2, h, w))


def warp(x: Tensor, offset: Tensor) -> Tensor:
    """Resample ``x`` at ``p + offset(p)`` for every pixel ``p``."""
    n, _, h, w = x.shape
    if offset.shape != (n, 2, h, w):
        raise ShapeError(f"offset field {offset.shape} does not match feature {x.shape}")
    coords = ops.add(offset, Tensor(identity_grid(n, h, w, offset.dtype)))
    return ops.bilinear_sample(x, coords)


class LCFM(Module):
    """Offset-predict-and-warp alignment of the two modalities.

    The offset conv starts at zero, so a fresh module is exactly
    :func:`additive_fuse`.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.offset_conv = Conv2d(2 * channels, 4, 3, rng, pad=1, zero_init=True)

    def predict_offsets(self, f: RgbdFeatures) -> OffsetField:
        raw = self.offset_conv(ops.concat_channels(f.rgb, f.depth))
        return OffsetField(raw[:, 0:2], raw[:, 2:4])

    def forward(self, f: RgbdFeatures) -> Tensor:
        off = self.predict_offsets(f)
        return ops.add(warp(f.rgb, off.rgb_offset), warp(f.depth, off.d_offset))


class GCFM(Module):
    """Mask-pooled context attention from RGB pixels over a context bank.

    ``variant`` selects where the context vectors come from:

    ``"full"``
        K vectors from RGB and K from depth (independent mask convs).
    ``"var1"``
        K vectors from RGB only; depth is never read.
    ``"var2"``
        K vectors from ``rgb + depth``.
    """

    def __init__(self, cfg: GcfmConfig, rng: np.random.Generator):
        c, k = cfg.channels, cfg.k_contexts
        self.cfg = cfg
        self.rgb_mask_conv = Conv2d(c, k, 1, rng)
        if cfg.variant == "full":
            self.d_mask_conv = Conv2d(c, k, 1, rng)
        self.query_conv = Conv2d(c, c // 4, 1, rng)
        self.key_lin = Linear(c, c // 4, rng)
        self.value_lin = Linear(c, c, rng)
        self.monitor = NormMonitor()
        self.last_masks: Optional[PoolingMasks] = None
        self.last_intermediates: Optional[GcfmIntermediates] = None

    @staticmethod
    def _pool(feature: Tensor, conv: Conv2d) -> tuple[Tensor, Tensor]:
        n, c, h, w = feature.shape
        mask = ops.spatial_softmax(conv(feature))
        k = mask.shape[1]
        cxt = ops.matmul(mask.reshape(n, k, h * w),
                         ops.transpose(feature.reshape(n, c, h * w)))
        return mask, cxt

    def extract_contexts(self, f: RgbdFeatures) -> tuple[PoolingMasks, ContextBank]:
        variant = self.cfg.variant
        if variant == "var1":
            mask, cxt = self._pool(f.rgb, self.rgb_mask_conv)
            return PoolingMasks(mask), ContextBank(cxt, None, cxt)
        if variant == "var2":
            mask, cxt = self._pool(additive_fuse(f), self.rgb_mask_conv)
            return PoolingMasks(mask), ContextBank(cxt, None, cxt)
        rgb_mask, rgb_cxt = self._pool(f.rgb, self.rgb_mask_conv)
        d_mask, d_cxt = self._pool(f.depth, self.d_mask_conv)
        joint = ops.concat([rgb_cxt, d_cxt], axis=1)
        return PoolingMasks(rgb_mask, d_mask), ContextBank(rgb_cxt, d_cxt, joint)

    def attend(self, rgb_in: Tensor, bank: ContextBank) -> Tensor:
        n, c, h, w = rgb_in.shape
        if c % 4:
            raise ValueError(f"G-CFM channels must be divisible by 4, got {c}")
        q = self.query_conv(rgb_in)
        keys = ops.transpose(self.key_lin(bank.joint))      # [N,C',2K]
        values = ops.transpose(self.value_lin(bank.joint))  # [N,C,2K]
        qt = ops.transpose(q.reshape(n, c // 4, h * w))     # [N,HW,C']
        attn = ops.channel_softmax(ops.matmul(qt, keys))    # [N,HW,2K]
        attended = ops.matmul(attn, ops.transpose(values))  # [N,HW,C]
        out = ops.transpose(attended).reshape(n, c, h, w)
        self.last_intermediates = GcfmIntermediates(q, keys, values, attn)
        return ops.add(out, rgb_in)

    def forward(self, f: RgbdFeatures) -> Tensor:
        masks, bank = self.extract_contexts(f)
        out = self.attend(f.rgb, bank)
        self.last_masks = masks
        self.monitor.record(masks, self.last_intermediates.attn)
        return out


class Stage4Fusion(Module):
    """Parallel L-CFM / G-CFM followed by a conv block, or the additive fallback.

    The L-CFM and G-CFM modules themselves are owned by the caller so their
    parameters keep top-level names; this module holds only the merge block.
    """

    def __init__(self, channels: int, use_lcfm: bool, use_gcfm: bool, rng: np.random.Generator):
        self.use_lcfm, self.use_gcfm = use_lcfm, use_gcfm
        n_in = int(use_lcfm) + int(use_gcfm)
        self.merge_conv = ConvBNReLU(n_in * channels, channels, 3, rng) if n_in else None

    def forward(self, f: RgbdFeatures, lcfm: Optional[LCFM], gcfm: Optional[GCFM]) -> Tensor:
        branches = []
        if self.use_lcfm:
            branches.append(lcfm(f))
        if self.use_gcfm:
            branches.append(gcfm(f))
        if not branches:
            return additive_fuse(f)
        merged = branches[0] if len(branches) == 1 else ops.concat_channels(*branches)
        return self.merge_conv(merged)
