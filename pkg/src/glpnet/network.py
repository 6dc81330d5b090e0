"""Two-stream encoder, stage-4 fusion site and FPN-like decoder."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from glpnet import ops
from glpnet.fusion import GCFM, LCFM, GcfmConfig, RgbdFeatures, Stage4Fusion, additive_fuse
from glpnet.nn import Conv2d, ConvBNReLU, Module, ModuleList
from glpnet.tensor import ShapeError, Tensor

STAGE_STRIDES = (4, 8, 16, 16)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent init stream per named component.

    Switching an ablation flag then never changes how the remaining
    components are initialised, so configs sharing a seed are paired.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 64)
    last_stage_dilations: tuple = (1, 1, 1)
    blocks_per_stage: int = 2
    stage_strides: tuple = STAGE_STRIDES

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.last_stage_dilations = tuple(int(d) for d in self.last_stage_dilations)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError(f"need four positive stage widths, got {self.stage_channels}")
        if tuple(self.stage_strides) != STAGE_STRIDES:
            raise ValueError(f"stage strides are fixed at {STAGE_STRIDES}")
        if self.blocks_per_stage < 1 or not self.last_stage_dilations:
            raise ValueError("blocks_per_stage and last_stage_dilations must be non-empty")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gcfm_k: int = 15
    gcfm_variant: str = "full"
    use_lcfm: bool = False
    use_gcfm: bool = False
    use_decoder: bool = False
    lcfm_stages: tuple = ()
    num_classes: int = 4
    decoder_channels: int = 256

    def __post_init__(self):
        stages = set(int(s) for s in self.lcfm_stages)
        if not stages <= {1, 2, 3, 4}:
            raise ValueError(f"lcfm_stages must be a subset of 1..4, got {sorted(stages)}")
        if self.use_lcfm:
            stages.add(4)
        self.use_lcfm = 4 in stages
        self.lcfm_stages = tuple(sorted(stages))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def gcfm(self) -> GcfmConfig:
        return GcfmConfig(self.gcfm_k, self.backbone.stage_channels[3], self.gcfm_variant)


@dataclass
class StageFeatures:
    """Per-stage modality features; ``fused`` holds the RGB branch after propagation."""

    stages: list
    fused: list


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, dilation: int = 1):
        self.conv1 = ConvBNReLU(cin, cout, 3, rng, stride=stride, dilation=dilation)
        self.conv2 = ConvBNReLU(cout, cout, 3, rng, dilation=dilation, relu=False)
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(cin, cout, 1, rng, stride=stride, relu=False)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(self.conv2(self.conv1(x)), skip))


class Stream(Module):
    """One modality's backbone: a stride-4 stem and four residual stages.

    Stage 4 trades its stride for dilation 2, scaled per block by the
    multi-grid rates.
    """

    def __init__(self, in_channels: int, cfg: BackboneConfig, rng: np.random.Generator):
        c1, c2, c3, c4 = cfg.stage_channels
        self.stem = ModuleList([ConvBNReLU(in_channels, c1, 3, rng, stride=2),
                                ConvBNReLU(c1, c1, 3, rng, stride=2)])
        stages, cin = [], c1
        for s, cout in enumerate((c1, c2, c3, c4)):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if s in (1, 2) and b == 0 else 1
                dil = 1
                if s == 3:
                    rates = cfg.last_stage_dilations
                    dil = 2 * rates[b % len(rates)]
                blocks.append(ResidualBlock(cin, cout, rng, stride=stride, dilation=dil))
                cin = cout
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    def run_stem(self, x: Tensor) -> Tensor:
        for layer in self.stem:
            x = layer(x)
        return x

    def run_stage(self, s: int, x: Tensor) -> Tensor:
        for block in self.stages[s]:
            x = block(x)
        return x


class Decoder(Module):
    """Top-down path over the fused stage-4 map and the stage-2/stage-1 skips.

    All inputs are reduced to ``width`` channels by 1x1 conv blocks. The two
    auxiliary taps are the 1/8 map right after its skip merge and the 1/4
    map after its refine conv; the main classifier sees one further conv.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2, _, c4 = cfg.backbone.stage_channels
        d, k = cfg.decoder_channels, cfg.num_classes
        self.reduce4 = ConvBNReLU(c4, d, 1, rng)
        self.reduce2 = ConvBNReLU(c2, d, 1, rng)
        self.reduce1 = ConvBNReLU(c1, d, 1, rng)
        self.refine8 = ConvBNReLU(d, d, 3, rng)
        self.refine4 = ConvBNReLU(d, d, 3, rng)
        self.head = ConvBNReLU(d, d, 3, rng)
        self.classifier = Conv2d(d, k, 1, rng)
        self.aux1_cls = Conv2d(d, k, 1, rng)
        self.aux2_cls = Conv2d(d, k, 1, rng)

    def forward(self, fused4: Tensor, skip1: Tensor, skip2: Tensor):
        x = self.reduce4(fused4)
        x = ops.add(ops.bilinear_resize(x, *skip2.shape[2:]), self.reduce2(skip2))
        tap1 = x
        x = self.refine8(x)
        x = ops.add(ops.bilinear_resize(x, *skip1.shape[2:]), self.reduce1(skip1))
        x = self.refine4(x)
        tap2 = x
        return self.classifier(self.head(x)), (self.aux1_cls(tap1), self.aux2_cls(tap2))


class GLPNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        bb = cfg.backbone
        c4 = bb.stage_channels[3]
        self.rgb = Stream(3, bb, component_rng(seed, "rgb"))
        self.depth = Stream(1, bb, component_rng(seed, "depth"))
        for s in (1, 2, 3):
            if s in cfg.lcfm_stages:
                setattr(self, f"lcfm_s{s}", LCFM(bb.stage_channels[s - 1], component_rng(seed, f"lcfm_s{s}")))
        self.lcfm = LCFM(c4, component_rng(seed, "lcfm")) if cfg.use_lcfm else None
        self.gcfm = GCFM(cfg.gcfm, component_rng(seed, "gcfm")) if cfg.use_gcfm else None
        self.stage4 = Stage4Fusion(c4, cfg.use_lcfm, cfg.use_gcfm, component_rng(seed, "stage4"))
        if cfg.use_decoder:
            self.decoder = Decoder(cfg, component_rng(seed, "decoder"))
            self.classifier = None
        else:
            self.decoder = None
            self.classifier = Conv2d(c4, cfg.num_classes, 1, component_rng(seed, "classifier"))
        self.assign_names()

    def encode(self, rgb: Tensor, depth: Tensor) -> StageFeatures:
        n, _, h, w = rgb.shape
        if h % 16 or w % 16:
            raise ShapeError(f"input extents {h}x{w} must be divisible by 16")
        if depth.shape != (n, 1, h, w):
            raise ShapeError(f"depth shape {depth.shape} does not match rgb {rgb.shape}")
        r = self.rgb.run_stem(rgb)
        d = self.depth.run_stem(depth)
        stages, fused = [], []
        for s in range(4):
            r = self.rgb.run_stage(s, r)
            d = self.depth.run_stage(s, d)
            feats = RgbdFeatures(r, d)
            stages.append(feats)
            if s < 3:
                lcfm = getattr(self, f"lcfm_s{s + 1}", None)
                r = lcfm(feats) if lcfm is not None else additive_fuse(feats)
                fused.append(r)
        return StageFeatures(stages, fused)

    def forward(self, rgb: Tensor, depth: Tensor):
        """Return ``(logits, aux_logits)`` at input resolution; ``aux_logits`` is
        empty without the decoder."""
        h, w = rgb.shape[2:]
        enc = self.encode(rgb, depth)
        fused4 = self.stage4(enc.stages[3], self.lcfm, self.gcfm)
        if self.decoder is None:
            return ops.bilinear_resize(self.classifier(fused4), h, w), ()
        logits, aux = self.decoder(fused4, enc.fused[0], enc.fused[1])
        return (ops.bilinear_resize(logits, h, w),
                tuple(ops.bilinear_resize(a, h, w) for a in aux))


def encoder_forward(model: GLPNet, rgb: Tensor, depth: Tensor) -> StageFeatures:
    return model.encode(rgb, depth)


def model_forward(model: GLPNet, rgb: Tensor, depth: Tensor):
    return model(rgb, depth)
