"""Synthetic RGB-D scenes whose labels cannot be recovered from colour alone.

Each scene is a background wall plus a handful of rectangles and ellipses.
The last two classes share the same colour distribution and differ only in
the depth plane they sit on, so telling them apart needs depth. The depth
map is then translated ``misalignment_px`` pixels to the right relative to
RGB and labels, which is the disalignment an aligning fusion must undo.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

BACKGROUND_DEPTH = 5.0


@dataclass
class SynthConfig:
    image_hw: tuple = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple = (3, 6)
    # depth planes (metres) the colour-ambiguous pair sits on
    depth_planes: tuple = (1.5, 3.0)
    misalignment_px: int = 2
    rgb_noise: float = 0.04
    depth_noise: float = 0.02
    depth_max: float = 6.0
    seed: int = 0
    # object size range as a fraction of the shorter image side
    size_range: tuple = (0.2, 0.45)

    def __post_init__(self):
        self.image_hw = tuple(int(v) for v in self.image_hw)
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        self.depth_planes = tuple(float(v) for v in self.depth_planes)
        self.size_range = tuple(float(v) for v in self.size_range)
        if self.misalignment_px < 0:
            raise ValueError("misalignment_px must be >= 0")
        if len(self.depth_planes) < 2:
            raise ValueError("need at least two depth planes")
        if self.num_classes < 3:
            raise ValueError("need a background class plus a colour-ambiguous pair")
        if max(self.depth_planes) >= BACKGROUND_DEPTH or BACKGROUND_DEPTH > self.depth_max:
            raise ValueError("object planes must lie in front of the wall, inside depth_max")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Palette:
    """Mean RGB per class; the last two classes share one entry."""

    colors: np.ndarray
    ambiguous: tuple = field(default=(0, 0))


def class_palette(num_classes: int) -> Palette:
    base = [
        (0.55, 0.52, 0.48),  # wall
        (0.80, 0.25, 0.20),
        (0.20, 0.55, 0.75),
        (0.85, 0.75, 0.25),
        (0.35, 0.70, 0.30),
        (0.60, 0.30, 0.65),
    ]
    colors = []
    for c in range(num_classes - 1):
        if c < len(base):
            colors.append(base[c])
        else:
            hue = (c * 0.618) % 1.0
            colors.append((0.3 + 0.5 * hue, 0.8 - 0.5 * hue, 0.5))
    colors.append(colors[-1])
    pair = (num_classes - 2, num_classes - 1)
    return Palette(np.asarray(colors, dtype=np.float64), pair)


def _shape_mask(rng: np.random.Generator, h: int, w: int, size_range) -> np.ndarray:
    side = min(h, w)
    sh = int(rng.integers(int(size_range[0] * side), int(size_range[1] * side) + 1))
    sw = int(rng.integers(int(size_range[0] * side), int(size_range[1] * side) + 1))
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    ys, xs = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return (np.abs(ys - cy) <= sh / 2) & (np.abs(xs - cx) <= sw / 2)
    return ((ys - cy) / (sh / 2)) ** 2 + ((xs - cx) / (sw / 2)) ** 2 <= 1


def shift_right(img: np.ndarray, delta: int) -> np.ndarray:
    """Translate the last axis by ``delta`` pixels, replicating the left edge."""
    if delta == 0:
        return img.copy()
    out = np.empty_like(img)
    out[..., delta:] = img[..., :-delta]
    out[..., :delta] = img[..., :1]
    return out


def render_scene(cfg: SynthConfig, rng: np.random.Generator):
    """One scene as ``(rgb [3,H,W] in [0,1], depth [H,W] metres, label [H,W])``.

    The returned depth is already misaligned; :func:`render_scene_aligned`
    exposes the aligned map too.
    """
    rgb, depth, label, _ = render_scene_aligned(cfg, rng)
    return rgb, depth, label


def render_scene_aligned(cfg: SynthConfig, rng: np.random.Generator):
    h, w = cfg.image_hw
    palette = class_palette(cfg.num_classes)
    near, far = cfg.depth_planes[0], cfg.depth_planes[1]

    label = np.zeros((h, w), dtype=np.uint8)
    wall_tilt = rng.uniform(-0.3, 0.3)
    depth = BACKGROUND_DEPTH + wall_tilt * (np.arange(h)[:, None] / h - 0.5) + np.zeros((h, w))
    mean_rgb = np.empty((3, h, w))
    mean_rgb[:] = (palette.colors[0] + rng.normal(0, 0.03, 3))[:, None, None]

    n_shapes = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
    objects = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes))
        if cls == palette.ambiguous[0]:
            z = near
        elif cls == palette.ambiguous[1]:
            z = far
        else:
            z = float(rng.uniform(min(cfg.depth_planes), max(cfg.depth_planes)))
        color = palette.colors[cls] + rng.normal(0, 0.03, 3)
        objects.append((z, cls, color, _shape_mask(rng, h, w, cfg.size_range)))
    # paint far to near so nearer objects occlude
    for z, cls, color, mask in sorted(objects, key=lambda o: -o[0]):
        label[mask] = cls
        depth[mask] = z
        mean_rgb[:, mask] = color[:, None]

    rgb = np.clip(mean_rgb + rng.normal(0, cfg.rgb_noise, mean_rgb.shape), 0, 1)
    aligned = np.clip(depth + rng.normal(0, cfg.depth_noise, depth.shape), 0, cfg.depth_max)
    return rgb, shift_right(aligned, cfg.misalignment_px), label, aligned


def generate_arrays(cfg: SynthConfig, count: int):
    """Stack ``count`` scenes; the RNG is seeded per sample index."""
    h, w = cfg.image_hw
    rgb = np.empty((count, 3, h, w))
    depth = np.empty((count, h, w))
    label = np.empty((count, h, w), dtype=np.uint8)
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, i])
        rgb[i], depth[i], label[i] = render_scene(cfg, rng)
    return rgb, depth, label
