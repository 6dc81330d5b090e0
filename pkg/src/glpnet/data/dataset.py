"""On-disk datasets: ``root/{rgb,depth,label}/NNNNN.{ppm,pgm,pgm}`` plus ``manifest.txt``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from glpnet.data.netpbm import read_pnm, write_pgm, write_ppm
from glpnet.data.synth import SynthConfig, generate_arrays
from glpnet.metrics import IGNORE_INDEX

MANIFEST_NAME = "manifest.txt"


class DataError(ValueError):
    pass


@dataclass
class RgbdSample:
    rgb: np.ndarray    # [3,H,W] float32 in [0,1]
    depth: np.ndarray  # [1,H,W] float32, metres / depth_max
    label: np.ndarray  # [H,W] int64

    def __post_init__(self):
        h, w = self.label.shape
        if self.rgb.shape != (3, h, w) or self.depth.shape != (1, h, w):
            raise DataError(f"extents differ: rgb {self.rgb.shape} depth {self.depth.shape} label {self.label.shape}")


@dataclass
class DatasetManifest:
    root: Path
    samples: list
    num_classes: int
    depth_max: float
    split: str = "train"
    image_hw: tuple | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "num_classes": self.num_classes,
            "depth_max": self.depth_max,
            "image_hw": list(self.image_hw) if self.image_hw else None,
            "samples": self.samples,
        }
        doc.update(self.extra)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(self.to_json())
        return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    known = {"split", "num_classes", "depth_max", "image_hw", "samples"}
    try:
        manifest = DatasetManifest(
            root=path.parent,
            samples=list(doc["samples"]),
            num_classes=int(doc["num_classes"]),
            depth_max=float(doc["depth_max"]),
            split=doc.get("split", "train"),
            image_hw=tuple(doc["image_hw"]) if doc.get("image_hw") else None,
            extra={k: v for k, v in doc.items() if k not in known},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"manifest {path} is missing or has a bad field: {exc}") from None
    for entry in manifest.samples:
        for key in ("rgb", "depth", "label"):
            if not (manifest.root / entry[key]).is_file():
                raise DataError(f"manifest lists missing file {entry[key]}")
    return manifest


def load_sample(manifest: DatasetManifest, index: int) -> RgbdSample:
    entry = manifest.samples[index]
    rgb = read_pnm(manifest.root / entry["rgb"])
    depth = read_pnm(manifest.root / entry["depth"])
    label = read_pnm(manifest.root / entry["label"])
    if rgb.ndim != 3 or depth.ndim != 2 or label.ndim != 2:
        raise DataError(f"sample {index}: wrong channel layout")
    if depth.dtype != np.uint16:
        raise DataError(f"sample {index}: depth must be a 16-bit PGM")
    hw = rgb.shape[:2]
    if depth.shape != hw or label.shape != hw or (manifest.image_hw and tuple(manifest.image_hw) != hw):
        raise DataError(f"sample {index}: extents {hw}/{depth.shape}/{label.shape} disagree with manifest")
    lab = label.astype(np.int64)
    bad = (lab >= manifest.num_classes) & (lab != IGNORE_INDEX)
    if bad.any():
        raise DataError(f"sample {index}: label ids outside [0, {manifest.num_classes})")
    return RgbdSample(
        rgb=(rgb.transpose(2, 0, 1) / 255.0).astype(np.float32),
        depth=(depth[None] / 1000.0 / manifest.depth_max).astype(np.float32),
        label=lab,
    )


def load_arrays(manifest: DatasetManifest):
    """All samples stacked: ``rgb [N,3,H,W]``, ``depth [N,1,H,W]``, ``label [N,H,W]``."""
    samples = [load_sample(manifest, i) for i in range(len(manifest))]
    return (np.stack([s.rgb for s in samples]), np.stack([s.depth for s in samples]),
            np.stack([s.label for s in samples]))


def _encode(rgb: np.ndarray, depth_m: np.ndarray):
    """The integer images stored on disk: 8-bit RGB (HWC) and depth in millimetres."""
    return (np.round(rgb.transpose(1, 2, 0) * 255).astype(np.uint8),
            np.round(np.clip(depth_m, 0, 65.535) * 1000).astype(np.uint16))


def synth_arrays(cfg: SynthConfig, count: int):
    """Same arrays :func:`load_arrays` returns for ``synth_generate(cfg, ..., count)``, without disk I/O."""
    rgb, depth, label = generate_arrays(cfg, count)
    out_rgb, out_depth = [], []
    for i in range(count):
        r8, d16 = _encode(rgb[i], depth[i])
        out_rgb.append((r8.transpose(2, 0, 1) / 255.0).astype(np.float32))
        out_depth.append((d16[None] / 1000.0 / cfg.depth_max).astype(np.float32))
    return np.stack(out_rgb), np.stack(out_depth), label.astype(np.int64)


def write_dataset(root, rgb: np.ndarray, depth_m: np.ndarray, label: np.ndarray, num_classes: int,
                  depth_max: float, split: str, extra: dict | None = None) -> DatasetManifest:
    root = Path(root)
    for sub in ("rgb", "depth", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(len(rgb)):
        name = f"{i:05d}"
        entry = {"rgb": f"rgb/{name}.ppm", "depth": f"depth/{name}.pgm", "label": f"label/{name}.pgm"}
        r8, d16 = _encode(rgb[i], depth_m[i])
        write_ppm(root / entry["rgb"], r8)
        write_pgm(root / entry["depth"], d16)
        write_pgm(root / entry["label"], label[i].astype(np.uint8))
        samples.append(entry)
    manifest = DatasetManifest(root, samples, num_classes, depth_max, split,
                               tuple(rgb.shape[2:]), extra or {})
    manifest.write()
    return manifest


def synth_generate(cfg: SynthConfig, root, count: int, split: str = "train") -> DatasetManifest:
    rgb, depth, label = generate_arrays(cfg, count)
    return write_dataset(root, rgb, depth, label, cfg.num_classes, cfg.depth_max, split,
                         {"synth": cfg.to_dict()})
