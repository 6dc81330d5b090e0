"""Named ablation grids over the fusion switches, run on synthetic RGB-D data.

Each suite is a list of rows; a row is a display name plus flat config
overrides (see :mod:`glpnet.config`). Every row is trained once per seed
from the same base config and scored on a held-out split. The seed picks
both the synthetic scenes and the initialisation, and rows sharing a seed
share the initial weights of every module they have in common.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from glpnet.config import RunConfig, build_model, replace
from glpnet.data.dataset import synth_arrays
from glpnet.data.synth import SynthConfig
from glpnet.training import evaluate, train_loop

log = logging.getLogger(__name__)

MS = {"eval.ms_scales": "0.75,1.0,1.25", "eval.flip": "true"}
MG = {"backbone.dilations": "1,2,4"}
BOTH = {"use_lcfm": "true", "use_gcfm": "true"}

# Desk-scale training recipe for the synthetic ablations and the base config of `glpnet ablate`.
# Offsets live on a 4x4 map at 64x64 input, so their learning rate is damped.
ACCEPTANCE_RECIPE = {"train.base_lr": "0.02", "train.epochs": "15", "train.offset_lr_mult": "0.01"}

SUITES: dict[str, list[tuple[str, dict]]] = {
    "table1": [
        ("baseline", {}),
        ("+L-CFM", {"use_lcfm": "true"}),
        ("+G-CFM", {"use_gcfm": "true"}),
        ("+L-CFM +G-CFM", BOTH),
        ("+decoder", {**BOTH, "use_decoder": "true"}),
        ("+MG", {**BOTH, "use_decoder": "true", **MG}),
        ("+MS", {**BOTH, "use_decoder": "true", **MG, **MS}),
    ],
    "table2": [(f"L-CFM @ stage {s}", {"lcfm_stages": s})
               for s in ("1", "2", "3", "4", "1,2,3,4")],
    "table3": [
        ("G-CFM var1 (RGB contexts)", {"use_gcfm": "true", "gcfm.variant": "var1"}),
        ("G-CFM var2 (RGB+D contexts)", {"use_gcfm": "true", "gcfm.variant": "var2"}),
        ("G-CFM (multi-modal, K=15)", {"use_gcfm": "true", "gcfm.k": "15"}),
    ] + [(f"G-CFM K={k}", {"use_gcfm": "true", "gcfm.k": str(k)}) for k in (5, 10, 20, 25)],
}


@dataclass
class RowResult:
    name: str
    overrides: dict
    seeds: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def mean(self, key: str) -> float:
        return float(np.mean([m[key] for m in self.metrics]))


def split_data(synth: SynthConfig, seed: int, n_train: int, n_test: int):
    """Train/test arrays drawn from one seeded stream; scenes are seeded per index so the split is disjoint."""
    cfg = SynthConfig(**{**synth.to_dict(), "seed": seed})
    rgb, depth, label = synth_arrays(cfg, n_train + n_test)
    train = (rgb[:n_train], depth[:n_train], label[:n_train])
    test = (rgb[n_train:], depth[n_train:], label[n_train:])
    return train, test


def run_row(base: RunConfig, overrides: dict, seed: int, train_data, test_data) -> dict:
    cfg = replace(base, seed=seed, **overrides)
    model = build_model(cfg)
    train_loop(model, train_data, cfg.train)
    return evaluate(model, *test_data, num_classes=cfg.model.num_classes,
                    scales=cfg.ms_scales, flip=cfg.ms_flip, scale_depth=cfg.train.scale_depth)


def run_suite(rows, base: RunConfig, seeds, synth: SynthConfig, n_train: int = 200, n_test: int = 50,
              progress: Optional[Callable[[str, int, dict, float], None]] = None) -> list[RowResult]:
    results = [RowResult(name, dict(ov)) for name, ov in rows]
    for seed in seeds:
        train_data, test_data = split_data(synth, seed, n_train, n_test)
        for res in results:
            start = time.perf_counter()
            metrics = run_row(base, res.overrides, seed, train_data, test_data)
            res.seeds.append(seed)
            res.metrics.append(metrics)
            elapsed = time.perf_counter() - start
            log.info("%s seed %d miou %.4f (%.1fs)", res.name, seed, metrics["miou"], elapsed)
            if progress is not None:
                progress(res.name, seed, metrics, elapsed)
    return results


def format_table(results: list[RowResult]) -> str:
    """Markdown table of per-seed and mean scores, in percent with two decimals."""
    seeds = results[0].seeds if results else []
    head = ["config"] + [f"mIoU s{s}" for s in seeds] + ["mIoU", "mAcc", "Acc"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for res in results:
        cells = [res.name] + [f"{100 * m['miou']:.2f}" for m in res.metrics]
        cells += [f"{100 * res.mean(k):.2f}" for k in ("miou", "macc", "acc")]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def format_csv(results: list[RowResult]) -> str:
    lines = ["config,seed,acc,macc,miou"]
    for res in results:
        for seed, m in zip(res.seeds, res.metrics):
            lines.append(f"{res.name},{seed},{m['acc']!r},{m['macc']!r},{m['miou']!r}")
    return "\n".join(lines) + "\n"
