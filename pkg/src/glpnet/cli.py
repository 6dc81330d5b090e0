"""``glpnet`` command line: synth, train, eval, gradcheck, ablate, vismasks.

Exit codes: 0 success, 1 usage or config error, 2 data or checkpoint error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from glpnet import ablation, gradcheck, plotting
from glpnet.config import (ConfigError, RunConfig, build_model, dump_config, from_flat, load_checkpoint, load_config,
                           model_mismatch, parse_config_text, save_checkpoint)
from glpnet.data import (DataError, FormatError, SynthConfig, load_arrays, load_manifest, load_sample,
                         synth_generate, write_pgm_heatmap)
from glpnet.metrics import metrics_report
from glpnet.tensor import NonFiniteError, Tensor, no_grad, precision
from glpnet.training import evaluate, train_loop

log = logging.getLogger("glpnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--out", help="output directory (created if missing)")
    g.add_argument("--seed", type=int, help="run seed (data order, augmentation, initialisation)")
    g.add_argument("--precision", choices=["f32", "f64"], help="floating point precision")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.base_lr=0.01 (repeatable)")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    if not model_flags:
        return
    m = p.add_argument_group("model and schedule")
    m.add_argument("--epochs", type=int, help="training epochs")
    m.add_argument("--k", type=int, help="number of G-CFM context vectors per modality")
    m.add_argument("--use-lcfm", action=argparse.BooleanOptionalAction, default=None, help="L-CFM at stage 4")
    m.add_argument("--use-gcfm", action=argparse.BooleanOptionalAction, default=None, help="G-CFM at stage 4")
    m.add_argument("--use-decoder", action=argparse.BooleanOptionalAction, default=None,
                   help="FPN-style decoder with auxiliary heads")
    m.add_argument("--lcfm-stages", help="comma list of stages (1-4) that fuse through L-CFM")
    m.add_argument("--mg", action=argparse.BooleanOptionalAction, default=None,
                   help="multi-grid dilations (1,2,4) in the last stage")
    m.add_argument("--ms-scales", help="comma list of test scales, e.g. 0.75,1.0,1.25")
    m.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None,
                   help="average over horizontal flips at test time")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glpnet", description="Two-stream RGB-D segmentation with local and global fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    _add_common(p, model_flags=False)
    p.add_argument("--count", type=int, default=200, help="number of scenes")
    p.add_argument("--split", default="train")
    p.add_argument("--delta", type=int, default=2, help="depth misalignment in pixels")
    p.add_argument("--size", type=int, default=64, help="image side length")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--test-data", help="held-out dataset scored after every epoch")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and fusion module")
    _add_common(p, model_flags=False)

    p = sub.add_parser("ablate", help="train and score a named ablation grid")
    _add_common(p)
    p.add_argument("--suite", required=True, choices=sorted(ablation.SUITES))
    p.add_argument("--seeds", help="comma list of seeds (default: --seed)")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--delta", type=int, default=2, help="depth misalignment in pixels")

    p = sub.add_parser("vismasks", aliases=["vis-masks"], help="write G-CFM pooling masks as PGM heatmaps")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0, help="sample index in the dataset")
    return parser


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values.update(parse_config_text(item))
    flag_keys = {"seed": "seed", "precision": "precision", "epochs": "train.epochs", "k": "gcfm.k",
                 "use_lcfm": "use_lcfm", "use_gcfm": "use_gcfm", "use_decoder": "use_decoder",
                 "lcfm_stages": "lcfm_stages", "ms_scales": "eval.ms_scales", "flip": "eval.flip"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = "true" if value is True else "false" if value is False else str(value)
    mg = getattr(args, "mg", None)
    if mg is not None:
        values["backbone.dilations"] = "1,2,4" if mg else "1,1,1"
    return values


def resolve(args, base: RunConfig | None = None) -> RunConfig:
    if args.config:
        base = load_config(args.config, base)
    return from_flat(_overrides(args), base)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: RunConfig) -> None:
    (out / "config.resolved").write_text(dump_config(cfg))


def _dataset(path):
    manifest = load_manifest(path)
    return manifest, load_arrays(manifest)


def _check_classes(manifest, cfg: RunConfig) -> None:
    if manifest.num_classes != cfg.model.num_classes:
        raise DataError(f"dataset has {manifest.num_classes} classes, config expects {cfg.model.num_classes}")


def cmd_synth(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args)
    synth = SynthConfig(image_hw=(args.size, args.size), num_classes=cfg.model.num_classes,
                        misalignment_px=args.delta, seed=cfg.seed)
    manifest = synth_generate(synth, out, args.count, args.split)
    _write_resolved(out, cfg)
    print(f"wrote {len(manifest)} {args.split} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args)
    _write_resolved(out, cfg)
    manifest, train_data = _dataset(args.data)
    _check_classes(manifest, cfg)
    test_data = None
    if args.test_data:
        test_manifest, test_data = _dataset(args.test_data)
        _check_classes(test_manifest, cfg)
    model = build_model(cfg)
    result = train_loop(model, train_data, cfg.train, test_data=test_data, num_classes=cfg.model.num_classes,
                        log_path=out / "train_log.csv", dump_dir=out)
    save_checkpoint(out / "checkpoint.glt", model, cfg)
    plotting.plot_loss_curve(result.history, out / "loss_curve.png")
    if result.final_metrics is not None:
        (out / "metrics.json").write_text(metrics_report(result.final_metrics) + "\n")
        print(metrics_report(result.final_metrics))
    print(f"trained {result.iterations} iterations; checkpoint at {out / 'checkpoint.glt'}")
    return EXIT_OK


def _load_model(args):
    """Checkpoint plus the effective config: file or checkpoint config, then flag overrides."""
    try:
        model, ckpt_cfg = load_checkpoint(args.ckpt)
        cfg = resolve(args, base=ckpt_cfg)
        diff = model_mismatch(cfg, ckpt_cfg)
        if diff:
            raise ConfigError(f"checkpoint/config mismatch in {', '.join(diff)}")
    except ConfigError as exc:
        if args.config and not Path(args.config).is_file():
            raise
        raise DataError(str(exc)) from exc
    if cfg.dtype != model.parameters()[0].dtype:
        raise DataError(f"checkpoint precision is {ckpt_cfg.precision}, requested {cfg.precision}")
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_model(args)
    out = _out_dir(args)
    _write_resolved(out, cfg)
    manifest, (rgb, depth, label) = _dataset(args.data)
    _check_classes(manifest, cfg)
    with precision(cfg.dtype):
        metrics = evaluate(model, rgb, depth, label, cfg.model.num_classes,
                           scales=cfg.ms_scales, flip=cfg.ms_flip, scale_depth=cfg.train.scale_depth)
    report = metrics_report(metrics)
    (out / "metrics.json").write_text(report + "\n")
    print(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve(args, base=from_flat({"precision": "f64"}))
    out = Path(args.out) if args.out else None
    ok, report = gradcheck.main_report(seed=cfg.seed, dtype=cfg.dtype)
    print(report)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(out, cfg)
        (out / "gradcheck.txt").write_text(report + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    cfg = resolve(args, base=from_flat(ablation.ACCEPTANCE_RECIPE))
    out = _out_dir(args)
    _write_resolved(out, cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    synth = SynthConfig(num_classes=cfg.model.num_classes, misalignment_px=args.delta,
                        image_hw=cfg.train.crop_hw)

    def progress(name, seed, metrics, elapsed):
        print(f"{name:<30} seed {seed}: mIoU {100 * metrics['miou']:6.2f}  ({elapsed:.0f}s)", flush=True)

    rows = ablation.SUITES[args.suite]
    results = ablation.run_suite(rows, cfg, seeds, synth, args.n_train, args.n_test, progress=progress)
    table = ablation.format_table(results)
    stem = out / f"ablation_{args.suite}"
    stem.with_suffix(".md").write_text(table)
    stem.with_suffix(".csv").write_text(ablation.format_csv(results))
    plotting.plot_ablation(results, stem.with_suffix(".png"), title=args.suite)
    print(table, end="")
    return EXIT_OK


def cmd_vismasks(args) -> int:
    model, cfg = _load_model(args)
    if model.gcfm is None:
        raise DataError("checkpoint has no G-CFM module; nothing to visualise")
    out = _out_dir(args)
    _write_resolved(out, cfg)
    manifest = load_manifest(args.data)
    if not 0 <= args.sample < len(manifest):
        raise UsageError(f"--sample must lie in [0, {len(manifest)})")
    sample = load_sample(manifest, args.sample)
    model.eval()
    with no_grad(), precision(cfg.dtype):
        rgb = Tensor(sample.rgb[None].astype(cfg.dtype))
        depth = Tensor(sample.depth[None].astype(cfg.dtype))
        model(rgb, depth)
    masks = model.gcfm.last_masks
    planes = {"rgb": masks.rgb_mask.data[0]}
    if masks.d_mask is not None:
        planes["depth"] = masks.d_mask.data[0]
    written = 0
    for name, stack in planes.items():
        for k, plane in enumerate(stack):
            write_pgm_heatmap(plane, out / f"mask_{name}_{k:02d}.pgm")
            log.info("mask %s k=%d sum=%.9f", name, k, float(plane.astype(np.float64).sum()))
            written += 1
    plotting.plot_mask_grid(planes, out / "mask_grid.png")
    print(f"wrote {written} heatmaps to {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "vismasks": cmd_vismasks, "vis-masks": cmd_vismasks}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"glpnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError, KeyError) as exc:
        print(f"glpnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"glpnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
