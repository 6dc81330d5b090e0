import re
import subprocess
import sys

import numpy as np
import pytest

from glpnet.cli import build_parser, main
from glpnet.data import read_pnm

TINY = ["--set", "backbone.channels=8,8,16,16", "--set", "backbone.blocks=1", "--set", "train.crop_hw=32,32",
        "--set", "decoder.channels=8", "--log-level", "WARNING"]


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "train"), "--count", "8", "--size", "32", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(root / "test"), "--count", "4", "--size", "32", "--seed", "2",
                 "--split", "test"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(datasets):
    out = datasets / "run"
    code = main(["train", "--data", str(datasets / "train"), "--test-data", str(datasets / "test"),
                 "--out", str(out), "--epochs", "2", "--use-lcfm", "--use-gcfm", "--k", "3"] + TINY)
    assert code == 0
    return out


def test_help_lists_every_flag():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for flag in ("--config", "--out", "--seed", "--epochs", "--k", "--use-lcfm", "--use-gcfm", "--use-decoder",
                 "--lcfm-stages", "--mg", "--ms-scales", "--precision"):
        assert flag in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "glpnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "vismasks" in res.stdout


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["gradcheck", "--no-such-flag"])
    assert err.value.code == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path, datasets):
    (tmp_path / "bad.cfg").write_text("use_gcfm=true\nwarp.mode=nearest\n")
    code = main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(datasets / "train"),
                 "--out", str(tmp_path)])
    assert code == 1


def test_unreadable_config_is_usage_error(tmp_path, datasets):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--data", str(datasets / "train")]) == 1


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "void"), "--out", str(tmp_path)] + TINY) == 2


def test_train_outputs(trained):
    for name in ("checkpoint.glt", "train_log.csv", "loss_curve.png", "metrics.json", "config.resolved"):
        assert (trained / name).is_file(), name
    resolved = (trained / "config.resolved").read_text()
    assert "use_lcfm=true" in resolved and "gcfm.k=3" in resolved and "backbone.channels=8,8,16,16" in resolved
    assert (trained / "train_log.csv").read_text().startswith("epoch,iter,lr,loss,main,aux1,aux2,miou\n")


def test_flags_override_config_file(tmp_path, datasets):
    (tmp_path / "c.cfg").write_text("gcfm.k=9\nuse_gcfm=true\ntrain.epochs=5\n")
    out = tmp_path / "o"
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--k", "2", "--epochs", "1",
                 "--data", str(datasets / "train"), "--out", str(out)] + TINY) == 0
    resolved = (out / "config.resolved").read_text()
    assert "gcfm.k=2\n" in resolved and "train.epochs=1\n" in resolved and "use_gcfm=true\n" in resolved


def test_eval_and_mismatch(trained, datasets, capsys):
    assert main(["eval", "--ckpt", str(trained / "checkpoint.glt"), "--data", str(datasets / "test"),
                 "--out", str(trained / "eval"), "--ms-scales", "0.75,1.0", "--flip"]) == 0
    assert '"miou"' in capsys.readouterr().out
    assert "eval.ms_scales=0.75,1.0" in (trained / "eval" / "config.resolved").read_text()
    assert main(["eval", "--ckpt", str(trained / "checkpoint.glt"), "--data", str(datasets / "test"),
                 "--out", str(trained / "eval"), "--k", "4"]) == 2
    assert "mismatch" in capsys.readouterr().err


def test_vismasks_writes_two_k_heatmaps(trained, datasets, capsys):
    out = trained / "masks"
    assert main(["vismasks", "--ckpt", str(trained / "checkpoint.glt"), "--data", str(datasets / "test"),
                 "--sample", "1", "--out", str(out), "--log-level", "INFO"]) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 2 * 3
    assert read_pnm(pgms[0]).shape == (2, 2)
    sums = [float(m) for m in re.findall(r"sum=([0-9.]+)", capsys.readouterr().err)]
    assert len(sums) == 6 and np.allclose(sums, 1.0, atol=1e-6)
    assert (out / "mask_grid.png").is_file()


def test_vismasks_alias_and_bad_sample(trained, datasets):
    assert main(["vis-masks", "--ckpt", str(trained / "checkpoint.glt"), "--data", str(datasets / "test"),
                 "--sample", "99", "--out", str(trained / "m2")]) == 1


def test_vismasks_without_gcfm_is_data_error(datasets, tmp_path):
    out = tmp_path / "plain"
    assert main(["train", "--data", str(datasets / "train"), "--out", str(out), "--epochs", "1"] + TINY) == 0
    assert main(["vismasks", "--ckpt", str(out / "checkpoint.glt"), "--data", str(datasets / "test"),
                 "--out", str(tmp_path / "m")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_training_exit_code(datasets, tmp_path):
    code = main(["train", "--data", str(datasets / "train"), "--out", str(tmp_path), "--epochs", "3",
                 "--set", "train.base_lr=1e12"] + TINY)
    assert code == 3
    assert (tmp_path / "nonfinite_batch.glt").is_file()


def test_ablate_is_byte_deterministic(tmp_path):
    args = ["ablate", "--suite", "table1", "--seed", "7", "--epochs", "1", "--n-train", "4", "--n-test", "2",
            "--set", "backbone.channels=4,4,8,8"] + TINY
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "ablation_table1.md").read_bytes()
    assert a == (tmp_path / "b" / "ablation_table1.md").read_bytes()
    assert a.decode().count("\n") == 2 + 7
    assert (tmp_path / "a" / "ablation_table1.png").is_file()
    assert "train.base_lr=0.02\n" in (tmp_path / "a" / "config.resolved").read_text()
    assert (tmp_path / "a" / "ablation_table1.csv").read_text().startswith("config,seed,acc,macc,miou\n")


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--precision", "f64", "--out", str(tmp_path)]) == 0
    report = capsys.readouterr().out
    for op in ("conv2d", "bilinear_sample", "lcfm_forward", "gcfm_forward_full", "fusion_stage4"):
        assert op in report
    assert "FAIL" not in report
    assert (tmp_path / "gradcheck.txt").read_text().strip() == report.strip()
