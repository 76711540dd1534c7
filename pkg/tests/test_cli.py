import subprocess
import sys

import numpy as np
import pytest

from cfnet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from cfnet.harness.checkpoint import load_checkpoint
from cfnet.harness.pnm import read_pnm

SMALL = "8,16,16,16,16,8"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "cfnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("synth", "train", "denoise", "eval", "gradcheck", "export"):
        assert cmd in r.stdout


def test_usage_errors(capsys):
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["synth", "--out", "x"]) == EXIT_USAGE
    assert main(["gradcheck", "--scope", "nope"]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "missing")]) == EXIT_DATA
    assert main(["denoise", str(tmp_path / "a.pgm"), "--ckpt", str(tmp_path / "c.cfn"), "--out", "o.pgm"]) == EXIT_DATA


def test_synth_and_eval(tmp_path, capsys):
    clean = tmp_path / "clean"
    assert main(["synth", "--fixtures", "3", "--size", "32", "--out", str(clean)]) == EXIT_OK
    noisy = tmp_path / "noisy"
    assert main(["synth", str(clean), "--out", str(noisy), "--sigma-maps", "--noise", "hetero"]) == EXIT_OK
    assert len(list(noisy.glob("*_sigma.pgm"))) == 3
    capsys.readouterr()
    assert main(["eval", "--data", str(clean), "--report", str(tmp_path / "r.txt")]) == EXIT_OK
    out = capsys.readouterr().out
    assert out == (tmp_path / "r.txt").read_text()
    assert out.splitlines()[-1].startswith("MEAN\t20.")


def test_train_denoise_export(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CFNET_THREADS", "1")
    data = tmp_path / "data"
    main(["synth", "--fixtures", "4", "--size", "32", "--out", str(data)])
    run = tmp_path / "run"
    args = ["train", "--data", str(data), "--out", str(run), "--iters", "3", "--batch", "2", "--patch", "16",
            "--width-plan", SMALL, "--set", "arch.g=4", "--set", "nem_width=8", "--set", "val_every=3"]
    assert main(args) == EXIT_OK
    assert "iterations=3" in capsys.readouterr().out
    ck = load_checkpoint(run / "last.cfn")
    assert ck.arch.width_plan == (8, 16, 16, 16, 16, 8) and ck.iteration == 3

    img = sorted(data.iterdir())[0]
    out = tmp_path / "d.pgm"
    assert main(["denoise", str(img), "--ckpt", str(run / "last.cfn"), "--out", str(out),
                 "--sigma-out", str(tmp_path / "s.pgm"), "--tile", "16", "--overlap", "4"]) == EXIT_OK
    assert read_pnm(out).shape == (1, 32, 32)
    assert main(["denoise", str(img), "--ckpt", str(run / "last.cfn"), "--out", str(out),
                 "--tile", "16", "--overlap", "16"]) == EXIT_USAGE

    assert main(["export", "--ckpt", str(run / "last.cfn"), "--image", str(img), "--what", "noisemaps",
                 "--out", str(tmp_path / "maps")]) == EXIT_OK
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 6
    assert main(["export", "--ckpt", str(run / "last.cfn"), "--image", str(img), "--what", "kernels",
                 "--out", str(tmp_path / "k"), "--pos", "2,3"]) == EXIT_OK
    assert main(["export", "--ckpt", str(run / "last.cfn"), "--image", str(img), "--what", "kernels",
                 "--out", str(tmp_path / "k"), "--pos", "oops"]) == EXIT_USAGE
    assert main(["export", "--ckpt", str(run / "last.cfn"), "--image", str(img), "--what", "kernels",
                 "--out", str(tmp_path / "k"), "--pos", "500,1"]) == EXIT_USAGE

    # resuming against a different architecture is a data error
    bad = args[:-8] + ["--resume", str(run / "last.cfn"), "--width-plan", "16,32,64,64,32,16"]
    assert main(bad) == EXIT_DATA


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert main(["gradcheck", "--scope", "primitive"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out

    import cfnet.cli as cli
    from cfnet.harness.gradcheck import GradcheckReport, Probe

    monkeypatch.setattr(cli, "gradcheck", lambda *a: GradcheckReport("cfb", 1e-4, [Probe("w", (0,), 1.0, 2.0)]))
    assert main(["gradcheck", "--scope", "cfb"]) == EXIT_NUMERIC
    assert "failed: w[0]" in capsys.readouterr().out


def test_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("this line is broken\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_USAGE
