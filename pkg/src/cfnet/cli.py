"""Command-line entry point: synth, train, denoise, eval, gradcheck, export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .harness.config import ConfigError, arch_config_from, load_config_file, parse_kv, train_config_from
from .harness.data import DatasetError, load_images, write_fixture_set
from .harness.gradcheck import SCOPES, gradcheck
from .harness.inference import NoiseSpec, denoise, evaluate, export_introspection
from .harness.optim import NumericalError
from .harness.pnm import PnmError, write_pnm
from .harness.train import train
from .network import ArchError
from .noise_synth import NoiseParamError
from .tensor_core import CheckpointError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cfnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _noise_args(p):
    p.add_argument("--noise", choices=("awgn", "hetero"), default="awgn")
    p.add_argument("--sigma", type=float, default=25.0, help="AWGN std on the 0-255 scale")
    p.add_argument("--sigma-d", type=float, default=0.08, help="signal-dependent std (hetero)")
    p.add_argument("--sigma-s", type=float, default=0.02, help="stationary std (hetero)")
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--quantize", type=int, default=0, choices=(0, 8, 16))
    p.add_argument("--seed", type=int, default=0)


def _spec(a) -> NoiseSpec:
    return NoiseSpec(a.noise, a.sigma, a.sigma_d, a.sigma_s, a.gamma, a.quantize, a.seed)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfnet", description="Conditional-filter denoising network (numpy).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="add synthetic noise to clean images, or write fixture scenes")
    s.add_argument("input", nargs="?", help="clean image or directory")
    s.add_argument("--out", required=True)
    s.add_argument("--fixtures", type=int, default=0, help="write N synthetic clean scenes instead")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--channels", type=int, default=1, choices=(1, 3))
    s.add_argument("--sigma-maps", action="store_true", help="also write the ground-truth sigma map")
    s.add_argument("--bits", type=int, default=8, choices=(8, 16))
    _noise_args(s)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--real", help="directory of <id>_clean / <id>_noisy pairs")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--iters", type=int, dest="max_iters")
    t.add_argument("--batch", type=int, dest="batch_size")
    t.add_argument("--patch", type=int, dest="patch_size")
    t.add_argument("--lr", type=float, dest="lr_init")
    t.add_argument("--mode", choices=("nonblind", "blind", "hetero"))
    t.add_argument("--sigma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.add_argument("--width-plan")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    d = sub.add_parser("denoise", help="denoise one image")
    d.add_argument("input")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--sigma-out")
    d.add_argument("--tile", type=int, default=0, help="tile size (0 = whole image)")
    d.add_argument("--overlap", type=int, default=16)
    d.add_argument("--bits", type=int, default=16, choices=(8, 16))

    e = sub.add_parser("eval", help="PSNR/SSIM over a clean dataset with seeded noise")
    e.add_argument("--ckpt", help="checkpoint; omit to score the noisy input itself")
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="write the report here as well as to stdout")
    e.add_argument("--tile", type=int, default=0)
    _noise_args(e)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=SCOPES, default="primitive")
    g.add_argument("--samples", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="architecture config for scope=full")
    g.add_argument("--verbose-probes", action="store_true")

    x = sub.add_parser("export", help="dump conditional kernels or noise-feature maps")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--what", choices=("kernels", "noisemaps"), required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--stage", type=int, default=1)
    x.add_argument("--block", type=int, default=0)
    x.add_argument("--pos", action="append", default=[], metavar="Y,X")
    return p


def cmd_synth(a) -> int:
    out = Path(a.out)
    if a.fixtures:
        for q in write_fixture_set(out, a.fixtures, a.seed, a.size, a.channels):
            print(q)
        return EXIT_OK
    if not a.input:
        raise UsageError("synth needs an input path or --fixtures N")
    out.mkdir(parents=True, exist_ok=True)
    spec = _spec(a)
    images = load_images(a.input)
    if not images:
        raise DatasetError(f"no readable images in {a.input}")
    for im in images:
        noisy, sig = spec.apply(im.data[None], im.id)
        ext = "pgm" if im.data.shape[0] == 1 else "ppm"
        q = out / f"{im.id}.{ext}"
        write_pnm(q, np.clip(noisy[0], 0, 1), a.bits)
        print(q)
        if a.sigma_maps:
            write_pnm(out / f"{im.id}_sigma.{ext}", np.clip(np.broadcast_to(sig, noisy.shape)[0], 0, 1), 16)
    return EXIT_OK


def cmd_train(a) -> int:
    kv = load_config_file(a.config) if a.config else {}
    for item in a.set:
        kv.update(parse_kv(item))
    for key in ("max_iters", "batch_size", "patch_size", "lr_init", "mode", "sigma", "seed"):
        v = getattr(a, key)
        if v is not None:
            kv[key] = str(v)
    if a.variant:
        kv["arch.variant"] = a.variant
    if a.width_plan:
        kv["arch.width_plan"] = a.width_plan
    cfg = train_config_from(kv)
    arch = arch_config_from(kv)
    res = train(cfg, arch, a.data, a.out, resume=a.resume, val_path=a.val, real_path=a.real)
    print(f"iterations={res.iterations} val_psnr={res.final_psnr:.4f} noisy_psnr={res.noisy_psnr:.4f} log={res.log_path}")
    return EXIT_OK


def cmd_denoise(a) -> int:
    den, _ = denoise(a.ckpt, a.input, a.out, a.sigma_out, a.tile or None, a.overlap, a.bits)
    print(f"wrote {a.out} {den.shape[2]}x{den.shape[1]}")
    return EXIT_OK


def cmd_eval(a) -> int:
    rep = evaluate(a.ckpt, a.data, _spec(a), a.tile or None)
    text = rep.to_text()
    sys.stdout.write(text)
    if a.report:
        Path(a.report).write_text(text)
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    arch = arch_config_from(load_config_file(a.config)) if a.config else None
    rep = gradcheck(a.scope, a.samples, a.seed, arch)
    print(rep.to_text(verbose=a.verbose_probes))
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def _position(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--pos expects Y,X, got {text!r}") from None
    return y, x


def cmd_export(a) -> int:
    pos = [_position(t) for t in a.pos] or None
    for q in export_introspection(a.ckpt, a.image, a.what, a.out, a.stage, a.block, pos):
        print(q)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}


def _limit_threads():
    n = os.environ.get("CFNET_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv: list[str] | None = None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cfnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return COMMANDS[a.cmd](a)
    except (UsageError, ConfigError, ArchError, NoiseParamError) as exc:
        print(f"cfnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PnmError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"cfnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"cfnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cfnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
