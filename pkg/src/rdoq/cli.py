"""Command-line entry point: ``rdoq <command> [options]``.

Options may also come from a flat ``key=value`` file given with ``--config``;
flags on the command line win over the file, and ``RDOQ_SEED`` overrides the
file's seed.  Every run writes a ``.manifest`` next to its main output.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import calib, container, data, evalharness, licnet
from .codec import ImageCodec
from .entropycodec import Bitstream, DecodeError
from .fixedpoint import InvalidParameterError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rdoq")


class UsageError(Exception):
    pass


# PGM ------------------------------------------------------------------------------
def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) -> (H, W) uint8."""
    raw = Path(path).read_bytes()
    tokens: list = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise OSError(f"{path}: only binary PGM (P5) is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise OSError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256 or w <= 0 or h <= 0:
        raise OSError(f"{path}: only 8-bit PGM is supported")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise OSError(f"{path}: truncated PGM data")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = np.floor(img.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_image_dir(path) -> np.ndarray:
    """All ``*.pgm`` in a directory, sorted by name, as (N, 1, H, W) in [0, 1]."""
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm files in {path}")
    imgs = [read_pgm(f) for f in files]
    if len({im.shape for im in imgs}) != 1:
        raise OSError(f"images in {path} differ in size")
    return np.stack(imgs)[:, None].astype(np.float32) / 255.0


# config ---------------------------------------------------------------------------
def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# Where results go does not change them, so output paths stay out of the digest.
OUTPUT_KEYS = ("out", "report", "out_dir")


def config_digest(values: dict) -> str:
    keys = sorted(k for k in values if k not in OUTPUT_KEYS)
    text = "\n".join(f"{k}={values[k]}" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_path, command: str, values: dict, inputs: Sequence, outputs: Sequence) -> Path:
    import skimage
    lines = [f"command={command}", f"config_digest={config_digest(values)}",
             f"seed={values.get('seed', '')}", f"artifact={__version__}",
             f"python={platform.python_version()}", f"numpy={np.__version__}",
             f"scikit_image={skimage.__version__}"]
    lines += [f"config.{k}={values[k]}" for k in sorted(values)]
    lines += [f"input.{p}={file_digest(p)}" for p in inputs]
    lines += [f"output.{p}={file_digest(p)}" for p in outputs]
    path = Path(str(out_path) + ".manifest")
    path.write_text("\n".join(lines) + "\n")
    return path


# model files ------------------------------------------------------------------------
def load_container(path):
    raw = Path(path).read_bytes()
    model, qmodel, meta = container.load_model(raw)
    return model, qmodel, meta, container.digest(raw)


def save_container(path, model, qmodel, values: dict) -> None:
    meta = {"config_digest": config_digest(values), "seed": values.get("seed", 0)}
    Path(path).write_bytes(container.save_model(model, qmodel, meta))


def _codec(path) -> ImageCodec:
    model, qmodel, _, digest = load_container(path)
    return ImageCodec(model, qmodel, digest)


# commands -------------------------------------------------------------------------
def _train_images(args):
    if args.images:
        return read_image_dir(args.images)
    return data.desk_dataset(seed=args.data_seed).train


def cmd_train(args, values) -> list:
    images = _train_images(args)
    model = licnet.train_float(images, args.lam, steps=args.steps, seed=args.seed, lr=args.lr)
    save_container(args.out, model, None, values)
    return [args.out]


def _calib_config(args) -> calib.CalibConfig:
    names = {f.name for f in fields(calib.CalibConfig)}
    kw = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    return calib.CalibConfig(**kw).with_bits(args.bits)


def cmd_calibrate(args, values) -> list:
    model, _, _, _ = load_container(args.model)
    cfg = _calib_config(args)
    if args.calib:
        images = read_image_dir(args.calib)
    else:
        images = data.desk_dataset(seed=args.data_seed).calibration(cfg.calib_size, cfg.seed)
    if args.baseline == "minmax":
        qmodel, report = calib.minmax_model(model, images, cfg), None
    elif args.baseline == "mse":
        qmodel, report = calib.mse_ptq(model, images, cfg), None
    else:
        qmodel, report = calib.calibrate_model(model, images, cfg)
    save_container(args.out, model, qmodel, values)
    outputs = [args.out]
    if report is not None:
        rpath = args.report or str(args.out) + ".report.csv"
        Path(rpath).write_text(report.to_text())
        outputs.append(rpath)
        if report.failed:
            log.warning("%d layers flagged during calibration", len(report.failed))
    return outputs


def cmd_eval(args, values) -> list:
    images = read_image_dir(args.images) if args.images else data.desk_dataset(seed=args.data_seed).test
    lines = ["# psnr averaged per image; bpp from actual bitstreams",
             "model,lambda,bit_width,bpp,estimated_bpp,psnr_db,j"]
    for path in args.model:
        codec = _codec(path)
        p = evalharness.rd_point(codec, images)
        lines.append(f"{path},{p.lam:g},{codec.bit_width},{p.bpp:.6f},{p.estimated_bpp:.6f},"
                     f"{p.psnr_db:.4f},{p.j:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        return [args.out]
    sys.stdout.write(text)
    return []


def cmd_encode(args, values) -> list:
    codec = _codec(args.model)
    coded = codec.encode(read_pgm(args.image))
    Path(args.out).write_bytes(coded.stream.to_bytes())
    return [args.out]


def cmd_decode(args, values) -> list:
    codec = _codec(args.model)
    stream = Bitstream.from_bytes(Path(args.input).read_bytes())
    write_pgm(args.out, codec.decode(stream))
    return [args.out]


def cmd_ablate(args, values) -> list:
    models = [load_container(p)[0] for p in args.models]
    if args.calib and args.test:
        pool, test = read_image_dir(args.calib), read_image_dir(args.test)
    elif args.calib or args.test:
        raise UsageError("--calib and --test go together")
    else:
        ds = data.desk_dataset(seed=args.data_seed)
        pool, test = ds.calib_pool, ds.test
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"ablation_{args.name}.csv"
    res = evalharness.run_ablation(args.name, models, pool, test, _calib_config(args), out)
    for variant in res.curves:
        try:
            print(f"{variant}: BD-rate vs float {res.bd_loss(variant):+.2f}%")
        except evalharness.BdRateError as exc:
            print(f"{variant}: BD-rate unavailable ({exc})")
    return [out]


def cmd_demo_hessian(args, values) -> list:
    print(evalharness.hessian_toy_demo().to_text())
    return []


# parser ---------------------------------------------------------------------------
def _add_calib_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, choices=(4, 6, 8, 10), default=8)
    p.add_argument("--steps", type=int)
    p.add_argument("--calib-size", dest="calib_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-v", dest="lr_v", type=float)
    p.add_argument("--lambda-t", dest="lambda_t", type=float)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.add_argument("--granularity", choices=calib.GRANULARITIES)
    p.add_argument("--init", choices=calib.INITS)
    p.add_argument("--rounding", choices=calib.ROUNDINGS)
    p.add_argument("--bias", choices=("rescaled", "int32"))
    p.add_argument("--objective", choices=calib.OBJECTIVES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdoq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--data-seed", dest="data_seed", type=int, default=0,
                       help="seed of the built-in crop dataset")
        p.set_defaults(func=fn)
        return p

    p = command("train", cmd_train, "train a float codec for one lambda")
    p.add_argument("--images", help="directory of training PGMs (default: built-in crops)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.013)
    p.add_argument("--steps", type=int, default=8000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--out", required=True)

    p = command("calibrate", cmd_calibrate, "quantize a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--calib",
                   help="directory of calibration PGMs (default: built-in 128x128 windows)")
    p.add_argument("--baseline", choices=("rdo", "minmax", "mse"), default="rdo")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_calib_flags(p)

    p = command("eval", cmd_eval, "R-D point of one or more models")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--images", help="directory of test PGMs (default: built-in test crops)")
    p.add_argument("--out")

    p = command("encode", cmd_encode, "compress one PGM")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = command("decode", cmd_decode, "decompress a bitstream to PGM")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = command("ablate", cmd_ablate, "run one ablation over a lambda ladder")
    p.add_argument("--name", choices=evalharness.ABLATIONS + ("baselines",), required=True)
    p.add_argument("--models", nargs="+", required=True, help="one float model per lambda")
    p.add_argument("--calib", help="directory of calibration PGMs (pool to sample from)")
    p.add_argument("--test", help="directory of test PGMs")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    _add_calib_flags(p)

    command("demo-hessian", cmd_demo_hessian, "print the two-parameter toy example")
    return parser


def _resolve(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    """Parse with config-file values as defaults so explicit flags win."""
    args = parser.parse_args(argv)
    file_values = read_config_file(args.config) if args.config else {}
    env_seed = os.environ.get("RDOQ_SEED")
    if env_seed is not None:
        file_values["seed"] = env_seed
    if not file_values:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in file_values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "func"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"bad value for {key}: {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{key} must be one of {list(action.choices)}")
        if action.nargs == "+":
            value = raw.split()
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def _inputs(args) -> list:
    out = []
    for key in ("model", "image", "input"):
        v = getattr(args, key, None)
        out += v if isinstance(v, list) else [v] if v else []
    out += list(getattr(args, "models", None) or [])
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _resolve(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"rdoq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rdoq: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    values = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "config")}
    try:
        for path in _inputs(args):
            if not Path(path).is_file():
                raise FileNotFoundError(f"no such file: {path}")
        outputs = args.func(args, values)
        if outputs:
            write_manifest(outputs[0], args.command, values, _inputs(args), outputs)
    except UsageError as exc:
        print(f"rdoq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, container.ContainerError, DecodeError) as exc:
        print(f"rdoq: {exc}", file=sys.stderr)
        return EXIT_IO
    except (licnet.TrainingDivergedError, FloatingPointError, InvalidParameterError) as exc:
        print(f"rdoq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"rdoq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
