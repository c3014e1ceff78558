"""``laneseg`` command line: preprocess, augment, train, eval, predict, serve, send.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric/training, 4 network. Every
failure prints one ``error[<code>]: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, datapipe, metrics, network, service
from .config import Config, help_text, parse_config
from .errors import (
    CheckpointError, ConfigError, DataError, DimensionError, InputError, LanesegError,
    NumericError, ProtocolError, RemoteError, TrainingError,
)
from .training import history_to_csv, images_to_input, train

log = logging.getLogger("laneseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_NETWORK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> Config:
    path = args.config or os.environ.get("LANESEG_CONFIG")
    cfg = parse_config(path) if path else Config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None):
        overrides["epochs"] = args.epochs
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_preprocess(args, cfg: Config) -> int:
    """Crop raw frames and turn raw tag images into colour-coded label images."""
    tags = datapipe.TagMap(cfg.road_tag, cfg.vehicle_tag)
    out = Path(args.out_dir)
    pairs = []
    for img_path, raw_path in datapipe.read_manifest(args.manifest):
        image = datapipe.crop(datapipe.read_png(img_path), cfg.crop_top, cfg.crop_bottom)
        raw = datapipe.crop(datapipe.read_png(raw_path), cfg.crop_top, cfg.crop_bottom)
        labels = datapipe.decode_labels(raw, tags)
        stem = Path(img_path).stem
        a, b = out / "images" / f"{stem}.png", out / "labels" / f"{stem}.png"
        datapipe.write_png(a, image)
        datapipe.write_png(b, datapipe.encode_label_colors(labels))
        pairs.append((a, b))
    datapipe.write_manifest(out / "manifest.txt", pairs)
    print(f"wrote {len(pairs)} pairs to {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_augment(args, cfg: Config) -> int:
    """Expand a dataset with one rotated and one shifted copy per image."""
    samples = datapipe.load_samples(args.data)
    if not args.materialize:
        print(f"{len(samples)} originals -> {3 * len(samples)} images; rerun with --materialize to write them")
        return EXIT_OK
    rng = np.random.default_rng(cfg.seed)
    out = Path(args.out_dir)
    pairs = []
    for s in samples:
        variants = [("", s.image, s.labels),
                    ("_rot", *datapipe.rotate_aug(s.image, s.labels, rng=rng)),
                    ("_shift", *datapipe.shift_aug(s.image, s.labels, rng=rng))]
        for suffix, image, labels in variants:
            a, b = out / "images" / f"{s.id}{suffix}.png", out / "labels" / f"{s.id}{suffix}.png"
            datapipe.write_png(a, image)
            datapipe.write_png(b, datapipe.encode_label_colors(labels))
            pairs.append((a, b))
    datapipe.write_manifest(out / "manifest.txt", pairs)
    print(f"wrote {len(pairs)} pairs to {out / 'manifest.txt'}")
    return EXIT_OK


def _history_path(out: Path, explicit) -> Path:
    return Path(explicit) if explicit else out.with_suffix(".history.csv")


def cmd_train(args, cfg: Config) -> int:
    data = args.data or cfg.data
    out = Path(args.out or cfg.out or "model.lseg")
    if not data:
        raise UsageError("train needs --data (or 'data' in the config)")
    samples = datapipe.load_samples(data)
    train_set, val_set, _ = datapipe.split_dataset(samples, cfg.split, cfg.seed)
    if not train_set:
        raise InputError("empty training split")
    try:
        result = train(train_set, cfg.train_config(), val_set)
    except TrainingError as exc:
        if exc.last_good is not None:
            checkpoint.save(out, exc.last_good)
        raise
    checkpoint.save(out, result.params)
    hist = _history_path(out, args.history)
    _write_text(hist, history_to_csv(result.history))
    last = result.history[-1]
    print(f"epoch {last.epoch}: train_mse {last.train_mse:.4f} train_mae {last.train_mae:.4f}; "
          f"wrote {out} and {hist}")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    params = checkpoint.load(args.model)
    samples = datapipe.load_samples(args.data)
    report = metrics.evaluate(params, samples)
    if args.report:
        _write_text(args.report, report.to_csv())
    if args.triptych_dir:
        for s in samples:
            scores = network.predict(images_to_input([s.image]), params)[0]
            pic = metrics.triptych(s.image, datapipe.encode_label_colors(s.labels), metrics.scores_to_image(scores))
            datapipe.write_png(Path(args.triptych_dir) / f"{s.id}.png", pic)
    print(f"mse {report.mse:.4f} mae {report.mae:.4f} over {len(samples)} images")
    return EXIT_OK


def cmd_predict(args, cfg: Config) -> int:
    params = checkpoint.load(args.model)
    image = datapipe.read_png(args.image)
    scores = network.predict(images_to_input([image]), params)[0]
    datapipe.write_png(args.out, datapipe.encode_label_colors(metrics.scores_to_labels(scores)))
    return EXIT_OK


def cmd_serve(args, cfg: Config) -> int:
    host, port = service.parse_address(args.bind, cfg.port)
    service.serve((host, port), cfg.train_config())
    return EXIT_OK


def cmd_send(args, cfg: Config) -> int:
    address = service.parse_address(args.server, cfg.port)
    data = service.send_frames(address, args.manifest, then_train=args.train,
                               epochs=args.epochs or 0, out_path=args.out if args.train else None)
    if data is not None:
        print(f"received model ({len(data)} bytes) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="laneseg", description="Lane/road segmentation training and edge delivery.",
                     epilog="'laneseg --help config' lists configuration keys.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="config file (default: $LANESEG_CONFIG)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "crop frames and decode raw tag labels")
    p.add_argument("--manifest", required=True, help="raw frame<TAB>tag-image manifest")
    p.add_argument("--out-dir", required=True)

    p = add("augment", cmd_augment, "write rotated and shifted copies of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--materialize", action="store_true", help="actually write the expanded set")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, "MSE/MAE report for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--triptych-dir")

    p = add("predict", cmd_predict, "colour-coded segmentation of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("serve", cmd_serve, "run the edge training server")
    p.add_argument("--bind", default="127.0.0.1:7878")

    p = add("send", cmd_send, "stream a dataset to an edge server")
    p.add_argument("--server", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="model.lseg")
    return parser


def _fail(code: int, message: str) -> int:
    print(f"error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv[:2] == ["--help", "config"]:
        print(help_text())
        return EXIT_OK
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "no subcommand given")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (NumericError, TrainingError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (RemoteError, ProtocolError, ConnectionError) as exc:
        return _fail(EXIT_NETWORK, exc)
    except (ConfigError, DataError, DimensionError, InputError, CheckpointError, LanesegError) as exc:
        return _fail(EXIT_DATA, exc)
    except OSError as exc:
        return _fail(EXIT_DATA, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
