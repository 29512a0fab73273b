"""Command-line entry point: ``smilenet <command> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ckpt, dataio, modelsel
from .errors import CheckpointShapeError, ConfigError, SelectionError, SmileNetError
from .network import ArchitectureConfig, build
from .train import (INIT_STREAM, DataSplits, Split, TrainConfig, evaluate, repeat_experiment,
                    train)

log = logging.getLogger("smilenet")

INPUT_SIZES = {"mouth": (69, 85), "face": (128, 104)}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # training
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 500
    epochs: int = 1000
    seed: int = 0
    eval_every: int = 1
    # architecture; input size 0 means "take it from the data"
    num_convolutions: int = 1
    num_hidden_layers: int = 1
    units_per_hidden_layer: int = 100
    dropout_rate: float = 0.5
    input_height: int = 0
    input_width: int = 0
    # data
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    split_mode: str = "frame-random"
    no_au_keep_fraction: float = 1.0

    def set(self, key, text):
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(getattr(RunConfig, key))
        try:
            setattr(self, key, kind(text) if kind is not int else int(text, 10))
        except ValueError:
            raise ConfigError(f"bad value for {key}: {text!r}") from None

    def train_config(self, seed=None):
        return TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs,
                           self.seed if seed is None else seed, self.eval_every)

    def architecture(self, height, width):
        return ArchitectureConfig(
            self.num_convolutions, self.num_hidden_layers, self.units_per_hidden_layer,
            self.dropout_rate, self.input_height or height, self.input_width or width)

    def split_spec(self, seed=None):
        return dataio.SplitSpec(self.train_ratio, self.val_ratio, self.test_ratio,
                                self.seed if seed is None else seed, self.split_mode)


def parse_config_text(text, cfg=None):
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_run_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        parse_config_text(text, cfg)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    # validate eagerly so bad values are config errors (exit 2)
    cfg.train_config()
    cfg.split_spec()
    return cfg


# --------------------------------------------------------------------------
# shared pipeline pieces


def load_dataset(data, cfg: RunConfig):
    records, images = dataio.load_corpus(data)
    if cfg.no_au_keep_fraction < 1.0:
        keep = {r.image_path for r in dataio.reduce_no_au(records, cfg.no_au_keep_fraction, cfg.seed)}
        pairs = [(r, im) for r, im in zip(records, images) if r.image_path in keep]
        records, images = [p[0] for p in pairs], [p[1] for p in pairs]
    if not records:
        raise dataio.DataError(f"no records in {data}")
    return records, images


def make_splits(records, images, cfg: RunConfig, seed):
    parts = dataio.split_arrays(records, images, cfg.split_spec(seed))
    return DataSplits(*(Split(x, y) for x, y in parts))


def architecture_for(cfg: RunConfig, images):
    h, w = np.shape(images[0])
    arch = cfg.architecture(h, w)
    if (arch.input_height, arch.input_width) != (h, w):
        raise dataio.DataError(
            f"images are {h}x{w} but the config expects {arch.input_height}x{arch.input_width}")
    return arch


def run_training(records, images, cfg: RunConfig, seed, log_file=None, arch=None):
    splits = make_splits(records, images, cfg, seed)
    arch = arch or architecture_for(cfg, images)
    net = build(arch, seed=[seed, INIT_STREAM])
    net, report = train(net, splits, cfg.train_config(seed), log_file=log_file)
    return net, report, splits


def best_scores(net, splits, report):
    """(val_acc, test_acc) at the best epoch, or of the untrained net when epochs=0."""
    if report.best is not None:
        return report.best.val_acc, report.best.test_acc
    return evaluate(net, splits.val), evaluate(net, splits.test)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    records, images = dataio.synth_generate(args.n, args.height, args.width, args.noise, args.seed)
    path = dataio.write_corpus(args.out, records, images)
    print(f"wrote {len(records)} images and {path}")


def cmd_preprocess(args):
    records, images = dataio.load_corpus(args.manifest)
    h, w = INPUT_SIZES[args.input_kind]
    th = args.height or h
    tw = args.width or w
    shapes = {np.shape(im) for im in images}
    if args.input_kind == "mouth":
        if args.mouth_indices is None:
            raise UsageError("--input-kind mouth needs --mouth-indices")
        if len(shapes) != 1:
            raise dataio.DataError(f"mouth cropping needs equally sized frames, got {sorted(shapes)}")
        indices = [int(i) for i in args.mouth_indices.split(",") if i.strip()]
        box = dataio.global_mouth_box(records, indices, args.margin, shapes.pop())
        boxes = [box] * len(images)
    else:
        boxes = [dataio.full_box(im) for im in images]
    out_records, out_images = [], []
    for r, im, box in zip(records, images, boxes):
        out_images.append(dataio.crop_resize(im, box, th, tw))
        out_records.append(dataclasses.replace(r, landmarks=_map_landmarks(r.landmarks, box, th, tw)))
    path = dataio.write_corpus(args.out, out_records, out_images)
    print(f"wrote {len(out_records)} images ({th}x{tw}) and {path}")


def _map_landmarks(points, box, th, tw):
    if points is None:
        return None
    sx = (tw - 1) / (box.x1 - box.x0) if box.x1 > box.x0 else 0.0
    sy = (th - 1) / (box.y1 - box.y0) if box.y1 > box.y0 else 0.0
    return tuple((round((x - box.x0) * sx, 3), round((y - box.y0) * sy, 3)) for x, y in points)


def cmd_train(args):
    cfg = load_run_config(args)
    records, images = load_dataset(args.data, cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    with open(log_path, "w", encoding="utf-8") as log_file:
        net, report, _ = run_training(records, images, cfg, cfg.seed, log_file)
    ckpt.save(net, out)
    out.with_name(out.name + ".report").write_text(_report_text(report), encoding="utf-8")
    best = report.best
    if best is not None:
        print(f"best_epoch {best.epoch} val_acc {best.val_acc:.6f} test_acc {best.test_acc:.6f}")
    print(f"saved {out}")


def _report_text(report):
    lines = []
    best, final = report.best, report.final
    if best is not None:
        lines += [f"best_epoch={best.epoch}", f"best_val_acc={best.val_acc!r}",
                  f"best_test_acc={best.test_acc!r}"]
    if final is not None:
        lines += [f"final_epoch={final.epoch}", f"final_val_acc={final.val_acc!r}",
                  f"final_test_acc={final.test_acc!r}"]
    return "".join(line + "\n" for line in lines)


def cmd_eval(args):
    cfg = load_run_config(args)
    net = ckpt.load(args.model)
    records, images = load_dataset(args.data, cfg)
    h, w = np.shape(images[0])
    if (net.config.input_height, net.config.input_width) != (h, w):
        raise CheckpointShapeError(
            f"model expects {net.config.input_height}x{net.config.input_width} input, data is {h}x{w}")
    splits = make_splits(records, images, cfg, cfg.seed)
    rate = evaluate(net, getattr(splits, args.split))
    print(f"classification_rate {rate:.6f}")


def cmd_repeat(args):
    if args.n < 2:
        raise UsageError(f"repeat needs --n >= 2, got {args.n}")
    cfg = load_run_config(args)
    records, images = load_dataset(args.data, cfg)
    arch = architecture_for(cfg, images)

    def run(seed):
        net, report, splits = run_training(records, images, cfg, seed, arch=arch)
        return best_scores(net, splits, report)[1]

    seeds = [cfg.seed] * args.n if args.same_seed else None
    mean, std, accs = repeat_experiment(run, args.n, seed=cfg.seed, seeds=seeds)
    for i, acc in enumerate(accs):
        log.info("run %d test_acc %.6f", i, acc)
    print(f"mean {mean:.6f} std {std:.6f}")


def cmd_select(args):
    cfg = load_run_config(args)
    grid = modelsel.SelectionGrid()
    if args.evaluator:
        kind, _, target = args.evaluator.partition(":")
        if kind != "stub" or not target:
            raise UsageError(f"--evaluator must be stub:FILE, got {args.evaluator!r}")
        evaluator = modelsel.StubEvaluator(modelsel.load_stub(target), grid)
        base = ArchitectureConfig().replace(input_height=cfg.input_height or 69,
                                            input_width=cfg.input_width or 85)
    else:
        if not args.data:
            raise UsageError("select needs --data unless a stub evaluator is given")
        records, images = load_dataset(args.data, cfg)
        h, w = np.shape(images[0])
        base = ArchitectureConfig().replace(input_height=h, input_width=w)
        splits = make_splits(records, images, cfg, cfg.seed)
        tcfg = cfg.train_config()
        memo = {}

        def evaluator(arch):
            # the all-defaults config shows up in every sweep; train it once
            if arch not in memo:
                net = build(arch, seed=[cfg.seed, INIT_STREAM])
                _, report = train(net, splits, tcfg)
                memo[arch] = best_scores(net, splits, report)[0]
            return memo[arch]

    out = Path(args.out)
    try:
        report = modelsel.select(grid, evaluator, base, epochs_per_candidate=cfg.epochs)
    except SelectionError as exc:
        out.write_text(exc.report.to_csv(), encoding="utf-8")
        raise
    out.write_text(report.to_csv(), encoding="utf-8")
    winner = RunConfig(**{**dataclasses.asdict(cfg), **report.chosen})
    config_path = out.with_suffix(".cfg")
    config_path.write_text(
        "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(winner).items()), encoding="utf-8")
    print(f"runs {report.total_runs}")
    for name, value in report.chosen.items():
        print(f"{name} {value}")


# --------------------------------------------------------------------------


def _add_run_options(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="smilenet", description="Train and evaluate the convolutional smile classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic smile corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of images (even)")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1, help="gaussian pixel noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="crop and downscale a corpus")
    p.add_argument("--manifest", required=True, help="manifest.csv or the directory holding it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--input-kind", choices=sorted(INPUT_SIZES), required=True)
    p.add_argument("--height", type=int, help="output rows (mouth 69, face 128)")
    p.add_argument("--width", type=int, help="output columns (mouth 85, face 104)")
    p.add_argument("--mouth-indices", help="comma-separated landmark indices of the mouth")
    p.add_argument("--margin", type=float, default=0.0,
                   help="grow the mouth box by this fraction of its size on each side")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one network and save a checkpoint")
    _add_run_options(p)
    p.add_argument("--data", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log path (default: OUT.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="greedy per-parameter architecture selection")
    _add_run_options(p)
    p.add_argument("--data", help="corpus directory or manifest")
    p.add_argument("--epochs", type=int, default=50, help="epochs per candidate")
    p.add_argument("--out", required=True, help="report CSV; the winning config goes next to it")
    p.add_argument("--evaluator", help="stub:FILE replays recorded accuracies")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="classification rate of a checkpoint on one split")
    _add_run_options(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="corpus directory or manifest")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repeat", help="mean and std of test accuracy over repeated runs")
    _add_run_options(p)
    p.add_argument("--n", type=int, default=10, help="number of runs (at least 2)")
    p.add_argument("--data", required=True, help="corpus directory or manifest")
    p.add_argument("--same-seed", action="store_true", help="reuse the master seed for every run")
    p.set_defaults(func=cmd_repeat)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"smilenet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (SmileNetError, OSError, ValueError) as exc:
        print(f"smilenet {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
