"""``dualloss`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric failure (non-finite loss, gradient check breach).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import LOSS_MODES, RunConfig, load_config, table2_path, to_dict
from .data.dataset import SPLITS, DatasetSplit, Sample
from .data.features import read_features, read_header, write_features
from .data.images import load_image_folder
from .data.synth import synth_dataset
from .errors import ConfigError, DatasetError, DualLossError, NumericError
from .gradcheck import COMPONENTS, run_gradcheck
from .model import EmbeddingModel
from .training import TrainLog, TrainResult, ablation_csv, cnn_eval_input, evaluate, run_ablation, train

log = logging.getLogger("dualloss")

GRADCHECK_TOL = 1e-4
CLASSES_FILE = "classes.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# data resolution


def _class_names_near(path: str):
    folder = path if os.path.isdir(path) else os.path.dirname(path)
    f = os.path.join(folder, CLASSES_FILE)
    if not os.path.isfile(f):
        return None
    with open(f, encoding="utf-8") as fh:
        return tuple(line.strip() for line in fh if line.strip())


def _empty(like: DatasetSplit, split: str) -> DatasetSplit:
    return DatasetSplit((), like.class_names, split)


def load_split(path: str, split: str, class_names=None, skip_bad: bool = False) -> DatasetSplit:
    """One split from a feature file, a directory of ``<split>.mfv`` files, or an image tree."""
    if not os.path.exists(path):
        raise DatasetError(f"dataset path does not exist: {path}")
    names = class_names if class_names is not None else _class_names_near(path)
    if os.path.isfile(path):
        return read_features(path, split, names)
    mfv = os.path.join(path, f"{split}.mfv")
    if os.path.isfile(mfv):
        return read_features(mfv, split, names)
    if os.path.isdir(os.path.join(path, split)):
        return load_image_folder(path, split, skip_bad=skip_bad, class_names=names)
    raise DatasetError(f"{path}: no {split}.mfv file and no {split}/ image directory")


def load_splits(run: RunConfig) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    data = run.data
    if data.source == "synth":
        return synth_dataset(run.synth)
    if data.source not in ("", "features", "images"):
        raise ConfigError(f"data.source must be synth, features or images, got {data.source!r}")
    if not data.path:
        raise ConfigError("no dataset given: pass --data <path> (or --set data.path=...), "
                          "or --set data.source=synth for the synthetic benchmark")
    train_split = load_split(data.path, "train", skip_bad=data.skip_bad)
    out = [train_split]
    for split in SPLITS[1:]:
        try:
            out.append(load_split(data.path, split, train_split.class_names, data.skip_bad))
        except DatasetError:
            if os.path.isfile(data.path):
                raise
            log.warning("no %s split under %s; continuing without it", split, data.path)
            out.append(_empty(train_split, split))
    return tuple(out)


# --------------------------------------------------------------------------
# output helpers


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def confusion_csv(cm: np.ndarray, class_names) -> str:
    """Rows are true classes, columns predicted classes."""
    lines = ["true\\pred," + ",".join(class_names)]
    for name, row in zip(class_names, cm):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def _write_metrics(out: str, tag: str, cm, report, class_names) -> dict:
    metrics = report.as_dict(class_names)
    _write_text(os.path.join(out, f"metrics_{tag}.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _write_text(os.path.join(out, f"confusion_{tag}.csv"), confusion_csv(cm, class_names))
    return metrics


def _config_text(run: RunConfig) -> str:
    lines = []
    for section in ("train", "augment", "synth", "data"):
        for k, v in to_dict(getattr(run, section)).items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if getattr(args, "loss_mode", None) is not None:
        overrides["train.loss_mode"] = args.loss_mode
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = str(args.epochs)
    if getattr(args, "data", None) is not None:
        overrides["data.path"] = args.data
    path = args.config if args.config is not None else str(table2_path())
    return load_config(path, overrides)


def cmd_train(args) -> int:
    run = _run_config(args)
    splits = load_splits(run)
    os.makedirs(args.out, exist_ok=True)
    resume, prior = None, ""
    if args.resume:
        last = load_checkpoint(os.path.join(args.resume, "last.ckpt"))
        best = load_checkpoint(os.path.join(args.resume, "best.ckpt"))
        resume = TrainResult(best, last, TrainLog())
        log_path = os.path.join(args.resume, "trainlog.jsonl")
        if os.path.isfile(log_path):
            with open(log_path, encoding="utf-8") as fh:
                prior = "".join(line for line in fh if json.loads(line)["epoch"] <= last.epoch)
    res = train(run.train, splits, run.augment, resume=resume)
    save_checkpoint(os.path.join(args.out, "best.ckpt"), res.checkpoint)
    save_checkpoint(os.path.join(args.out, "last.ckpt"), res.last)
    _write_text(os.path.join(args.out, "trainlog.jsonl"), prior + res.log.to_jsonl())
    _write_text(os.path.join(args.out, "timing.jsonl"), res.log.timing_jsonl())
    _write_text(os.path.join(args.out, "config.cfg"), _config_text(run))
    test = splits[2] if len(splits[2]) else None
    if test is not None:
        cm, report = evaluate(res.checkpoint, test)
        metrics = _write_metrics(args.out, "test", cm, report, test.class_names)
        print(json.dumps({"split": "test", "best_epoch": res.checkpoint.best_epoch,
                          "accuracy": metrics["accuracy"], "macro_f1": metrics["macro_f1"]}))
    else:
        print(json.dumps({"split": None, "best_epoch": res.checkpoint.best_epoch}))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    split = load_split(args.data, args.split, ckpt.class_names)
    if len(split) == 0:
        raise DatasetError(f"split {args.split!r} under {args.data} is empty")
    cm, report = evaluate(ckpt, split)
    os.makedirs(args.out, exist_ok=True)
    metrics = _write_metrics(args.out, args.split, cm, report, ckpt.class_names)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    splits = load_splits(run)
    rows = run_ablation(run.train, splits, run.augment)
    text = ablation_csv(rows)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "ablation.csv"), text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be positive")
    reports = run_gradcheck(seed=args.seed, trials=args.trials, perturb=args.perturb)
    failed = []
    for name in COMPONENTS:
        r = reports[name]
        print(f"{name:7s} max_rel_error={r.max_rel_error:.3e} worst={r.coordinate} trial={r.trial} "
              f"checked={r.checked} skipped={r.skipped} time={r.seconds:.1f}s")
        if not r.passed(GRADCHECK_TOL):
            failed.append(r)
    for r in failed:
        print(f"gradcheck breach: {r.name} {r.coordinate}, worst entry {r.worst_entry} (trial {r.trial}), "
              f"relative error {r.max_rel_error:.3e} >= {GRADCHECK_TOL:g}", file=sys.stderr)
    return NumericError.exit_code if failed else 0


def cmd_synth(args) -> int:
    run = _run_config(args)
    splits = synth_dataset(run.synth)
    os.makedirs(args.out, exist_ok=True)
    for s in splits:
        write_features(os.path.join(args.out, f"{s.split}.mfv"), s, run.synth.dim)
    _write_text(os.path.join(args.out, CLASSES_FILE), "".join(n + "\n" for n in splits[0].class_names))
    print(json.dumps({s.split: len(s) for s in splits}))
    return 0


def cmd_features(args) -> int:
    if args.action == "inspect":
        n, f, c = read_header(args.path)
        print(json.dumps({"path": args.path, "N": n, "F": f, "C": c}))
        return 0
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.dims.extractor != "small-cnn":
        raise ConfigError(f"checkpoint extractor is {ckpt.dims.extractor!r}; extract needs small-cnn")
    split = load_image_folder(args.images, args.split, class_names=ckpt.class_names)
    model = EmbeddingModel(ckpt.dims, ckpt.params)
    samples = []
    for s in split.samples:
        feats, _ = model.extract(cnn_eval_input(s.input, ckpt.augment)[None])
        samples.append(Sample(feats[0], s.label, s.source_id))
    out = DatasetSplit(tuple(samples), split.class_names, split.split)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_features(args.out, out, ckpt.dims.in_features)
    _write_text(os.path.join(os.path.dirname(os.path.abspath(args.out)), CLASSES_FILE),
                "".join(n + "\n" for n in split.class_names))
    print(json.dumps({"path": args.out, "N": len(out), "F": ckpt.dims.in_features, "C": out.num_classes}))
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_default: str = "runs"):
    p.add_argument("--config", help="flat key = value config file (default: the bundled table2.cfg)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--seed", type=int, help="run seed (train.seed)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    p.add_argument("--data", help="dataset path (data.path)")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualloss", description="ArcFace + Center Loss embedding training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    # also accepted after the subcommand; SUPPRESS keeps it from resetting the top-level value
    verbose = _Parser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[verbose], **kw)

    p = add("train", help="train one model")
    _common(p)
    p.add_argument("--loss-mode", choices=LOSS_MODES)
    p.add_argument("--resume", metavar="DIR", help="continue from DIR/last.ckpt and DIR/best.ckpt")
    p.set_defaults(func=cmd_train)

    p = add("eval", help="evaluate a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("data", help="feature file, directory of <split>.mfv files, or image tree")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = add("ablate", help="train all four loss modes and write ablation.csv")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = add("gradcheck", help="finite-difference audit of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--perturb", choices=COMPONENTS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = add("synth", help="write the synthetic benchmark as feature files")
    _common(p, out_default="synth")
    p.set_defaults(func=cmd_synth)

    p = add("features", help="inspect or extract MFV1 feature files")
    fsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = fsub.add_parser("inspect", help="print a feature file header")
    q.add_argument("path")
    q = fsub.add_parser("extract", help="run a checkpoint's CNN extractor over an image tree")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--images", required=True, help="image root holding <split>/<class>/*.ppm")
    q.add_argument("--split", default="train", choices=SPLITS)
    q.add_argument("--out", required=True, help="output .mfv path")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DualLossError as exc:
        print(f"dualloss: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dualloss: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
