"""Command-line entry point: ``longiprog <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numeric failure (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import eval as ev
from . import tensor_nn as nn
from .datagen import GenConfig, generate_dataset, split_dataset
from .manifest import ManifestError, read_manifest, resolve
from .model import ModelError, cam
from .ppm import PPMError, read_ppm, write_ppm
from .preprocess import PreprocessConfig, RawImage, preprocess
from .train import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    batch_scales,
    load_checkpoint,
    load_sequences,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "LONGIPROG_SEED"


class UsageError(Exception):
    pass


# -- config file ------------------------------------------------------------------------

CONFIG_KEYS = {
    "data": {"eyes", "progress_rate", "image_size", "seed"},
    "train": {
        "timepoints",
        "interval_scaling",
        "lr",
        "plateau_patience",
        "lr_factor",
        "early_stop_patience",
        "min_delta",
        "max_epochs",
        "batch_size",
        "seed",
        "pos_weight",
        "cam_head",
        "hidden",
        "features",
        "image_size",
        "split_seed",
    },
    "eval": {"bootstrap", "seed", "split"},
}


def _value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, source: str = "<config>") -> dict[str, dict]:
    """Parse ``[section]`` headers and ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",), interpolation=None
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise UsageError(f"{source}: {exc.message.splitlines()[0]}") from None
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise UsageError(f"{source}: unknown section [{section}]")
        for key, val in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise UsageError(f"{source}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = _value(val)
    return out


def load_config(path) -> dict[str, dict]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _merge(defaults: dict, section: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def default_seed() -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# -- commands --------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).get("data", {})
    eff = _merge(
        {"eyes": 100, "progress_rate": 0.092, "image_size": 80, "seed": default_seed()},
        cfg,
        {"eyes": args.eyes, "progress_rate": args.progress_rate, "image_size": args.image_size, "seed": args.seed},
    )
    try:
        gen = GenConfig(
            n_eyes=int(eff["eyes"]),
            progress_rate=float(eff["progress_rate"]),
            seed=int(eff["seed"]),
            image_size=int(eff["image_size"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = generate_dataset(gen, args.out)
    pos = sum(r.label for r in records)
    patients = len({r.patient_id for r in records})
    print(f"eyes: {len(records)}")
    print(f"patients: {patients}")
    print(f"progressors: {pos} ({pos / len(records):.1%})")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _split(records, seed: int, which: str):
    if which == "all":
        return records
    parts = dict(zip(("train", "val", "test"), split_dataset(records, seed=seed)))
    return parts[which]


def cmd_train(args) -> int:
    cfg = load_config(args.config).get("train", {})
    seed0 = default_seed()
    flags = {
        "timepoints": args.timepoints,
        "interval_scaling": False if args.no_interval_scaling else None,
        "lr": args.lr,
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "pos_weight": args.pos_weight,
        "cam_head": True if args.cam_head else None,
        "hidden": args.hidden,
        "split_seed": args.split_seed,
    }
    eff = _merge({"seed": seed0}, cfg, flags)
    split_seed = int(eff.pop("split_seed", eff["seed"]))
    if isinstance(eff.get("pos_weight"), str) and eff["pos_weight"] != "balanced":
        try:
            eff["pos_weight"] = float(eff["pos_weight"])
        except ValueError:
            raise UsageError(f"pos_weight must be a number or 'balanced', got {eff['pos_weight']!r}") from None
    try:
        tconf = TrainConfig(**eff)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    records = read_manifest(args.manifest)
    tr = _split(records, split_seed, "train")
    va = _split(records, split_seed, "val")
    pconf = PreprocessConfig(target_size=tconf.image_size)
    train_data = load_sequences(tr, args.manifest, tconf.timepoints, pconf)
    val_data = load_sequences(va, args.manifest, tconf.timepoints, pconf)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    model, history = train(tconf, train_data, val_data, log=log)
    meta = {
        "train_config": tconf.to_dict(),
        "split_seed": split_seed,
        "best_epoch": history.best_epoch,
        "pos_weight": history.pos_weight,
        "epochs_run": len(history.epochs),
        "best_val_loss": min(e.val_loss for e in history.epochs),
    }
    save_checkpoint(model, args.out, meta, dtype="<f4" if args.float32 else "<f8")
    hist_path = args.history or str(args.out) + ".history.csv"
    history.write_csv(hist_path)
    print(f"checkpoint: {args.out}")
    print(f"history: {hist_path}")
    print(f"best epoch {history.best_epoch}, validation loss {meta['best_val_loss']:.6f}")
    return EXIT_OK


def _score(ckpt, records, manifest_path):
    model = ckpt.to_model()
    t = model.config.timepoints
    pconf = PreprocessConfig(target_size=model.config.input_size)
    data = load_sequences(records, manifest_path, t, pconf)
    return model, data, model.probabilities(data.inputs, batch_scales(model, data))


def cmd_eval(args) -> int:
    cfg = load_config(args.config).get("eval", {})
    eff = _merge(
        {"bootstrap": 2000, "seed": default_seed(), "split": "test"},
        cfg,
        {"bootstrap": args.bootstrap, "seed": args.seed, "split": args.split},
    )
    ckpt = load_checkpoint(args.ckpt)
    t = ckpt.model_config.timepoints
    if args.timepoints is not None and args.timepoints != t:
        raise UsageError(f"checkpoint was trained with {t} timepoints but {args.timepoints} were requested")
    if eff["split"] not in ("train", "val", "test", "all"):
        raise UsageError(f"split must be train, val, test or all, got {eff['split']!r}")
    split_seed = int(ckpt.meta.get("split_seed", 0))
    records = _split(read_manifest(args.manifest), split_seed, eff["split"])
    _, data, probs = _score(ckpt, records, args.manifest)
    effective = {
        "checkpoint": str(args.ckpt),
        "manifest": str(args.manifest),
        "split": eff["split"],
        "split_seed": split_seed,
        "bootstrap": int(eff["bootstrap"]),
        "seed": int(eff["seed"]),
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.meta.get("train_config", {}),
    }
    report, boot = ev.evaluate(data.eye_ids, probs, data.labels, B=int(eff["bootstrap"]), seed=int(eff["seed"]), config=effective)
    report.save(args.report)
    if args.roc:
        ev.write_roc_csv(args.roc, report)
    svg = args.svg or str(Path(args.report).with_suffix(".svg"))
    ev.write_roc_svg(svg, report, boot)
    lo, hi = report.auc_ci
    print(f"eyes: {len(data)} ({int(data.labels.sum())} progressors)")
    print(f"AUC {report.auc:.4f} (95% CI {lo:.4f}, {hi:.4f})")
    print(
        f"threshold {report.threshold:.4f}: sensitivity {report.sensitivity:.4f} "
        f"({report.sensitivity_ci[0]:.4f}, {report.sensitivity_ci[1]:.4f}), specificity "
        f"{report.specificity:.4f} ({report.specificity_ci[0]:.4f}, {report.specificity_ci[1]:.4f})"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    a = ev.EvalReport.load(args.report_a)
    b = ev.EvalReport.load(args.report_b)
    try:
        result = ev.compare_reports(a, b)
    except ev.InputError as exc:
        raise UsageError(str(exc)) from None
    result = {"report_a": str(args.report_a), "report_b": str(args.report_b), **result}
    print(f"AUC A {result['auc_a']:.4f}, AUC B {result['auc_b']:.4f}")
    print(f"delta AUC {result['delta_auc']:.4f}, z {result['z']}, p {result['p']:.4g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(result, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def colormap(x: np.ndarray) -> np.ndarray:
    """Blue-to-red ramp for values in [0, 1], as uint8 RGB."""
    x = np.clip(x, 0.0, 1.0)[..., None]
    rgb = np.clip(1.5 - np.abs(4.0 * x - np.array([3.0, 2.0, 1.0])), 0.0, 1.0)
    return np.rint(rgb * 255).astype(np.uint8)


def cmd_cam(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if not ckpt.model_config.cam_head or ckpt.model_config.baseline:
        raise UsageError("checkpoint has no dense layer after the GRU; retrain with --cam-head")
    if ckpt.model_config.precomputed:
        raise UsageError("class activation maps need an image encoder, not precomputed features")
    records = {r.eye_id: r for r in read_manifest(args.manifest)}
    if args.eye_id not in records:
        raise UsageError(f"eye id {args.eye_id!r} not found in {args.manifest}")
    rec = records[args.eye_id]
    model = ckpt.to_model()
    t = model.config.timepoints
    pconf = PreprocessConfig(target_size=model.config.input_size)
    visits = rec.visits[-t:]
    images = np.stack([preprocess(RawImage(read_ppm(resolve(args.manifest, v.image)), rec.eye), pconf) for v in visits])
    scales = model.scales_for([v.time for v in visits], rec.prediction_time)
    maps = cam(images, scales, model.encoder, model.head)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, m) in enumerate(zip(images, maps)):
        heat = colormap(m)
        orig = np.rint(img * 255).astype(np.uint8)
        overlay = np.rint(0.55 * orig + 0.45 * heat).astype(np.uint8)
        write_ppm(out / f"{rec.eye_id}_t{i}_cam.ppm", heat)
        write_ppm(out / f"{rec.eye_id}_t{i}_composite.ppm", np.concatenate([orig, overlay], axis=1))
    np.save(out / f"{rec.eye_id}_cam.npy", maps)
    print(f"wrote {t} heatmaps for {rec.eye_id} to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="longiprog", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic longitudinal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--eyes", type=int)
    g.add_argument("--progress-rate", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--timepoints", type=int, choices=(1, 2, 3))
    t.add_argument("--no-interval-scaling", action="store_true")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--pos-weight")
    t.add_argument("--cam-head", action="store_true")
    t.add_argument("--hidden", type=int)
    t.add_argument("--float32", action="store_true", help="store checkpoint tensors as 32-bit")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--roc")
    e.add_argument("--svg")
    e.add_argument("--bootstrap", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--split")
    e.add_argument("--timepoints", type=int)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired De Long test between two reports")
    c.add_argument("--report-a", required=True)
    c.add_argument("--report-b", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("cam", help="class activation maps for one eye")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--manifest", required=True)
    m.add_argument("--eye-id", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_cam)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, nn.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PPMError, ManifestError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except CheckpointError as exc:
        print(f"I/O failure: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
