"""Command-line entry point: ``xbld <subcommand>``.

Exit codes: 0 success, 1 validation error, 2 stage failure, 3 partial report.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError

log = logging.getLogger("xbld")

EXIT_OK, EXIT_INVALID, EXIT_STAGE, EXIT_PARTIAL = 0, 1, 2, 3


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def parse_thresholds(text: str) -> list[float]:
    """``40:95:5`` (inclusive range) or a comma list."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        out, t = [], lo
        while t <= hi + 1e-9:
            out.append(int(t) if float(t).is_integer() else t)
            t += step
        return out
    return [int(v) if float(v).is_integer() else float(v) for v in text.split(",") if v.strip()]


def _ints(text: Optional[str]) -> Optional[tuple[int, ...]]:
    if text is None or str(text).strip() == "":
        return None
    return tuple(int(v) for v in str(text).split(","))


def _bool(text) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# ---------------------------------------------------------------- experiment config

CONFIG_KEYS = {
    "dataset": str, "preset": str, "seed": int, "patch_size": int, "strategy": str,
    "limit_train": int, "limit_test": int, "train_epochs": int, "refine_epochs": int,
    "methods": str, "lambda1": float, "lambda2": float, "lam": float, "batch_size": int,
    "thresholds": str, "conv_filters": str, "fc_sizes": str, "maxpool": str,
    "learning_rate": float, "eps": float, "gallery": int, "report_dataset": str, "out": str,
}
CONFIG_DEFAULTS = {
    "patch_size": 4, "strategy": "threshold:0.1", "train_epochs": 20, "refine_epochs": 50,
    "methods": "xbl_d,rrr", "lambda1": 2.7, "lambda2": 0.1, "lam": 1e-5,
    "thresholds": "40:95:5", "eps": 0.0, "gallery": 0, "out": "runs",
}


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values.get(key, CONFIG_DEFAULTS.get(key))

    @classmethod
    def from_text(cls, text: str, overrides: Optional[dict] = None) -> "ExperimentConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, _, val = (s.strip() for s in line.partition("="))
            values[key] = val
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.validate(values)

    @classmethod
    def validate(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("seed", "dataset", "preset"):
            if key not in raw or raw[key] in ("", None):
                raise ConfigError(f"config is missing required key {key!r}")
        values = {}
        for key, val in raw.items():
            try:
                values[key] = CONFIG_KEYS[key](val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {val!r}") from exc
        from .modelzoo import PRESETS
        from .xblloss import METHODS

        if values["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {values['preset']!r}")
        cfg = cls(values)
        bad = [m for m in cfg.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown refinement methods {bad}")
        ds = values["dataset"]
        from .sources import BUILTINS

        if ds not in BUILTINS and not Path(ds).exists():
            raise ConfigError(f"dataset {ds!r} is neither builtin nor an existing path")
        parse_thresholds(cfg["thresholds"])
        return cfg

    @property
    def methods(self) -> list[str]:
        return [m.strip() for m in str(self["methods"]).split(",") if m.strip()]

    def canonical(self) -> str:
        merged = {**CONFIG_DEFAULTS, **self.values}
        merged.pop("out", None)
        return "\n".join(f"{k} = {merged[k]!r}" for k in sorted(merged))

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


# ---------------------------------------------------------------- stage helpers

def _load_data(data_dir, split, limit=None):
    from .decoygen import load_split

    return load_split(data_dir, split, limit)


def _arch(preset_name: str, data, conv=None, fc=None, maxpool=None, lr=None, num_classes=None):
    from .modelzoo import ConvBlock, preset

    base = preset(preset_name)
    overrides = {"num_classes": num_classes or int(data.labels.max()) + 1,
                 "input_shape": tuple(data.images.shape[1:])}
    if conv:
        overrides["conv_blocks"] = tuple(ConvBlock(f, bool(maxpool)) for f in conv)
    elif maxpool is not None:
        overrides["conv_blocks"] = tuple(ConvBlock(b.filters, bool(maxpool)) for b in base.conv_blocks)
    if fc:
        overrides["fc_sizes"] = tuple(fc)
    if lr:
        overrides["learning_rate"] = lr
    return preset(preset_name, **overrides)


def _report_dataset(preset_name: str, explicit: Optional[str] = None) -> str:
    return explicit or preset_name


def stage_decoy(source, patch_size, strategy, seed, out, name=None, limit_train=None, limit_test=None):
    from .decoygen import build_decoy_dataset
    from .sources import load_source

    src = load_source(source, limit_train, limit_test, seed)
    return build_decoy_dataset(src, out, patch_size, strategy, seed, name)


def stage_train(preset_name, data_dir, epochs, seed, out, batch_size=None, **arch):
    from .decoygen import DecoyDatasetManifest
    from .modelzoo import DEFAULT_BATCH, TrainConfig, fit_unrefined

    train = _load_data(data_dir, "train")
    classes = DecoyDatasetManifest.read(data_dir).params.get("class_names") or None
    spec = _arch(preset_name, train, num_classes=len(classes) if classes else None, **arch)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size or DEFAULT_BATCH[preset_name], seed=seed)
    return fit_unrefined(spec, train, cfg, out, dataset_name=Path(data_dir).name)


def stage_refine(checkpoint, data_dir, method, epochs, lambda1, lambda2, lam, seed, out,
                 batch_size=None, stop_loss=None, eps=0.0):
    from .modelzoo import ModelHandle
    from .refine import RefineConfig, refine
    from .xblloss import LossCoefficients

    handle = ModelHandle.load(checkpoint)
    train = _load_data(data_dir, "train")
    cfg = RefineConfig(method=method, epochs=epochs, coeffs=LossCoefficients(lambda1, lambda2, lam),
                       stop_loss=stop_loss, seed=seed, batch_size=batch_size or 32, eps=eps)
    return refine(handle, train, cfg, out)


def stage_evaluate(checkpoint, data_dir, out, thresholds, method=None, dataset="", saliency=False):
    from .evalmetrics import evaluate_model, write_curves_csv
    from .modelzoo import ModelHandle

    handle = ModelHandle.load(checkpoint)
    test = _load_data(data_dir, "test")
    report = evaluate_model(handle, test, thresholds, method, dataset)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / f"{report.method or 'model'}.json")
    write_curves_csv(report.curves, out / f"{report.method or 'model'}_curves.csv")
    if saliency:
        from .evalmetrics import explain_split
        from .explainer import SaliencyMap, export_saliency

        maps = explain_split(handle, test.images, test.labels)
        export_saliency([SaliencyMap(m, int(y), resolution_tag="input") for m, y in zip(maps, test.labels)],
                        test.ids, Path(checkpoint) / "saliency")
    return report


# ---------------------------------------------------------------- pipeline

def run_pipeline(cfg: ExperimentConfig, out_root=None) -> tuple[Path, bool]:
    """decoy -> unrefined fit -> refinements -> clean-test evaluation -> report.

    Every stage is skipped when its artifact already exists under the run
    directory ``<out>/runs/<config hash>``.
    """
    from .decoygen import MANIFEST_NAME
    from .evalmetrics import EvalReport
    from .report import emit_report

    root = Path(out_root or cfg["out"]) / "runs" / cfg.run_id()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(cfg.canonical() + "\n")
    seed = cfg["seed"]
    arch = dict(conv=_ints(cfg["conv_filters"]), fc=_ints(cfg["fc_sizes"]),
                maxpool=_bool(cfg["maxpool"]) if cfg["maxpool"] is not None else None,
                lr=cfg["learning_rate"])
    data_dir = root / "data" / "decoy"
    thresholds = parse_thresholds(cfg["thresholds"])
    dataset_key = _report_dataset(cfg["preset"], cfg["report_dataset"])

    def stage(name, fn):
        try:
            return fn()
        except (KeyboardInterrupt, ConfigError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    if not (data_dir / MANIFEST_NAME).exists():
        log.info("stage decoy")
        stage("decoy", lambda: stage_decoy(cfg["dataset"], cfg["patch_size"], cfg["strategy"], seed,
                                           data_dir.parent, "decoy", cfg["limit_train"],
                                           cfg["limit_test"]))
    unrefined_dir = root / "unrefined"
    if not (unrefined_dir / "meta.json").exists():
        log.info("stage train")
        stage("train", lambda: stage_train(cfg["preset"], data_dir, cfg["train_epochs"], seed,
                                           unrefined_dir, cfg["batch_size"], **arch))
    model_dirs = {"unrefined": unrefined_dir}
    for method in cfg.methods:
        mdir = root / method
        if not (mdir / "trace.csv").exists():
            log.info("stage refine (%s)", method)
            stage(f"refine:{method}", lambda: stage_refine(
                unrefined_dir, data_dir, method, cfg["refine_epochs"], cfg["lambda1"],
                cfg["lambda2"], cfg["lam"], seed, mdir, cfg["batch_size"], eps=cfg["eps"]))
        model_dirs[method] = mdir
    results = []
    for method, mdir in model_dirs.items():
        ev = root / "eval" / f"{method}.json"
        if not ev.exists():
            log.info("stage evaluate (%s)", method)
            stage(f"evaluate:{method}", lambda: stage_evaluate(mdir, data_dir, root / "eval",
                                                               thresholds, method, dataset_key))
        results.append(EvalReport.from_json(ev))
    _, complete = stage("report", lambda: emit_report(results, dataset_key, root / "report",
                                                      ["unrefined", *cfg.methods]))
    if cfg["gallery"]:
        from .modelzoo import ModelHandle
        from .report import saliency_gallery

        test = None
        for method, mdir in model_dirs.items():
            gdir = root / "gallery" / method
            if not (gdir / "gallery.png").exists():
                test = test or _load_data(data_dir, "test")
                stage("gallery", lambda: saliency_gallery(ModelHandle.load(mdir), test, gdir,
                                                          cfg["gallery"], seed))
    return root, complete


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xbld", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decoy", help="build a decoyed dataset")
    d.add_argument("--source", required=True, help="fashion-mnist, cifar10, synthetic, .npz or directory")
    d.add_argument("--patch-size", type=int, default=4)
    d.add_argument("--strategy", default="threshold:0.1",
                   help="threshold[:tau], corners[:size] or segmentation")
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--name")
    d.add_argument("--limit-train", type=int)
    d.add_argument("--limit-test", type=int)

    def arch_args(sp):
        sp.add_argument("--conv-filters", help="override conv stack, e.g. 16,32")
        sp.add_argument("--fc-sizes", help="override hidden FC sizes, e.g. 64")
        sp.add_argument("--maxpool", choices=("true", "false"))
        sp.add_argument("--lr", type=float)

    t = sub.add_parser("train", help="fit an unrefined model with cross-entropy")
    t.add_argument("--preset", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--batch-size", type=int)
    arch_args(t)

    r = sub.add_parser("refine", help="refine a checkpoint with an explanation loss")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--method", choices=("xbl_d", "rrr", "rrr_g"), default="xbl_d")
    r.add_argument("--epochs", type=int, default=50)
    r.add_argument("--lambda1", type=float, default=2.7)
    r.add_argument("--lambda2", type=float, default=0.1)
    r.add_argument("--lam", type=float, default=1e-5)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--batch-size", type=int, default=32)
    r.add_argument("--stop-loss", type=float)
    r.add_argument("--eps", type=float, default=0.0)

    for name, helptext in (("evaluate", "accuracy and AR/AP curves on the clean test split"),
                           ("sweep", "AR/AP curves only")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--method", help="label for the results (default: checkpoint provenance)")
        e.add_argument("--dataset", default="")
        e.add_argument("--thresholds", default="40:95:5")
        if name == "evaluate":
            e.add_argument("--saliency", action="store_true", help="also export Grad-CAM PNGs")

    rp = sub.add_parser("report", help="tables from evaluate outputs")
    rp.add_argument("--eval", nargs="+", required=True, help="evaluation JSON files or directories")
    rp.add_argument("--dataset", required=True, choices=("fmnist", "cifar10", "coco2"))
    rp.add_argument("--out", required=True)
    rp.add_argument("--expect", help="comma list of methods that must be present")

    pl = sub.add_parser("pipeline", help="run the full experiment from a config file")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out")
    pl.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")

    g = sub.add_parser("gallery", help="Grad-CAM gallery for sample test instances")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="test", choices=("train", "test"))
    return p


def _collect_eval(paths: Sequence[str]):
    from .evalmetrics import EvalReport

    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("*.json")) if p.is_dir() else [p]
    return [EvalReport.from_json(f) for f in files]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args) -> int:
    arch = {}
    if args.command in ("train",):
        arch = dict(conv=_ints(args.conv_filters), fc=_ints(args.fc_sizes),
                    maxpool=None if args.maxpool is None else args.maxpool == "true", lr=args.lr)
    if args.command == "decoy":
        m = stage_decoy(args.source, args.patch_size, args.strategy, args.seed, args.out, args.name,
                        args.limit_train, args.limit_test)
        print(m.root)
    elif args.command == "train":
        h = stage_train(args.preset, args.data, args.epochs, args.seed, args.out, args.batch_size, **arch)
        print(f"{args.out} ({h.provenance['epochs']} epochs)")
    elif args.command == "refine":
        _, trace = stage_refine(args.checkpoint, args.data, args.method, args.epochs, args.lambda1,
                                args.lambda2, args.lam, args.seed, args.out, args.batch_size,
                                args.stop_loss, args.eps)
        print(f"{args.out} ({len(trace)} epochs, final total {trace.epochs[-1]['total']:.6g})")
    elif args.command in ("evaluate", "sweep"):
        rep = stage_evaluate(args.checkpoint, args.data, args.out, parse_thresholds(args.thresholds),
                             args.method, args.dataset, getattr(args, "saliency", False))
        if args.command == "evaluate":
            print(f"accuracy {rep.accuracy:.4f}")
        print(json.dumps({c.metric: dict(zip(map(str, c.thresholds), c.values)) for c in rep.curves}))
    elif args.command == "report":
        from .report import emit_report

        expect = [m for m in (args.expect or "").split(",") if m]
        _, complete = emit_report(_collect_eval(args.eval), args.dataset, args.out, expect)
        return EXIT_OK if complete else EXIT_PARTIAL
    elif args.command == "pipeline":
        overrides = {}
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = val.strip()
        cfg = ExperimentConfig.from_text(Path(args.config).read_text(), overrides)
        root, complete = run_pipeline(cfg, args.out)
        print(root)
        return EXIT_OK if complete else EXIT_PARTIAL
    elif args.command == "gallery":
        from .modelzoo import ModelHandle
        from .report import saliency_gallery

        split = _load_data(args.data, args.split)
        path, ids = saliency_gallery(ModelHandle.load(args.checkpoint), split, args.out, args.n, args.seed)
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
