"""Command-line entry point: convert, train, features, fit-ensemble, eval, report.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, load_ensemble_payload, save_checkpoint
from .ensemble import ClassifierEnsemble, EnsembleError, fit_ensemble, predict_ensemble
from .ingestion import (DataError, LabeledDataset, bytes_to_image, generate_surrogate_corpus,
                        generate_synthetic_corpus, load_dataset, write_pgm)
from .metrics import MetricsError, compute_metrics, confusion, pr_curve, roc_auc
from .model import ModelConfig, build_model, images_to_input, pretrain_auxiliary
from .pca import PcaError, pca_fit, pca_project
from .report import emit_report
from .tensor import ConfigError, NumericError
from .training import TrainConfig, score, split_dataset, train

log = logging.getLogger("dsbel")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
MODEL_KEYS = ("side", "stm_widths", "fusion_width", "dropout")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config files and manifests


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key '{key}': expected a boolean, got {text!r}")


def parse_config_text(text: str) -> tuple:
    """``key=value`` lines -> (TrainConfig overrides, model overrides).

    Blank lines and ``#`` comments are ignored; unknown keys are usage errors.
    """
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    t_over, m_over = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in MODEL_KEYS:
                if key == "stm_widths":
                    m_over[key] = tuple(int(v) for v in value.replace(",", " ").split())
                elif key == "dropout":
                    m_over[key] = float(value)
                else:
                    m_over[key] = int(value)
            elif key in train_types:
                kind = train_types[key]
                if kind in (bool, "bool"):
                    t_over[key] = _parse_bool(key, value)
                elif kind in (int, "int"):
                    t_over[key] = int(value)
                elif kind in (float, "float"):
                    t_over[key] = float(value)
                else:
                    t_over[key] = value
            else:
                raise UsageError(f"unknown config key: {key}")
        except ValueError as e:
            raise UsageError(f"config key '{key}': {e}") from e
    return t_over, m_over


def manifest_path(artifact) -> Path:
    p = Path(artifact)
    return p.with_name(p.name + ".manifest.json")


def write_manifest(artifact, subcommand: str, config: dict, seed, inputs: dict, outputs: dict, started: float):
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    manifest_path(artifact).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_train_manifest(model_path) -> dict:
    p = manifest_path(model_path)
    if not p.is_file():
        return {}
    return json.loads(p.read_text())


# --------------------------------------------------------------------------
# data sources


def _source(args, manifest: dict) -> dict:
    """Resolve the dataset source from flags, falling back to the training manifest."""
    if getattr(args, "data", None):
        return {"data": str(args.data)}
    if getattr(args, "synthetic", None) is not None:
        return {"synthetic": int(args.synthetic)}
    src = manifest.get("inputs", {})
    if "data" in src:
        return {"data": src["data"]}
    if "synthetic" in src:
        return {"synthetic": int(src["synthetic"])}
    raise UsageError("no dataset: pass --data or --synthetic (or keep the training manifest next to the model)")


def _load_source(src: dict, side: int, seed: int) -> LabeledDataset:
    if "data" in src:
        return load_dataset(src["data"])
    if src["synthetic"] < 5:
        raise UsageError("--synthetic needs at least 5 images per class")
    return generate_synthetic_corpus(src["synthetic"], side=side, seed=seed)


def _seed(args, manifest: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(manifest.get("seed", 0))


def _split_indices(ds, seed: int, split: str) -> np.ndarray:
    return split_dataset(ds, seed).indices(split)


def _features(model, ds, idx) -> np.ndarray:
    pixels = ds.to_batch(model.config.side, idx)
    return model.extract_features(images_to_input(pixels, model.dtype))


def features_csv(X, y) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{j}" for j in range(X.shape[1])])
    for row, label in zip(np.asarray(X, dtype=np.float32), y):
        w.writerow([int(label)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_features_csv(path) -> tuple:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows or rows[0][:1] != ["label"]:
        raise DataError(f"{path}: not a feature CSV (header must start with 'label')")
    body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
    return body[:, 1:], body[:, 0].astype(np.int64)


# --------------------------------------------------------------------------
# subcommands


def cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise DataError(f"{src}: input directory does not exist")
    files = sorted(p for p in src.rglob("*") if p.is_file())
    if not files:
        log.warning("%s: no files to convert", src)
    failed = []
    for f in files:
        rel = f.relative_to(src)
        try:
            img = bytes_to_image(f.read_bytes())
        except (OSError, DataError) as e:
            failed.append(rel)
            print(f"error: {f}: {getattr(e, 'strerror', None) or e}", file=sys.stderr)
            continue
        target = dst / rel.parent / (rel.name + ".pgm")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(target, img)
    print(f"converted {len(files) - len(failed)} of {len(files)} files")
    return EXIT_DATA if failed else EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    t_over, m_over = ({}, {}) if args.config is None else parse_config_text(Path(args.config).read_text())
    seed = int(args.seed if args.seed is not None else t_over.get("seed", 0))
    t_over["seed"] = seed
    if args.synthetic is not None:
        t_over.setdefault("augment", False)  # rotations would swap the synthetic classes
    t_over.setdefault("deterministic", args.deterministic)
    cfg = TrainConfig(**t_over)
    mcfg = ModelConfig(seed=seed, **m_over)

    src = _source(args, {})
    ds = _load_source(src, mcfg.side, seed)
    plan = split_dataset(ds, seed)
    model = build_model(mcfg)
    surrogate = generate_surrogate_corpus(cfg.surrogate_per_class, side=mcfg.side, seed=seed + 1)
    pretrain_auxiliary(model, surrogate, cfg.pretrain_epochs, lr=cfg.learning_rate, momentum=cfg.momentum,
                       batch_size=cfg.batch_size, seed=seed)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    final = out.with_name(out.stem + ".final" + out.suffix)
    history_path = Path(args.history) if args.history else out.with_name(out.stem + ".history.csv")
    _, history = train(model, ds, plan, cfg, best_path=out, final_path=final)
    history.write_csv(history_path)

    config = {"train": asdict(cfg), "model": json.loads(mcfg.to_json())}
    write_manifest(out, "train", config, seed, src,
                   {"best": out, "final": final, "history": history_path}, started)
    if history.records:
        last = history.records[-1]
        print(f"epochs {len(history)}: train acc {last.train_acc:.4f}, best val acc "
              f"{history.best_val_acc:.4f} at epoch {history.best_epoch}")
    return EXIT_OK


def _model_and_data(args):
    manifest = read_train_manifest(args.model)
    model = load_checkpoint(args.model)
    seed = _seed(args, manifest)
    src = _source(args, manifest)
    ds = _load_source(src, model.config.side, seed)
    return model, ds, seed, src


def cmd_features(args) -> int:
    started = time.time()
    model, ds, seed, src = _model_and_data(args)
    idx = _split_indices(ds, seed, args.split)
    X = _features(model, ds, idx)
    Path(args.out).write_text(features_csv(X, ds.labels[idx]))
    write_manifest(args.out, "features", {"split": args.split}, seed, {"model": args.model, **src},
                   {"features": args.out}, started)
    print(f"wrote {len(idx)} x {X.shape[1]} features")
    return EXIT_OK


def cmd_fit_ensemble(args) -> int:
    started = time.time()
    model = load_checkpoint(args.model)
    manifest = read_train_manifest(args.model)
    seed = _seed(args, manifest)
    if args.features:
        X, y = read_features_csv(args.features)
        inputs = {"model": args.model, "features": args.features}
    else:
        src = _source(args, manifest)
        ds = _load_source(src, model.config.side, seed)
        idx = _split_indices(ds, seed, args.split)
        X, y = _features(model, ds, idx), ds.labels[idx]
        inputs = {"model": args.model, **src}
    if X.shape[1] != model.config.fusion_width:
        raise EnsembleError(f"feature width {X.shape[1]} does not match model width {model.config.fusion_width}")
    ens = fit_ensemble(X, y, seed=seed)
    out = Path(args.out or args.model)
    save_checkpoint(model, out, ensemble=ens.to_dict())
    if out != Path(args.model) and manifest_path(args.model).is_file():
        manifest_path(out).write_text(manifest_path(args.model).read_text())
    write_manifest(Path(str(out) + ".ensemble"), "fit-ensemble", {"split": args.split}, seed, inputs,
                   {"model": out}, started)
    print(f"fitted ensemble on {len(y)} items")
    return EXIT_OK


def _scores_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "index", "label", "pred", "score"])
    for name, idx, labels, preds, scores in rows:
        for i, l, p, s in zip(idx, labels, preds, scores):
            w.writerow([name, int(i), int(l), int(p), repr(float(s))])
    return buf.getvalue()


def _report_from_rows(rows: list, out_dir, pca=None) -> dict:
    metrics, roc, pr = {}, {}, {}
    for name, _, labels, preds, scores in rows:
        curve, auc = roc_auc(scores, labels)
        metrics[name] = compute_metrics(confusion(preds, labels)).with_auc(auc)
        roc[name], pr[name] = curve, pr_curve(scores, labels)
    return emit_report(metrics, roc, pr, out_dir, pca)


def cmd_eval(args) -> int:
    started = time.time()
    model, ds, seed, src = _model_and_data(args)
    payload = load_ensemble_payload(args.model)
    if args.mode in ("ensemble", "both") and payload is None:
        if args.mode == "ensemble":
            raise EnsembleError(f"{args.model}: no ensemble stored; run fit-ensemble first")
        log.warning("%s: no ensemble stored; reporting the CNN only", args.model)
    idx = _split_indices(ds, seed, args.split)
    labels = ds.labels[idx]
    rows = []
    if args.mode in ("cnn", "both"):
        probs, _ = score(model, ds, idx)
        rows.append(("cnn", idx, labels, (probs > 0.5).astype(np.int64), probs))
    feats = _features(model, ds, idx)
    if payload is not None and args.mode in ("ensemble", "both"):
        ens = ClassifierEnsemble.from_dict(payload)
        pred, ens_score = predict_ensemble(ens, feats)
        for name, (p, s) in ens.individual(feats).items():
            rows.append((name, idx, labels, p, s))
        rows.append(("dsbel", idx, labels, pred, ens_score))
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    pca = None
    if len(idx) >= 2:
        pm = pca_fit(feats, k=min(3, feats.shape[1]))
        pca = (pca_project(pm, feats), labels)
    paths = _report_from_rows(rows, out, pca)
    (out / "scores.csv").write_text(_scores_csv(rows))
    write_manifest(out / "report", "eval", {"split": args.split, "mode": args.mode}, seed,
                   {"model": args.model, **src}, {**paths, "scores.csv": out / "scores.csv"}, started)
    for name, _, lab, pred, _ in rows:
        print(f"{name}: accuracy {100 * np.mean(pred == lab):.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    """Rebuild report.csv / roc.svg / pr.svg from a scores.csv written by eval."""
    path = Path(args.scores)
    if not path.is_file():
        raise DataError(f"{path}: scores file not found")
    groups = {}
    for r in csv.DictReader(path.read_text().splitlines()):
        g = groups.setdefault(r["model"], ([], [], [], []))
        for col, key in zip(g, ("index", "label", "pred", "score")):
            col.append(float(r[key]) if key == "score" else int(r[key]))
    rows = [(name, np.array(i), np.array(l), np.array(p), np.array(s)) for name, (i, l, p, s) in groups.items()]
    _report_from_rows(rows, args.out)
    print(f"wrote report for {len(rows)} models to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsbel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dsbel {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp, required=False):
        g = sp.add_mutually_exclusive_group(required=required)
        g.add_argument("--data", help="directory with benign/ and malware/ PGM subdirectories")
        g.add_argument("--synthetic", type=int, metavar="N", help="use the synthetic corpus with N images per class")

    sp = sub.add_parser("convert", help="map raw executables to PGM images")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("train", help="pretrain the auxiliary stem, then train the CNN")
    data_flags(sp, required=True)
    sp.add_argument("--config", help="key=value training/model configuration file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="best-validation checkpoint path")
    sp.add_argument("--history", help="history CSV path (default: <out stem>.history.csv)")
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("features", cmd_features, "write deep features as CSV"),
                                 ("fit-ensemble", cmd_fit_ensemble, "fit SVM/MLP/AdaBoost on deep features"),
                                 ("eval", cmd_eval, "score the CNN and the ensemble; write the report")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--model", required=True)
        data_flags(sp)
        sp.add_argument("--seed", type=int, help="split seed (default: from the training manifest)")
        sp.add_argument("--split", choices=("train", "val", "test", "all"),
                        default="train" if name == "fit-ensemble" else "test")
        sp.set_defaults(func=func)
    sub.choices["features"].add_argument("--out", required=True)
    sub.choices["fit-ensemble"].add_argument("--features", help="fit from a feature CSV instead of the model")
    sub.choices["fit-ensemble"].add_argument("--out", help="output container (default: update --model in place)")
    sub.choices["eval"].add_argument("--report", required=True, help="output directory")
    sub.choices["eval"].add_argument("--mode", choices=("both", "cnn", "ensemble"), default="both")

    sp = sub.add_parser("report", help="rebuild report files from an eval scores.csv")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"dsbel {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, EnsembleError, PcaError, MetricsError, NumericError, OSError) as e:
        print(f"dsbel {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
