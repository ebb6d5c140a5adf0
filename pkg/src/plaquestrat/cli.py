"""Command-line entry point: ``plaquestrat {synth,train,predict,explain,cv,search}``.

Exit status is 0 on success, 1 on usage errors and 2 on data/format errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import EnsembleConfig, RunConfig, load_config
from .data import (load_image, load_images, load_manifest, save_rgb,
                   synth_generate, write_manifest)
from .ensemble import (EnsembleModel, canonical_scheme, load_ensemble, predict_batch, save_ensemble,
                       stratified_split, train_ensemble)
from .errors import ConfigError, PlaqueStratError, ShapeError, UsageError
from .evaluation import (EnsemblePipeline, confusion, hyperparameter_search, kfold_cv, metrics, roc_auc,
                         roc_curve, write_fold_csv, write_search_csv, write_summary_csv)
from .explain import explain_instance, render_heatmap
from .training import write_history


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    return repr(float(x))


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    ens = cfg.ensemble
    if getattr(args, "scheme", None):
        ens = replace(ens, scheme=canonical_scheme(args.scheme))
    if getattr(args, "threshold", None) is not None:
        ens = EnsembleConfig(ens.scheme, args.threshold)
    cfg = replace(cfg, ensemble=ens)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_predictions(path, names, p, labels, ys) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "y1", "y2", "y3", "p_star", "label"])
        for name, pi, li, yi in zip(names, p, labels, ys):
            w.writerow([name, *(_fmt(v) for v in yi), _fmt(pi), int(li)])


def _write_metrics(path, report, cm) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in report.as_dict().items():
            w.writerow([k, _fmt(v)])
        for k in ("tp", "fn", "tn", "fp"):
            w.writerow([k, getattr(cm, k)])


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    m = synth_generate(args.n_neg, args.n_pos, args.out, size=args.size, seed=args.seed, signal=args.signal)
    n_neg, n_pos = m.class_counts()
    print(f"wrote {len(m)} images ({n_neg} negative, {n_pos} positive) and manifest.csv to {args.out}")


def cmd_train(args) -> None:
    from .plotting import plot_confusion, plot_history

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    if any(e.split is None for e in manifest.entries):
        manifest = stratified_split(manifest, seed=cfg.seed)
    images = load_images(manifest, cfg.model.input_size)
    ensemble, results = train_ensemble(manifest, images, cfg.model, cfg.train, cfg.seed,
                                       cfg.ensemble.scheme, cfg.ensemble.threshold, args.jobs)
    save_ensemble(ensemble, out / "ensemble.pqs")
    write_manifest(manifest, out / "split_manifest.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    curves = []
    for i, r in enumerate(results, start=1):
        write_history(r.phase1, out / f"history_model{i}_phase1.csv")
        write_history(r.phase2, out / f"history_model{i}_phase2.csv")
        curves.append((f"model {i}", r.phase1))
    plot_history(curves, out / "training_curves.png")

    test = manifest.indices("test")
    if len(test):
        p, labels, ys = predict_batch(ensemble, images[test])
        _write_predictions(out / "test_predictions.csv", [manifest.entries[i].path for i in test], p, labels, ys)
        truth = manifest.labels[test]
        cm = confusion(truth, labels)
        try:
            report = metrics(cm, roc_auc(truth, p))
        except PlaqueStratError:
            report = None
        if report is not None:
            _write_metrics(out / "test_metrics.csv", report, cm)
            plot_confusion(cm, out / "test_confusion.png", "Held-out test split")
            print(f"test split: sensitivity {report.sensitivity:.3f} specificity {report.specificity:.3f} "
                  f"balanced accuracy {report.balanced_accuracy:.3f} AUC {report.auc:.3f}")
    print(f"ensemble written to {out / 'ensemble.pqs'}")


def _image_list(args) -> list[tuple[str, Path]]:
    items = []
    if args.manifest:
        m = load_manifest(args.manifest)
        items += [(e.path, m.resolve(e)) for e in m.entries]
    items += [(p, Path(p)) for p in args.images]
    if not items:
        raise UsageError("predict needs --manifest or at least one image path")
    return items


def _load_for(ensemble: EnsembleModel, name: str, path: Path, resize: bool) -> np.ndarray:
    size = ensemble.config.input_size
    image = load_image(path, size if resize else None).to_array()
    if image.shape[:2] != size:
        raise ShapeError(f"{name}: image is {image.shape[0]}x{image.shape[1]} but the model expects "
                         f"{size[0]}x{size[1]} (pass --resize to resample)")
    return image


def _with_overrides(ensemble: EnsembleModel, args) -> EnsembleModel:
    if not args.scheme and args.threshold is None:
        return ensemble
    return EnsembleModel(ensemble.models, args.scheme or ensemble.scheme,
                         ensemble.threshold if args.threshold is None else args.threshold)


def cmd_predict(args) -> None:
    ensemble = _with_overrides(load_ensemble(args.ensemble), args)
    items = _image_list(args)
    images = np.stack([_load_for(ensemble, name, path, args.resize) for name, path in items])
    p, labels, ys = predict_batch(ensemble, images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(out, [n for n, _ in items], p, labels, ys)
    print(f"wrote {len(items)} predictions to {out}")


def cmd_explain(args) -> None:
    from .plotting import plot_explanation

    cfg = _run_config(args)
    ecfg = cfg.explain if args.top_k is None else replace(cfg.explain, top_k=args.top_k)
    if args.n_samples is not None:
        ecfg = replace(ecfg, n_samples=args.n_samples)
    ensemble = _with_overrides(load_ensemble(args.ensemble), args)
    image = _load_for(ensemble, args.image, Path(args.image), args.resize)

    def predictor(batch):
        return predict_batch(ensemble, batch)[0]

    expl, spmap = explain_instance(predictor, image, ecfg, seed=cfg.seed)
    heatmap, overlay = render_heatmap(image, spmap, expl, ecfg.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = spmap.counts
    rank = np.empty(len(expl.coefficients), dtype=np.int64)
    rank[expl.ranking()] = np.arange(1, len(rank) + 1)
    with open(out / "explanation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "pixel_count", "coefficient", "rank"])
        for s, beta in enumerate(expl.coefficients):
            w.writerow([s, int(counts[s]), _fmt(beta), int(rank[s])])
    save_rgb(heatmap, out / "heatmap.png")
    save_rgb(overlay, out / "overlay.png")
    p, label = float(expl.base_prediction), int(expl.base_prediction >= ensemble.threshold)
    title = f"p* = {p:.3f} ({'Symptomatic' if label else 'Asymptomatic'}), surrogate R2 = {expl.r2:.3f}"
    plot_explanation(image, heatmap, overlay, expl.coefficients, out / "explanation.png", title)
    print(f"{spmap.n_segments} segments, intercept {expl.intercept:.4f}, R2 {expl.r2:.4f}; outputs in {out}")


def cmd_cv(args) -> None:
    from .plotting import plot_confusion, plot_roc

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    images = load_images(manifest, cfg.model.input_size)
    pipeline = EnsemblePipeline(cfg.model, cfg.train, cfg.ensemble.scheme, cfg.ensemble.threshold)
    cv = kfold_cv(manifest, images, pipeline, args.k, cfg.seed, args.jobs)
    write_fold_csv(cv, out / "folds.csv")
    write_summary_csv(cv, out / "summary.csv")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "path", "label", "y1", "y2", "y3", "p_star", "predicted"])
        for f in cv.folds:
            for j, i in enumerate(f.indices):
                ys = f.extra.get("model_probs", np.full((len(f.indices), 3), np.nan))[j]
                w.writerow([f.fold + 1, manifest.entries[i].path, int(f.labels[j]), *(_fmt(v) for v in ys),
                            _fmt(f.scores[j]), int(f.predicted[j])])
    pooled = cv.pooled_confusion()
    (out / "confusion.txt").write_text(pooled.render())
    plot_confusion(pooled, out / "confusion.png", f"{args.k}-fold pooled")
    plot_roc([(f"fold {f.fold + 1}", *roc_curve(f.labels, f.scores), f.report.auc) for f in cv.folds],
             out / "roc.png")
    for name, (mu, sd) in cv.summary().items():
        print(f"{name:>18}: {mu:.3f} +/- {sd:.3f}")
    print(pooled.render(), end="")


def cmd_search(args) -> None:
    cfg = _run_config(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.grid}: invalid JSON ({exc})") from None
    manifest = load_manifest(args.manifest)
    images = load_images(manifest, cfg.model.input_size)
    rows = hyperparameter_search(grid, manifest, images, cfg.model, cfg.train, cfg.ensemble.scheme,
                                 cfg.ensemble.threshold, args.k, cfg.seed, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_search_csv(rows, out / "search_results.csv")
    for rank, r in enumerate(rows, start=1):
        ba, auc = r.summary["balanced_accuracy"], r.summary["auc"]
        print(f"{rank:>3}  bal.acc {ba[0]:.3f}+/-{ba[1]:.3f}  AUC {auc[0]:.3f}+/-{auc[1]:.3f}  {r.key}")


# ---------------------------------------------------------------- parser


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plaquestrat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True, seed=True, jobs=False, scheme=False):
        if config:
            p.add_argument("--config", help="JSON run configuration")
        if seed:
            p.add_argument("--seed", type=_nonneg_int, default=None, help="overrides the config seed")
        if jobs:
            p.add_argument("--jobs", type=_pos_int, default=1, help="worker processes (results are identical)")
        if scheme:
            p.add_argument("--scheme", choices=["vote", "average", "weighted"])
            p.add_argument("--threshold", type=float, default=None, help="decision threshold (default 0.465)")

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-neg", type=_pos_int, default=160)
    p.add_argument("--n-pos", type=_pos_int, default=40)
    p.add_argument("--size", type=_pos_int, default=96)
    p.add_argument("--signal", type=float, default=1.0, help="class signal strength in [0, 1]")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a three-model ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p, jobs=True, scheme=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score images with a trained ensemble")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--manifest")
    p.add_argument("images", nargs="*")
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.add_argument("--resize", action="store_true", help="resample images to the model input size")
    common(p, config=False, seed=False, scheme=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="local surrogate explanation of one prediction")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=_nonneg_int, default=None)
    p.add_argument("--n-samples", type=_pos_int, default=None)
    p.add_argument("--resize", action="store_true")
    common(p, scheme=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("cv", help="group-stratified k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_pos_int, default=4)
    common(p, jobs=True, scheme=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("search", help="grid search scored by k-fold CV")
    p.add_argument("--grid", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_pos_int, default=4)
    common(p, jobs=True, scheme=True)
    p.set_defaults(func=cmd_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"plaquestrat {args.command}: {exc}", file=sys.stderr)
        return 1
    except (PlaqueStratError, OSError) as exc:
        print(f"plaquestrat {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
