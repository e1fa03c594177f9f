"""Command-line interface.

Subcommands: ``normalize``, ``fit-reference``, ``synth {stains,blobs}``,
``train-stage1``, ``train-stage2``, ``infer``, ``evaluate``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import PreprocessConfig, load_checkpoint, load_manifest, save_checkpoint
from .exceptions import DataError, MissingFile, ParseError
from .inference import MAX_VIEWS, average_probabilities, tta_views
from .metrics import compute_metrics, confusion
from .model import Network
from .sampling import PRNG_ALGORITHM, stratified_split
from .stain_norm import MacenkoNormalizer, StainReference, fit_reference
from .synthgen import CELL_CLASSES, SynthBlobSpec, synth_blobs, synth_cell_dataset
from .trainer import STAGE_DEFAULTS, TrainConfig, train_stage1, train_stage2

logger = logging.getLogger("stainbalance")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
CONFIG_ALIASES = {"lambda": "lam", "patience": "early_stopping_patience"}
# geometric views used as training-time augmentation
N_TRAIN_VIEWS = 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers ------------------------------------------------------------


def _train_config(stage, config_path, overrides):
    mapping = {k: repr(v) if not isinstance(v, str) else v for k, v in STAGE_DEFAULTS[stage].items()}
    if config_path:
        mapping.update(dataio.read_key_values(config_path))
    mapping.update({k: str(v) for k, v in overrides.items() if v is not None})
    mapping["stage"] = str(stage)
    try:
        cfg, unused = dataio.config_from_mapping(mapping, TrainConfig, CONFIG_ALIASES)
        pre, _ = dataio.config_from_mapping(mapping, PreprocessConfig)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    unknown = [k for k in unused if k not in {f for f in PreprocessConfig.__dataclass_fields__}]
    if unknown:
        logger.warning("ignoring unknown config keys: %s", ", ".join(sorted(unknown)))
    return cfg, pre


def _load_inputs(manifest, pre, views=1, normalizer=None):
    """Feature matrix ``(n, d)``, or ``(n, views, d)`` when ``views > 1``."""
    if manifest.kind == "features":
        return manifest.features
    if normalizer is None and pre.normalize_stains:
        normalizer = MacenkoNormalizer(on_error="passthrough").fit()
    rows = []
    for p in manifest.paths:
        prepared = dataio.prepare_image(dataio.read_image(manifest.resolve(p)), pre, normalizer)
        vecs = [dataio.image_to_vector(v, pre.pool_to) for v in tta_views(prepared, views)]
        rows.append(vecs)
    X = np.asarray(rows, dtype=np.float64)
    return X[:, 0] if views == 1 else X


def _report_path(ckpt):
    return Path(ckpt).with_suffix(".report.csv")


def _metadata(cfg, pre, manifest, extra=None):
    meta = {
        "config": cfg.to_dict(),
        "input_kind": manifest.kind,
        "preprocess": None if manifest.kind == "features" else pre.__dict__.copy(),
        "label_names": manifest.label_names,
        "prng": PRNG_ALGORITHM,
        "seed": cfg.seed,
    }
    meta.update(extra or {})
    return meta


def _split(manifest, fraction, seed):
    if len(manifest) == 0:
        raise DataError("manifest has no rows")
    return stratified_split(manifest.labels, fraction, seed)


# --- subcommands --------------------------------------------------------


def cmd_normalize(args):
    reference = None
    if args.reference:
        ref_path = Path(args.reference)
        if not ref_path.exists():
            raise MissingFile(f"reference not found: {ref_path}")
        reference = StainReference.from_text(ref_path.read_text(encoding="utf-8"))
    norm = MacenkoNormalizer(
        alpha=args.alpha,
        od_threshold=args.od_threshold,
        reference=reference,
        on_error="raise" if args.strict else "passthrough",
    ).fit()
    src, dst = Path(args.inp), Path(args.out)
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        pairs = [(p, dst / p.name) for p in dataio.list_images(src)]
    elif src.exists():
        pairs = [(src, dst)]
    else:
        raise MissingFile(f"input not found: {src}")
    for s, d in pairs:
        out = norm.transform([dataio.read_image(s)])[0]
        dataio.write_image(d, out)
    logger.info("normalized %d image(s)", len(pairs))


def cmd_fit_reference(args):
    images = [dataio.read_image(p) for p in dataio.list_images(args.inp)]
    ref = fit_reference(images, args.alpha, args.od_threshold)
    dataio.atomic_write_text(args.out, ref.to_text())


def cmd_synth_stains(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths, labels, truth = [], [], []
    for i, (image, stains, label) in enumerate(synth_cell_dataset(args.n, args.seed, args.size)):
        name = f"cell_{i:05d}.png"
        dataio.write_image(out / name, image)
        paths.append(name)
        labels.append(label)
        truth.append([name] + [repr(float(v)) for v in stains.T.reshape(-1)])
    dataio.write_label_space(out / "labels.txt", CELL_CLASSES)
    dataio.write_manifest(out / "manifest.csv", paths, labels, CELL_CLASSES)
    with open(out / "stains.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "h_r", "h_g", "h_b", "e_r", "e_g", "e_b"])
        w.writerows(truth)


def _parse_counts(text):
    try:
        counts = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise UsageError(f"bad counts: {text!r}") from None
    if len(counts) < 2 or min(counts) < 1:
        raise UsageError("counts need >= 2 positive entries")
    return counts


def cmd_synth_blobs(args):
    counts = _parse_counts(args.counts)
    if args.test_counts:
        test_counts = _parse_counts(args.test_counts)
        if len(test_counts) != len(counts):
            raise UsageError("--test-counts must have one entry per class")
    else:
        test_counts = tuple(max(1, round(c / 4)) for c in counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_features = args.n_features or max(8, len(counts))
    names = [f"class_{j}" for j in range(len(counts))]
    dataio.write_label_space(out / "labels.txt", names)
    base = SynthBlobSpec(counts=counts, n_features=n_features, separation=args.separation,
                         spread=args.spread, seed=args.seed)
    for split, cts, seed in (("train", counts, args.seed), ("test", test_counts, args.seed + 1)):
        spec = SynthBlobSpec(counts=cts, centers=base.centers, spread=args.spread, seed=seed)
        X, y = synth_blobs(spec)
        ids = [f"{split}_{i:06d}" for i in range(len(y))]
        dataio.write_features_manifest(out / f"{split}.csv", ids, X, y, names)


def cmd_train_stage1(args):
    cfg, pre = _train_config(1, args.config, {"seed": args.seed})
    manifest = load_manifest(args.manifest, args.labels)
    views = N_TRAIN_VIEWS if cfg.augment and manifest.kind == "image" else 1
    X = _load_inputs(manifest, pre, views)
    tr, va = _split(manifest, cfg.val_fraction, cfg.seed)
    dim = X.shape[-1]
    net = Network(dim, len(manifest.label_names), cfg.hidden_sizes, seed=cfg.seed)
    y = manifest.labels
    model, report = train_stage1(X[tr], y[tr], X[va], y[va], net, cfg)
    meta = _metadata(cfg, pre, manifest, {"split_seed": cfg.seed, "val_fraction": cfg.val_fraction})
    save_checkpoint(args.out, model, meta)
    dataio.atomic_write_text(_report_path(args.out), report.to_csv())
    logger.info("stage 1: best epoch %d of %d (%s)", report.best_epoch, len(report.epochs),
                report.stopping_reason)


def cmd_train_stage2(args):
    init, header = load_checkpoint(args.init)
    meta = header["metadata"]
    overrides = {"seed": args.seed, "beta": args.beta, "gamma": args.gamma, "lambda": args.lam}
    cfg, _ = _train_config(2, args.config, overrides)
    pre = PreprocessConfig(**meta["preprocess"]) if meta.get("preprocess") else PreprocessConfig()
    labels = args.labels if args.labels else meta["label_names"]
    manifest = load_manifest(args.manifest, labels)
    if manifest.label_names != meta["label_names"]:
        raise DataError("manifest label space differs from the stage-1 checkpoint")
    if manifest.kind != meta["input_kind"]:
        raise DataError(f"stage-1 model was trained on {meta['input_kind']} inputs")
    views = N_TRAIN_VIEWS if cfg.augment and manifest.kind == "image" else 1
    X = _load_inputs(manifest, pre, views)
    tr, va = _split(manifest, meta["val_fraction"], meta["split_seed"])
    y = manifest.labels
    model, report = train_stage2(X[tr], y[tr], X[va], y[va], init, cfg,
                                 allow_untrained=args.allow_untrained)
    extra = {
        "split_seed": meta["split_seed"],
        "val_fraction": meta["val_fraction"],
        "stage1_sha256": dataio.file_sha256(args.init),
    }
    out_meta = _metadata(cfg, pre, manifest, extra)
    out_meta["preprocess"] = meta.get("preprocess")
    save_checkpoint(args.out, model, out_meta)
    dataio.atomic_write_text(_report_path(args.out), report.to_csv())
    logger.info("stage 2: best epoch %d of %d (%s)", report.best_epoch, len(report.epochs),
                report.stopping_reason)


def cmd_infer(args):
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise UsageError("--models needs at least one checkpoint")
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _ in loaded]
    metas = [h["metadata"] for _, h in loaded]
    first = metas[0]
    for m in metas[1:]:
        if m["label_names"] != first["label_names"] or m["input_kind"] != first["input_kind"]:
            raise DataError("ensemble members disagree on label space or input kind")
        if m.get("preprocess") != first.get("preprocess"):
            raise DataError("ensemble members disagree on preprocessing")
    if not 1 <= args.k <= MAX_VIEWS:
        raise UsageError(f"--k must lie in [1, {MAX_VIEWS}]")
    names = first["label_names"]
    manifest = load_manifest(args.manifest, args.labels or names)
    k = args.k
    if manifest.kind == "features" and k > 1:
        logger.warning("views need image inputs; using K=1 for a features manifest")
        k = 1
    pre = PreprocessConfig(**first["preprocess"]) if first.get("preprocess") else PreprocessConfig()
    X = _load_inputs(manifest, pre, views=k)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.shape[-1] != models[0].input_dim:
        raise DataError("inputs do not match the models' input dimension")
    # one forward pass per model over all rows and views, then exact per-row averaging
    flat = X.reshape(-1, X.shape[-1])
    probs = np.stack([m.predict_proba(flat).reshape(X.shape[0], X.shape[1], -1) for m in models], axis=1)
    rows = []
    for i, p in enumerate(manifest.paths):
        p_ens = average_probabilities(probs[i].reshape(-1, probs.shape[-1]))
        rows.append([p, names[int(np.argmax(p_ens))]] + [f"{v:.6f}" for v in p_ens])
    buf = ["path,predicted_label," + ",".join(f"p_{c}" for c in range(len(names)))]
    buf += [",".join(r) for r in rows]
    dataio.atomic_write_text(args.out, "\n".join(buf) + "\n")


def read_predictions(path, label_names):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"predictions not found: {path}")
    index = {n: i for i, n in enumerate(label_names)}
    out = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["path", "predicted_label"]:
            raise ParseError("predictions header must start with 'path,predicted_label'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[1] not in index:
                raise ParseError(f"unknown predicted label {row[1]!r}", line=lineno)
            out[row[0]] = index[row[1]]
    return out


def cmd_evaluate(args):
    names = dataio.load_label_space(args.labels)
    truth = load_manifest(args.truth, names, check_files=False)
    preds = read_predictions(args.predictions, names)
    missing = [p for p in truth.paths if p not in preds]
    if missing:
        raise DataError(f"{len(missing)} truth rows lack predictions, e.g. {missing[0]!r}")
    y_pred = [preds[p] for p in truth.paths]
    cm = confusion(y_pred, truth.labels, len(names))
    report = compute_metrics(cm)
    d = report.to_dict(decimals=4)
    result = {
        "n_samples": int(cm.sum()),
        "labels": names,
        "macro_f1": d["macro_f1"],
        "balanced_accuracy": d["balanced_accuracy"],
        "macro_precision": d["macro_precision"],
        "macro_specificity": d["macro_specificity"],
        "per_class": {
            n: {
                "precision": d["precision"][j],
                "recall": d["recall"][j],
                "specificity": d["specificity"][j],
                "f1": d["f1"][j],
                "support": int(cm[j].sum()),
            }
            for j, n in enumerate(names)
        },
        "confusion_matrix": cm.tolist(),
    }
    dataio.atomic_write_text(args.out, json.dumps(result, indent=2) + "\n")


# --- parser -------------------------------------------------------------


def build_parser():
    p = _Parser(prog="stainbalance", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("normalize", help="Macenko-normalize an image or a directory")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--od-threshold", type=float, default=0.15)
    s.add_argument("--reference")
    s.add_argument("--strict", action="store_true", help="fail instead of passing images through")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("fit-reference", help="average a stain template over a directory")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--od-threshold", type=float, default=0.15)
    s.set_defaults(func=cmd_fit_reference)

    s = sub.add_parser("synth", help="generate synthetic data")
    ss = s.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    t = ss.add_parser("stains", help="Beer-Lambert cell images with a manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--size", type=int, default=64)
    t.set_defaults(func=cmd_synth_stains)
    t = ss.add_parser("blobs", help="long-tailed Gaussian blobs as features manifests")
    t.add_argument("--out", required=True)
    t.add_argument("--counts", default="2000,600,180,54,16")
    t.add_argument("--test-counts")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--separation", type=float, default=9.0)
    t.add_argument("--spread", type=float, default=1.0)
    t.add_argument("--n-features", type=int)
    t.set_defaults(func=cmd_synth_blobs)

    s = sub.add_parser("train-stage1", help="end-to-end training, instance-balanced")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--labels")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_stage1)

    s = sub.add_parser("train-stage2", help="classifier re-training, class-balanced")
    s.add_argument("--manifest", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--labels")
    s.add_argument("--seed", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--allow-untrained", action="store_true")
    s.set_defaults(func=cmd_train_stage2)

    s = sub.add_parser("infer", help="TTA ensemble predictions")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", required=True, help="comma-separated checkpoints")
    s.add_argument("--k", type=int, default=MAX_VIEWS)
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="metrics from predictions and truth")
    s.add_argument("--predictions", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code or EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
