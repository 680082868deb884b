"""Command-line entry point: ``dndf <verb> ...``.

Exit codes: 0 ok, 2 config, 3 data, 4 vocabulary mismatch, 5 input shape.
Results go to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import audio, model_io, plotting
from .config import echo, load_config, with_overrides
from .errors import ConfigError, DataError, LoadError, ShapeError, VocabularyError
from .trainer import (
    VOCABULARY_FILE,
    Dataset,
    evaluate,
    fold_assignment,
    load_manifest,
    read_vocabulary,
    train,
    tree_sweep,
    write_manifest,
    write_vocabulary,
)

log = logging.getLogger("dndf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VOCAB, EXIT_SHAPE = 0, 2, 3, 4, 5
CACHE_FILE = ".prepare-cache.json"


def _threads():
    try:
        return max(1, int(os.environ.get("DNDF_THREADS", "1")))
    except ValueError:
        return 1


def _collect_inputs(inputs):
    found = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            found += sorted(f for f in p.rglob("*") if f.is_file() and f.suffix.lower() == ".wav")
        elif p.suffix.lower() == ".wav":
            found.append(p)
        elif p.is_file():
            for line in p.read_text().splitlines():
                if line.strip():
                    q = Path(line.strip())
                    found.append(q if q.is_absolute() else p.parent / q)
        else:
            raise DataError(f"input {item} does not exist")
    return [f.resolve() for f in found]


def _read_label_csv(path):
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "path":
                continue
            if len(row) < 2:
                raise DataError(f"{path}: rows must be path,label")
            p = Path(row[0])
            out[(p if p.is_absolute() else path.parent / p).resolve()] = row[1].strip()
    return out


def _feature_name(src: Path):
    digest = hashlib.sha1(str(src).encode()).hexdigest()[:10]
    return f"{src.stem}-{digest}.feat"


def cmd_prepare_features(args):
    cfg = with_overrides(load_config(args.config).train, seed=args.seed)
    out = Path(args.out)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    clips = _collect_inputs(args.inputs)
    labels = _read_label_csv(args.labels) if args.labels else {}
    items = []
    for src in clips:
        label = labels.get(src) if args.labels else src.parent.name
        if label is None:
            raise DataError(f"no label for {src} in {args.labels}")
        items.append((src, label))

    if args.vocab:
        vocabulary = read_vocabulary(args.vocab)
        unknown = sorted({lab for _, lab in items} - set(vocabulary))
        if unknown:
            raise VocabularyError(f"labels {unknown} are not in {args.vocab}")
    else:
        vocabulary = sorted({lab for _, lab in items})

    cache_path = out / CACHE_FILE
    cache = json.loads(cache_path.read_text()) if cache_path.exists() else {}
    fe = cfg.frontend
    fe_key = f"{fe.sample_rate}/{fe.frame}/{fe.hop}/{fe.mel_bands}"

    def work(item):
        src, label = item
        dest = feat_dir / _feature_name(src)
        st = src.stat()
        key = [st.st_size, st.st_mtime_ns, fe_key]
        if cache.get(str(src)) == key and dest.exists():
            return src, dest, label, key, None
        try:
            clip = audio.load_and_resample(src, fe.sample_rate)
            audio.save_feature(dest, audio.stft_logmel(clip, fe))
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the clip
            return src, None, label, None, exc
        return src, dest, label, key, None

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, items))

    rows, skipped, new_cache = [], 0, {}
    for src, dest, label, key, exc in results:
        if exc is not None:
            skipped += 1
            log.warning("skipping %s: %s", src, exc)
            continue
        new_cache[str(src)] = key
        rows.append((dest, vocabulary.index(label)))
    cache_path.write_text(json.dumps(new_cache, sort_keys=True, indent=0))
    write_vocabulary(out / VOCABULARY_FILE, vocabulary)
    write_manifest(out / "manifest.csv", rows)
    if args.test_fraction:
        split = _holdout(rows, args.test_fraction, cfg.seed)
        write_manifest(out / "train.csv", [r for r, t in zip(rows, split) if not t])
        write_manifest(out / "test.csv", [r for r, t in zip(rows, split) if t])
    print(f"{len(rows)} clips, {len(vocabulary)} labels -> {out / 'manifest.csv'}")
    if skipped:
        log.warning("%d clip(s) skipped", skipped)
        if args.strict:
            return EXIT_DATA
    return EXIT_OK


def _holdout(rows, fraction, seed):
    """Stratified test mask with roughly ``fraction`` of every class."""
    if not 0 < fraction < 1:
        raise ConfigError("--test-fraction must lie strictly between 0 and 1")
    if not rows:
        return []
    k = max(2, int(round(1 / fraction)))
    folds = fold_assignment([r[1] for r in rows], k, seed) if len(rows) >= k else np.ones(len(rows))
    return [f == 0 for f in folds]


def _prefix(path):
    path = Path(path)
    return path.with_name(path.stem)


def _write_history(prefix, history):
    with open(f"{prefix}.metrics.jsonl", "w") as fh:
        for h in history:
            fh.write(json.dumps(vars(h), sort_keys=True) + "\n")
    with open(f"{prefix}.metrics.log", "w") as fh:
        for h in history:
            acc = "-" if h.eval_accuracy is None else f"{h.eval_accuracy:.6f}"
            fh.write(
                f"epoch={h.epoch} risk_pre_pi={h.risk_pre_pi:.10g} risk_post_pi={h.risk_post_pi:.10g} "
                f"risk_post_sgd={h.risk_post_sgd:.10g} eval_accuracy={acc}\n"
            )
    plotting.training_curves(history, f"{prefix}.risk.png")


def _run_config(args):
    run = load_config(args.config)
    cfg = with_overrides(run.train, seed=args.seed, epochs=getattr(args, "epochs", None))
    train_path = args.train or run.train_manifest
    eval_path = args.eval or run.eval_manifest
    if train_path is None:
        raise ConfigError("no training manifest (use --train or [data] train)")
    return cfg, train_path, eval_path


def _load_sets(train_path, eval_path):
    train_set = load_manifest(train_path)
    eval_set = None
    if eval_path:
        eval_set = load_manifest(eval_path)
        if eval_set.vocabulary != train_set.vocabulary:
            raise VocabularyError("training and evaluation vocabularies differ")
    return train_set, eval_set


def cmd_train(args):
    cfg, train_path, eval_path = _run_config(args)
    log.info("config: %s", echo(cfg))
    train_set, eval_set = _load_sets(train_path, eval_path)
    result = train(cfg, train_set, eval_set)
    model_io.save(result.model, cfg, args.out)
    _write_history(_prefix(args.out), result.history)
    if result.history and result.history[-1].eval_accuracy is not None:
        print(f"eval accuracy: {100 * result.history[-1].eval_accuracy:.2f}")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_show_config(args):
    cfg = with_overrides(load_config(args.config).train, seed=args.seed)
    print(echo(cfg))
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


def _check_vocab(model, dataset):
    if dataset.vocabulary != model.vocabulary:
        raise VocabularyError(
            f"manifest vocabulary {dataset.vocabulary} does not match model vocabulary {model.vocabulary}"
        )


def cmd_eval(args):
    model, _ = model_io.load(args.archive)
    dataset = load_manifest(args.manifest)
    _check_vocab(model, dataset)
    if dataset.features.shape[1:] != model.input_shape:
        raise ShapeError(f"manifest features {dataset.features.shape[1:]} != model input {model.input_shape}")
    result = evaluate(model, dataset)
    print(f"{100 * result.accuracy:.2f}")
    out = Path(args.out) if args.out else _prefix(args.archive).with_name(_prefix(args.archive).name + ".confusion.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted"] + model.vocabulary)
        for name, row in zip(model.vocabulary, result.confusion):
            w.writerow([name] + [int(v) for v in row])
    plotting.confusion(result.confusion, model.vocabulary, out.with_suffix(".png"))
    return EXIT_OK


def features_for(path, model, config):
    """Model-ready input from a feature file or a raw audio file."""
    path = Path(path)
    with open(path, "rb") as fh:
        is_feature = fh.read(4) == audio.FEATURE_MAGIC
    if is_feature:
        values = audio.load_feature(path).values
    else:
        fe = config.frontend
        clip = audio.load_and_resample(path, fe.sample_rate)
        values = audio.quantize(audio.stft_logmel(clip, fe).values)
    if len(model.input_shape) == 1 and values.shape[0] == 1:
        values = values[0]
    if values.shape != model.input_shape:
        raise ShapeError(f"input of shape {values.shape} does not fit model input {model.input_shape}")
    return values


def cmd_predict(args):
    model, config = model_io.load(args.archive)
    x = features_for(args.input, model, config)
    proba = model.predict_proba(x[None])[0]
    top = int(np.argmax(proba))
    print(f"{model.vocabulary[top]}\t{proba[top]:.17g}")
    for name, p in zip(model.vocabulary, proba):
        print(f"  {name}\t{p:.17g}")
    return EXIT_OK


def cmd_sweep_trees(args):
    cfg, train_path, eval_path = _run_config(args)
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError as exc:
        raise ConfigError(f"--counts must be comma-separated integers: {exc}") from exc
    if not counts or min(counts) < 1:
        raise ConfigError("--counts needs at least one positive tree count")
    train_set, eval_set = _load_sets(train_path, eval_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def keep(n, model):
        model_io.save(model, with_overrides(cfg, tree_count=n), out / f"trees-{n}.dndm")

    rows = tree_sweep(cfg, train_set, counts, eval_set, on_model=keep)
    if eval_set is None:
        for n in counts:
            keep(n, train(with_overrides(cfg, tree_count=n), train_set).model)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tree_count", "accuracy"])
        for n, acc in rows:
            w.writerow([n, f"{100 * acc:.2f}"])
    plotting.tree_sweep(rows, out / "sweep.png")
    for n, acc in rows:
        print(f"{n}\t{100 * acc:.2f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dndf", description="Deep neural decision forest toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("prepare-features", help="convert audio clips to log-mel feature files")
    sp.add_argument("inputs", nargs="*", help="audio directories, .wav files or text lists of paths")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--labels", help="CSV of path,label (default: parent directory name)")
    sp.add_argument("--vocab", help="existing vocabulary file to index labels against")
    sp.add_argument("--test-fraction", type=float, help="also write stratified train.csv/test.csv")
    sp.add_argument("--strict", action="store_true", help="exit nonzero if any clip is skipped")
    common(sp)
    sp.set_defaults(func=cmd_prepare_features)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--train", help="training manifest")
    sp.add_argument("--eval", help="evaluation manifest")
    sp.add_argument("--out", required=True, help="model archive path")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy and confusion matrix of a model on a manifest")
    sp.add_argument("archive")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="confusion matrix CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="classify one feature or audio file")
    sp.add_argument("archive")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("sweep-trees", help="accuracy as a function of the number of trees")
    common(sp)
    sp.add_argument("--train", help="training manifest")
    sp.add_argument("--eval", help="evaluation manifest (default: k-fold on --train)")
    sp.add_argument("--counts", default="5,10,20,50,80,100")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.set_defaults(func=cmd_sweep_trees)

    sp = sub.add_parser("show-config", help="print the effective configuration")
    common(sp)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VocabularyError as exc:
        print(f"vocabulary error: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (DataError, LoadError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
