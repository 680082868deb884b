"""Alternating training of the leaf tables and the extractor parameters.

Each epoch first refits every leaf table at fixed extractor parameters with
the multiplicative update, using one full pass over the training set, then
runs mini-batch gradient descent on the extractor with the leaves frozen.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audio
from .audio import AugmentPolicy
from .errors import ConfigError, DataError, InvalidInputError, VocabularyError
from .extractor import PRESETS, assign_nodes, build_extractor, make_optimizer, optimizer_step
from .forest import LOSS_MODES, Forest, TreeTopology, update_leaf_distributions
from .model import PREDICT_CHUNK, DNDFModel

log = logging.getLogger(__name__)

VOCABULARY_FILE = "vocabulary.txt"


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run.  Defaults reproduce the full-scale recipe."""

    tree_count: int = 100
    tree_depth: int = 10
    batch_size: int = 150
    epochs: int = 500
    optimizer: str = "adam"
    lr: float = 0.001
    pi_iterations: int = 20
    pi_tolerance: float = 1e-6
    loss_mode: str = "per-tree"
    extractor: str = "cnn4"
    assignment: str = "auto"
    embedding_width: int = 512
    hidden: tuple = (64,)
    augment: AugmentPolicy = AugmentPolicy()
    folds: int = 5
    patience: int = 0
    seed: int = 0
    sample_rate: int = 48000
    frame: int = 1024
    hop: int = 320
    mel_bands: int = 64

    def __post_init__(self):
        for name in ("tree_count", "tree_depth", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "pi_iterations", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.extractor not in PRESETS:
            raise ConfigError(f"unknown extractor preset {self.extractor!r}")
        if self.assignment not in ("auto", "exclusive", "random"):
            raise ConfigError(f"unknown node assignment policy {self.assignment!r}")

    @property
    def topology(self):
        return TreeTopology(self.tree_depth)

    @property
    def assignment_policy(self):
        if self.assignment != "auto":
            return self.assignment
        return "random" if self.extractor == "cnn4" else "exclusive"

    @property
    def width(self):
        if self.assignment_policy == "exclusive":
            return self.tree_count * self.topology.node_count
        return self.embedding_width

    @property
    def frontend(self):
        return audio.FrontendConfig(self.sample_rate, self.frame, self.hop, self.mel_bands)

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_text()
        d["hidden"] = ",".join(str(h) for h in self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augment" in d and not isinstance(d["augment"], AugmentPolicy):
            d["augment"] = AugmentPolicy.parse(d["augment"])
        if "hidden" in d and isinstance(d["hidden"], str):
            d["hidden"] = tuple(int(h) for h in d["hidden"].split(",") if h)
        return cls(**d)

    def to_text(self):
        """Canonical ``key=value`` lines sorted by key."""
        return "".join(f"{k}={v}\n" for k, v in sorted(self.to_dict().items()))

    @classmethod
    def from_text(cls, text):
        fields_ = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        out = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            if key not in fields_:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cls, key, None)
            if isinstance(default, bool):
                out[key] = value == "True"
            elif isinstance(default, int):
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            else:
                out[key] = value
        return cls.from_dict(out)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    vocabulary: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.vocabulary)):
            raise DataError(f"labels must lie in 0..{len(self.vocabulary) - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.vocabulary)


def read_vocabulary(path):
    return [line for line in Path(path).read_text().splitlines() if line]


def write_vocabulary(path, vocabulary):
    Path(path).write_text("".join(f"{v}\n" for v in vocabulary))


def read_manifest(path):
    """Rows ``(absolute feature path, label index)`` of a manifest CSV."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if header[:2] != ["feature_path", "label_index"]:
            raise DataError(f"{path}: expected header feature_path,label_index")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append(((path.parent / row[0]).resolve(), int(row[1])))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
    return rows


def write_manifest(path, rows):
    """Write ``(feature path, label index)`` rows with paths relative to the manifest."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_path", "label_index"])
        for feat, label in rows:
            w.writerow([Path(feat).resolve().relative_to(path.parent.resolve()).as_posix(), int(label)])


def load_manifest(path, vocabulary=None) -> Dataset:
    """Load every feature file named in a manifest into one dataset.

    The vocabulary defaults to ``vocabulary.txt`` beside the manifest.
    """
    path = Path(path)
    if vocabulary is None:
        vocab_path = path.parent / VOCABULARY_FILE
        if not vocab_path.exists():
            raise DataError(f"no {VOCABULARY_FILE} next to {path}")
        vocabulary = read_vocabulary(vocab_path)
    rows = read_manifest(path)
    feats = []
    for feat_path, label in rows:
        if not 0 <= label < len(vocabulary):
            raise DataError(f"{feat_path}: label {label} outside vocabulary of {len(vocabulary)}")
        if not feat_path.exists():
            raise DataError(f"missing feature file {feat_path}")
        feats.append(audio.load_feature(feat_path).values)
    if feats and len({f.shape for f in feats}) != 1:
        raise DataError(f"{path}: feature shapes differ: {sorted({f.shape for f in feats})}")
    features = np.stack(feats) if feats else np.zeros((0, 0, 0))
    return Dataset(features, [r[1] for r in rows], list(vocabulary))


@dataclass
class EpochRecord:
    epoch: int
    risk_pre_pi: float
    risk_post_pi: float
    risk_post_sgd: float
    eval_accuracy: float | None = None
    pi_steps: int = 0


@dataclass
class TrainResult:
    model: DNDFModel
    history: list = field(default_factory=list)


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    correct: int
    total: int


class _EmbeddingPass:
    """Re-iterable stream of ``(node activations, labels)`` chunks."""

    def __init__(self, forest, embedding, labels, chunk=PREDICT_CHUNK):
        self.forest, self.embedding, self.labels, self.chunk = forest, embedding, labels, chunk

    def __iter__(self):
        for i in range(0, len(self.labels), self.chunk):
            yield self.forest.node_activations(self.embedding[i : i + self.chunk]), self.labels[i : i + self.chunk]


def _normalizer(features):
    axes = (0, 1) if features.ndim == 3 else (0,)
    mean = features.mean(axis=axes)
    std = features.std(axis=axes)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def init_model(config: TrainConfig, input_shape, vocabulary, features=None) -> DNDFModel:
    """Fresh model with seeded extractor weights and uniform leaf tables."""
    topology = config.topology
    width = config.width
    extractor = build_extractor(
        config.extractor, input_shape, width, seed=np.random.default_rng([config.seed, 0]), hidden=config.hidden
    )
    assignment = assign_nodes(
        width, config.tree_count, topology, seed=np.random.default_rng([config.seed, 1]), policy=config.assignment_policy
    )
    forest = Forest.uniform(topology, len(vocabulary), assignment, config.loss_mode)
    if features is not None and len(features):
        mean, std = _normalizer(np.asarray(features, dtype=np.float64))
    else:
        mean, std = np.zeros(input_shape[-1]), np.ones(input_shape[-1])
    return DNDFModel(extractor, forest, list(vocabulary), mean, std)


def _augment_batch(x, policy, seed, epoch, idx):
    out = np.empty_like(x)
    for j, (row, i) in enumerate(zip(x, idx)):
        out[j] = audio.spec_augment(row, policy, np.random.default_rng([seed, 3, epoch, int(i)]))
    return out


def train(config: TrainConfig, train_set: Dataset, eval_set: Dataset | None = None, on_epoch=None) -> TrainResult:
    """Run the alternating optimization for ``config.epochs`` epochs."""
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if eval_set is not None and eval_set.vocabulary != train_set.vocabulary:
        raise VocabularyError("evaluation vocabulary differs from training vocabulary")
    if eval_set is not None and len(eval_set) and eval_set.features.shape[1:] != train_set.features.shape[1:]:
        raise DataError("evaluation features differ in shape from training features")
    x, y = train_set.features, train_set.labels
    model = init_model(config, x.shape[1:], train_set.vocabulary, x)
    forest, net = model.forest, model.extractor
    optimizer = make_optimizer(config.optimizer, config.lr)
    augment = config.augment.active and x.ndim == 3
    result = TrainResult(model)

    emb = model.calibrate(x)
    best, stale = -1.0, 0
    for epoch in range(1, config.epochs + 1):
        risk_pre = forest.risk(emb, y)
        forest.pi, steps = update_leaf_distributions(
            forest.pi,
            _EmbeddingPass(forest, emb, y),
            forest.topology,
            config.pi_iterations,
            config.pi_tolerance,
            config.loss_mode,
        )
        risk_post_pi = forest.risk(emb, y)

        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(y))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x[idx]
            if augment:
                xb = _augment_batch(xb, config.augment, config.seed, epoch, idx)
            _, g = forest.loss_and_grad(model.embed(xb, train=True), y[idx])
            optimizer_step(net, net.backward(g), optimizer)

        emb = model.calibrate(x)
        record = EpochRecord(epoch, risk_pre, risk_post_pi, forest.risk(emb, y), pi_steps=steps)
        if eval_set is not None and len(eval_set):
            record.eval_accuracy = evaluate(model, eval_set).accuracy
        result.history.append(record)
        log.info(
            "epoch %d risk %.6f -> %.6f (pi) -> %.6f (sgd)%s",
            epoch,
            risk_pre,
            risk_post_pi,
            record.risk_post_sgd,
            "" if record.eval_accuracy is None else f" eval {record.eval_accuracy:.4f}",
        )
        if on_epoch is not None:
            on_epoch(record)
        if config.patience and record.eval_accuracy is not None:
            if record.eval_accuracy > best:
                best, stale = record.eval_accuracy, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return result


def evaluate(model: DNDFModel, dataset: Dataset) -> Evaluation:
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    if len(dataset.vocabulary) != model.class_count:
        raise VocabularyError(f"model has {model.class_count} classes, data has {len(dataset.vocabulary)}")
    pred = model.predict(dataset.features)
    c = model.class_count
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    correct = int(np.trace(confusion))
    return Evaluation(correct / len(dataset), confusion, correct, len(dataset))


def fold_assignment(labels, k, seed=0):
    """Stratified fold index for every sample.

    Samples are shuffled within each class and dealt round-robin to folds,
    continuing the deal across classes so fold sizes stay balanced.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InvalidInputError("k-fold needs k >= 2")
    if len(labels) < k:
        raise InvalidInputError(f"cannot split {len(labels)} samples into {k} folds")
    rng = np.random.default_rng([seed, 4])
    folds = np.empty(len(labels), dtype=np.int64)
    cursor = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < k:
            warnings.warn(f"class {c} has {len(members)} samples, fewer than {k} folds; it is not stratified")
        members = rng.permutation(members)
        folds[members] = (cursor + np.arange(len(members))) % k
        cursor += len(members)
    return folds


@dataclass
class FoldResult:
    accuracies: list
    mean: float


def k_fold(config: TrainConfig, dataset: Dataset, k: int | None = None) -> FoldResult:
    k = config.folds if k is None else k
    folds = fold_assignment(dataset.labels, k, config.seed)
    accs = []
    for i in range(k):
        test = folds == i
        model = train(config, dataset.subset(~test)).model
        accs.append(evaluate(model, dataset.subset(test)).accuracy)
    return FoldResult(accs, float(sum(accs) / len(accs)))


def tree_sweep(config: TrainConfig, train_set: Dataset, counts, eval_set: Dataset | None = None, on_model=None):
    """Accuracy for each tree count, retraining from scratch every time.

    With no evaluation set each point is the ``config.folds``-fold
    cross-validated mean accuracy.  Returns ``[(count, accuracy), ...]`` in
    the order given.
    """
    counts = list(counts)
    if not counts:
        raise InvalidInputError("tree sweep needs at least one tree count")
    rows = []
    for n in counts:
        cfg = replace(config, tree_count=int(n))
        if eval_set is None:
            acc = k_fold(cfg, train_set).mean
        else:
            model = train(cfg, train_set).model
            acc = evaluate(model, eval_set).accuracy
            if on_model is not None:
                on_model(n, model)
        rows.append((int(n), acc))
    return rows
