"""INI-style run configuration files.

Example::

    [forest]
    trees = 100
    depth = 10

    [train]
    optimizer = adam
    lr = 0.001

Unknown sections or keys are errors that carry the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .audio import AugmentPolicy
from .errors import ConfigError
from .trainer import TrainConfig


def _hidden(text):
    return tuple(int(h) for h in text.split(",") if h.strip())


# section -> key -> (TrainConfig field, parser)
SCHEMA = {
    "forest": {
        "trees": ("tree_count", int),
        "depth": ("tree_depth", int),
        "assignment": ("assignment", str),
        "embedding": ("embedding_width", int),
    },
    "train": {
        "optimizer": ("optimizer", str),
        "lr": ("lr", float),
        "batch": ("batch_size", int),
        "epochs": ("epochs", int),
        "seed": ("seed", int),
        "loss_mode": ("loss_mode", str),
        "pi_iterations": ("pi_iterations", int),
        "pi_tolerance": ("pi_tolerance", float),
        "extractor": ("extractor", str),
        "hidden": ("hidden", _hidden),
        "folds": ("folds", int),
        "patience": ("patience", int),
    },
    "features": {
        "sample_rate": ("sample_rate", int),
        "frame": ("frame", int),
        "hop": ("hop", int),
        "mel_bands": ("mel_bands", int),
        "augment": ("augment", AugmentPolicy.parse),
    },
    "data": {
        "train": ("train", str),
        "eval": ("eval", str),
    },
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    train_manifest: Path | None = None
    eval_manifest: Path | None = None


def parse_config(text: str, base_dir=".") -> RunConfig:
    values = {}
    data = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        name, parse = SCHEMA[section][key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from exc
        if section == "data":
            data[name] = Path(base_dir) / parsed
        else:
            values[name] = (parsed, lineno)
    try:
        cfg = TrainConfig(**{k: v for k, (v, _) in values.items()})
    except ConfigError as exc:
        bad = [ln for k, (_, ln) in values.items() if k in str(exc)]
        raise ConfigError(str(exc), bad[0] if bad else None) from exc
    return RunConfig(cfg, data.get("train"), data.get("eval"))


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def echo(config: TrainConfig) -> str:
    """Human-readable summary of the headline hyperparameters."""
    return (
        f"trees={config.tree_count} depth={config.tree_depth} batch={config.batch_size} "
        f"epochs={config.epochs} optimizer={config.optimizer} lr={config.lr} folds={config.folds} "
        f"loss_mode={config.loss_mode} extractor={config.extractor} seed={config.seed}"
    )


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
