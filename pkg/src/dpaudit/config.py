"""Experiment configuration: flat ``section.key = value`` text files.

The format is deliberately dependency-free and diff-friendly: UTF-8 lines,
``#`` comments, dotted keys. Unknown keys are a hard error that lists the
valid ones. Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .datagen import DatasetSpec
from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(s: str) -> bool:
    if s.lower() in _TRUE:
        return True
    if s.lower() in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_opt_float(s: str):
    return None if s.lower() in ("auto", "none") else float(s)


def _parse_formats(s: str) -> tuple[str, ...]:
    items = tuple(v.strip() for v in s.split(",") if v.strip())
    valid = {"json", "csv", "svg", "all"}
    for item in items:
        if item not in valid:
            raise ConfigError(f"unknown format {item!r}; valid: {sorted(valid)}")
    return ("json", "csv", "svg") if "all" in items else items


#: key -> (parser, default). The single source of truth for valid keys.
SCHEMA: dict = {
    "dataset.kind": (str, "binary_imbalanced"),
    "dataset.n_samples": (int, 2500),
    "dataset.image_size": (int, 16),
    "dataset.ratio": (_parse_floats, (0.8, 0.2)),
    "dataset.exponent": (float, 1.5),
    "dataset.n_classes": (int, 2),
    "dataset.test_fraction": (float, 0.2),
    "dataset.seed": (int, 0),
    "model.kind": (str, "conv"),  # dense | conv | conv_scale_norm | unet_lite
    "model.hidden": (int, 32),
    "model.widths": (lambda s: tuple(int(v) for v in s.split(",")), (6, 12)),
    "model.channels": (int, 8),
    "train.optimizer": (str, "nadam"),
    "train.learning_rate": (float, 2e-3),
    "train.batch_size": (int, 64),
    "train.epochs": (int, 10),
    "train.patience": (int, 5),
    "train.min_improvement": (float, 1e-3),
    "train.clip_norm": (_parse_opt_float, None),  # None = tune per run
    "train.h_flip": (float, 0.0),
    "train.v_flip": (float, 0.0),
    "train.multiplicity": (int, 1),
    "train.weighted_loss": (_parse_bool, True),  # segmentation only
    "privacy.delta": (float, 8e-7),
    "privacy.epsilons": (_parse_floats, (1.0, 8.0, 32.0, 1e9)),
    "privacy.kappa": (_parse_opt_float, None),  # None = 1 / n_train
    "privacy.include_nonprivate": (_parse_bool, True),
    "attack.n_samples": (int, 64),
    "attack.batch_size": (int, 1),
    "attack.bins": (int, 10),
    "seeds": (int, 5),
    "parallel": (int, 1),
    "out": (str, "out"),
    "report.formats": (_parse_formats, ("json", "csv", "svg")),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        resolved = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(SCHEMA))}")
            resolved[key] = value
        object.__setattr__(self, "values", resolved)
        eps = resolved["privacy.epsilons"]
        if any(e <= 0 for e in eps) or list(eps) != sorted(eps):
            raise ConfigError("privacy.epsilons must be positive and ascending")
        if resolved["seeds"] < 1:
            raise ConfigError("seeds must be >= 1")

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        merged = dict(self.values)
        for key, value in overrides.items():
            if value is not None:
                merged[key] = value
        return ExperimentConfig(merged)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self["dataset.kind"],
            n_samples=self["dataset.n_samples"],
            image_size=self["dataset.image_size"],
            ratio=tuple(self["dataset.ratio"]),
            exponent=self["dataset.exponent"],
            n_classes=self["dataset.n_classes"],
            test_fraction=self["dataset.test_fraction"],
            seed=self["dataset.seed"],
        )

    def echo(self) -> dict:
        """JSON-serializable snapshot of every resolved key."""
        out = {}
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = list(value)
            out[key] = value
        return out


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(
                f"line {lineno}: unknown config key {key!r}; "
                f"valid keys: {', '.join(sorted(SCHEMA))}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def default_config() -> ExperimentConfig:
    return ExperimentConfig({})
