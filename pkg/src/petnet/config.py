"""Run configuration in a line-oriented ``section.key = value`` grammar.

Blank lines and lines starting with ``#`` are ignored. Every other line must
be ``section.key = value``; values are plain text (booleans ``true``/``false``).
Unknown sections or keys are errors, and each key may appear once.
"""
from dataclasses import dataclass, field, fields

from .errors import ConfigError


def parse_lines(text):
    """``{(section, key): (value, line_number)}`` in file order."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        lhs, sep, value = line.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot or not section or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        name = (section, key.strip())
        if name in entries:
            raise ConfigError(f"line {lineno}: duplicate key {section}.{key.strip()}")
        entries[name] = (value.strip(), lineno)
    return entries


@dataclass
class DatasetSection:
    count: int = 64
    height: int = 64
    width: int = 64
    seed: int = 0
    lesion_probability: float = 0.5
    noise_level: float = 0.1
    contrast: float = 4.0
    grades: int = 2
    balanced: bool = False
    task: str = "segmentation"
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    pgm_scale: float = 32.0


@dataclass
class ModelSection:
    architecture: str = "unet"
    filters: int = 8
    fc_width: int = 32
    base_channels: int = 8
    depth: int = 3
    head: str = "sigmoid"
    classes: int = 4
    use_bn: bool = True
    allow_bn_synthesis: bool = False
    upsample: str = "transpose"
    seed: int = 0


@dataclass
class TrainingSection:
    learning_rate: float = 0.01
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    loss_kind: str = "auto"
    shuffle: bool = True
    folds: int = 5


@dataclass
class PathsSection:
    out_dir: str = "run"
    model: str = "model.pnm"
    manifest: str = ""


CHOICES = {
    ("dataset", "task"): ("segmentation", "classification", "synthesis", "regression"),
    ("model", "architecture"): ("toy_cnn", "unet"),
    ("model", "head"): ("sigmoid", "softmax", "linear"),
    ("model", "upsample"): ("transpose", "nearest"),
    ("training", "loss_kind"): ("auto", "mse", "cross_entropy", "binary_cross_entropy"),
}

# (lower bound, strict) per numeric field
BOUNDS = {
    ("dataset", "count"): (1, False),
    ("dataset", "height"): (16, False),
    ("dataset", "width"): (16, False),
    ("dataset", "noise_level"): (0.0, False),
    ("dataset", "contrast"): (2.0, False),
    ("dataset", "grades"): (2, False),
    ("dataset", "pgm_scale"): (0.0, True),
    ("model", "filters"): (1, False),
    ("model", "fc_width"): (1, False),
    ("model", "base_channels"): (1, False),
    ("model", "depth"): (1, False),
    ("model", "classes"): (2, False),
    ("training", "learning_rate"): (0.0, True),
    ("training", "batch_size"): (1, False),
    ("training", "max_epochs"): (1, False),
    ("training", "patience"): (0, False),
    ("training", "folds"): (2, False),
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for name, section in self.sections().items():
            for f in fields(section):
                value = getattr(section, f.name)
                text = str(value).lower() if isinstance(value, bool) else str(value)
                lines.append(f"{name}.{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def set(self, section, key, value):
        setattr(getattr(self, section), key, value)
        validate(self)


def _convert(kind, text, name):
    try:
        if kind in (bool, "bool"):
            if text not in ("true", "false"):
                raise ValueError
            return text == "true"
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def validate(config: RunConfig):
    for (section, key), options in CHOICES.items():
        value = getattr(getattr(config, section), key)
        if value not in options:
            raise ConfigError(f"{section}.{key}: {value!r} is not one of {', '.join(options)}")
    for (section, key), (low, strict) in BOUNDS.items():
        value = getattr(getattr(config, section), key)
        if value < low or (strict and value == low):
            raise ConfigError(f"{section}.{key}: must be {'>' if strict else '>='} {low}, got {value}")
    d = config.dataset
    if not 0.0 <= d.lesion_probability <= 1.0:
        raise ConfigError(f"dataset.lesion_probability: must lie in [0, 1], got {d.lesion_probability}")
    fractions = (d.train_fraction, d.val_fraction, d.test_fraction)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"dataset fractions must be >= 0 and sum to 1, got {fractions}")
    return config


def parse_config(text: str) -> RunConfig:
    """Parse and validate; every key not given keeps its documented default."""
    config = RunConfig()
    sections = config.sections()
    for (section, key), (value, lineno) in parse_lines(text).items():
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        types = {f.name: f.type for f in fields(sections[section])}
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {section}.{key}")
        setattr(sections[section], key, _convert(types[key], value, f"{section}.{key}"))
    return validate(config)
