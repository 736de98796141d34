"""Configuration dataclasses and the ``[section]`` / ``key = value`` parser.

The dataclass defaults below are the single source of truth; the CLI help
text and :func:`config_reference` are generated from them.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError, ParseError

PROSODY_DIM = 4
PARAM_GROUPS = ("encoder", "speaker_embed", "style_embed", "projections",
                "bottleneck", "agg_cnn", "decoder")


@dataclass
class ModelConfig:
    n_phones: int = 16
    n_speakers: int = 2
    n_styles: int = 4
    d_model: int = 64
    d_spk_sty_embed: int = 16
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 128
    d_prosody: int = PROSODY_DIM
    bottleneck_cnn_channels: int = 32
    se_reduction: int = 4
    agg_cnn_channels: int = 64
    n_mels: int = 20
    postnet_channels: int = 32
    max_phones: int = 64
    max_decoder_frames: int = 200
    prosody_feed: str = "predicted"
    prenet_dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_prosody != PROSODY_DIM:
            raise ConfigurationError(
                f"d_prosody is fixed at {PROSODY_DIM} (lf0, vuv, duration, energy), got {self.d_prosody}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "int" and value < 1:
                raise ConfigurationError(f"model.{f.name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.bottleneck_cnn_channels % self.se_reduction:
            raise ConfigurationError(
                f"bottleneck_cnn_channels {self.bottleneck_cnn_channels} not divisible by "
                f"se_reduction {self.se_reduction}")
        if self.prosody_feed not in ("predicted", "ground_truth"):
            raise ConfigurationError(f"prosody_feed must be predicted or ground_truth, got {self.prosody_feed!r}")
        if not 0.0 <= self.prenet_dropout < 1.0:
            raise ConfigurationError(f"prenet_dropout must be in [0, 1), got {self.prenet_dropout}")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 0.3
    warmup_steps: int = 200
    max_steps: int = 6000
    batch_size: int = 8
    seed: int = 0
    frozen_groups: tuple[str, ...] = ()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0

    def __post_init__(self):
        if isinstance(self.frozen_groups, str):
            self.frozen_groups = tuple(g for g in self.frozen_groups.replace(",", " ").split() if g)
        self.frozen_groups = tuple(self.frozen_groups)
        self.validate()

    def validate(self) -> None:
        unknown = set(self.frozen_groups) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups {sorted(unknown)}; known: {list(PARAM_GROUPS)}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_steps < 1:
            raise ConfigurationError("batch_size and warmup_steps must be >= 1, max_steps >= 0")


@dataclass
class SyntheticSpec:
    n_speakers: int = 2
    n_styles: int = 4
    n_phones: int = 16
    utts_per_cell: int = 40
    test_utts: int = 50
    min_phones: int = 4
    max_phones: int = 12
    seed: int = 1234
    n_mels: int = 20
    # "speaker:style,style ..." cells that get training data; B is neutral-only by default
    cells: str = "0:0,1,2,3 1:0"
    with_audio: bool = False
    sample_rate: int = 16000
    hop: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_phones < 2 or self.utts_per_cell < 1 or self.n_speakers < 1 or self.n_styles < 1:
            raise ConfigurationError("degenerate synthetic spec: need >= 2 phones and >= 1 utterance per cell")
        if not 1 <= self.min_phones <= self.max_phones:
            raise ConfigurationError("phones-per-utterance range is empty")
        if self.n_mels < 8:
            raise ConfigurationError("synthetic rendering needs n_mels >= 8")
        for spk, styles in self.cell_list():
            if spk >= self.n_speakers or any(s >= self.n_styles for s in styles):
                raise ConfigurationError(f"cell {spk}:{styles} outside {self.n_speakers} speakers x {self.n_styles} styles")

    def cell_list(self) -> list[tuple[int, tuple[int, ...]]]:
        out = []
        try:
            for item in self.cells.split():
                spk, styles = item.split(":")
                out.append((int(spk), tuple(int(s) for s in styles.split(","))))
        except ValueError:
            raise ConfigurationError(f"cannot parse cells {self.cells!r}") from None
        if not out:
            raise ConfigurationError("no corpus cells")
        return out


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: SyntheticSpec = field(default_factory=SyntheticSpec)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "corpus": SyntheticSpec}


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _convert(raw: str, typ, key: str, line: int):
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return lowered in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip('"')
        if typing.get_origin(typ) is tuple:
            return tuple(x for x in raw.replace(",", " ").split() if x)
    except ValueError:
        pass
    name = getattr(typ, "__name__", str(typ))
    raise ParseError(f"{key}: cannot parse {raw!r} as {name}", line)


def parse_config_text(text: str) -> Config:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ParseError("key outside of any [section]", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        types = _field_types(SECTIONS[section])
        if key not in types:
            raise ParseError(f"unknown key {key!r} in section [{section}]", lineno)
        values[section][key] = _convert(raw, types[key], key, lineno)
    try:
        return Config(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except ConfigurationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from None


def parse_config(path: str | Path) -> Config:
    return parse_config_text(Path(path).read_text())


def format_value(value) -> str:
    """A field value in config-file syntax."""
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_section(obj) -> str:
    return "\n".join(f"{f.name} = {format_value(getattr(obj, f.name))}" for f in fields(obj))


def format_config(config: Config) -> str:
    return "\n\n".join(f"[{name}]\n{format_section(getattr(config, name))}" for name in SECTIONS) + "\n"


def config_reference() -> str:
    """Every key with its default, in config-file syntax."""
    return format_config(Config())


def section_from_text(cls, text: str):
    """Inverse of :func:`format_section` for a single section body."""
    parsed = parse_config_text(f"[{_section_name(cls)}]\n{text}")
    return getattr(parsed, _section_name(cls))


def _section_name(cls) -> str:
    return next(name for name, c in SECTIONS.items() if c is cls)


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)


def tiny_model_config(**overrides) -> ModelConfig:
    """A very small network for gradient checks and overfit runs."""
    base = dict(d_model=16, d_spk_sty_embed=4, n_enc_blocks=1, n_dec_blocks=1, n_heads=2, d_ff=32,
                bottleneck_cnn_channels=8, se_reduction=4, agg_cnn_channels=16, n_mels=8,
                postnet_channels=8, max_decoder_frames=60)
    base.update(overrides)
    return ModelConfig(**base)
