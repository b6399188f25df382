"""
Run configuration.

Every knob of a run lives in one of the pydantic models below. Unknown keys
are rejected and every field is validated before any computation starts.
A run config is read from a JSON or TOML file and then patched with
command-line overrides, flags winning over the file.
"""
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.errors import ConfigError, PathError
from app.core.logging import get_logger

load_dotenv()

logger = get_logger(__name__)

# Reserved caption ids shared by the grammar and the text encoder.
PAD_ID = 0
EOS_ID = 1

# Learning-rate presets for the sweep runner.
LR_PRESETS = {
    'finetune': [1e-6, 5e-6, 1e-5, 5e-5],
    'desk': [3e-4, 1e-3, 3e-3],
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class EncoderConfig(StrictModel):
    """Shape of both encoders."""
    d_token: int = Field(32, ge=1, description="Width of tangible/intangible token vectors")
    d_l: int = Field(32, ge=1, description="Width of the raw image-feature vector l")
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=0)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(128, ge=1)
    context_length: int = Field(24, ge=1)
    embed_dim: int = Field(64, ge=1)
    vocab_size: int = Field(32, ge=3)
    text_context_length: int = Field(32, ge=2)
    text_layers: int = Field(2, ge=0)
    text_heads: int = Field(4, ge=1)
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode='after')
    def _heads_divide_width(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_model % self.text_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by text_heads ({self.text_heads})")
        return self


class TrainConfig(StrictModel):
    batch_size: int = Field(64, ge=2)
    epochs: int = Field(50, ge=0)
    lr: float = Field(1e-3, gt=0)
    warmup_epochs: int = Field(5, ge=0)
    # Assumed default; not tuned.
    weight_decay: float = Field(0.01, ge=0)
    seed: int = 0
    additive_attention: bool = True
    grad_clip: Optional[float] = Field(None, gt=0)
    # CLIP initial temperature 0.07; exp(tau) is clamped at max_logit_scale.
    init_temperature: float = Field(0.07, gt=0)
    max_logit_scale: float = Field(100.0, gt=1)
    checkpoint_every: int = Field(10, ge=1, description="Checkpoint cadence in epochs")
    eval_every: int = Field(5, ge=1, description="Validation cadence in epochs")

    @model_validator(mode='after')
    def _warmup_fits(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must not exceed epochs ({self.epochs})")
        return self


class SceneConfig(StrictModel):
    """Sizes and noise of the synthetic scene-graph corpus."""
    n_object_classes: int = Field(12, ge=2)
    n_predicate_classes: int = Field(8, ge=2)
    d: int = Field(32, ge=2)
    min_objects: int = Field(2, ge=2)
    max_objects: int = Field(8, ge=2)
    min_triplets: int = Field(1, ge=1)
    max_triplets: int = Field(4, ge=1)
    sigma: float = Field(0.05, ge=0)
    ambiguous_rate: float = Field(0.3, ge=0, le=1)
    max_cosine: float = Field(0.5, gt=0, lt=1)
    n_train: int = Field(2000, ge=0)
    n_val: int = Field(200, ge=0)
    seed: int = 0
    compress: bool = False

    @model_validator(mode='after')
    def _ranges(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.min_triplets > self.max_triplets:
            raise ValueError("min_triplets must not exceed max_triplets")
        if self.max_objects > self.n_object_classes:
            raise ValueError("max_objects must not exceed n_object_classes (objects in a scene are distinct)")
        return self

    @property
    def vocabulary_size(self) -> int:
        # PAD, EOS, "the", "and", objects, predicates
        return 4 + self.n_object_classes + self.n_predicate_classes


class PathsConfig(StrictModel):
    output_dir: str = 'runs/default'
    corpus: Optional[str] = None
    val_corpus: Optional[str] = None
    ground_truth: Optional[str] = None
    checkpoint: Optional[str] = None

    def resolve(self, name: str) -> Path:
        """Return a configured path, defaulting to the standard spot in output_dir."""
        out = Path(self.output_dir)
        defaults = {
            'corpus': out / 'corpus' / 'train.jsonl',
            'val_corpus': out / 'corpus' / 'val.jsonl',
            'ground_truth': out / 'corpus' / 'ground_truth.json',
            'checkpoint': out / 'checkpoints' / 'final.npz',
        }
        value = getattr(self, name)
        return Path(value) if value else defaults[name]


class RunConfig(StrictModel):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scenes: SceneConfig = Field(default_factory=SceneConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode='after')
    def _consistent(self):
        needed = 1 + self.scenes.max_objects + self.scenes.max_triplets
        if self.encoder.context_length < needed:
            raise ValueError(
                f"encoder.context_length ({self.encoder.context_length}) is below the "
                f"{needed} slots the largest synthetic scene needs"
            )
        if self.encoder.vocab_size < self.scenes.vocabulary_size:
            raise ValueError(
                f"encoder.vocab_size ({self.encoder.vocab_size}) is below the caption "
                f"grammar's {self.scenes.vocabulary_size} words"
            )
        return self


def tiny_encoder_config(**changes) -> EncoderConfig:
    """Small shape used by gradient checks and fast tests."""
    base = dict(
        d_token=6, d_l=6, d_model=16, n_layers=2, n_heads=2, d_ff=24,
        context_length=8, embed_dim=8, vocab_size=12, text_context_length=8,
        text_layers=1, text_heads=2, init_std=0.3,
    )
    base.update(changes)
    return EncoderConfig(**base)


def _to_config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    field = '.'.join(str(part) for part in first.get('loc', ())) or '<root>'
    return ConfigError(field, first.get('msg', 'invalid value'))


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Mapping[str, Any]) -> dict:
    """
    Apply dotted ``section.key`` overrides to a raw config mapping.

    String values are decoded as JSON when possible so ``train.lr=0.01``
    becomes a float and ``train.additive_attention=false`` a bool.
    """
    for dotted, value in overrides.items():
        if isinstance(value, str):
            value = _parse_override_value(value)
        parts = dotted.split('.')
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, 'cannot override inside a non-mapping value')
        node[parts[-1]] = value
    return data


def read_config_file(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PathError(path, f"config file not found: {path}")
    if path.suffix == '.toml':
        with open(path, 'rb') as f:
            return tomllib.load(f)
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Build a validated RunConfig.

    Args:
        path: JSON/TOML config file; falls back to $SEMTOK_CONFIG, then defaults
        overrides: dotted key/value pairs taking precedence over the file

    Returns:
        Validated run configuration
    """
    if path is None and os.getenv('SEMTOK_CONFIG'):
        path = Path(os.getenv('SEMTOK_CONFIG'))
    data = read_config_file(path) if path is not None else {}
    apply_overrides(data, overrides or {})
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        error = _to_config_error(e)
        logger.error(f"Invalid configuration | {error}")
        raise error from e
    logger.debug(f"Loaded run config | path={path}, overrides={dict(overrides or {})}")
    return config


def validated(model_cls, **values):
    """Construct a config model, converting pydantic errors into ConfigError."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise _to_config_error(e) from e
