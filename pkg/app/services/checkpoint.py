"""
Checkpoint files.

A checkpoint is an ``.npz`` container: one little-endian float64 array per
parameter path (``param/<path>``), optional AdamW moments
(``optim/m/<path>``, ``optim/v/<path>``) and a JSON header stored under
``__header__`` carrying the encoder config, corpus width, seed and step.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from app import __version__
from app.core.config import EncoderConfig
from app.core.errors import CheckpointError, PathError
from app.core.logging import get_logger
from app.services.encoder import ModelParams, check_params

logger = get_logger(__name__)

FORMAT = 'semtok-checkpoint/1'
HEADER_KEY = '__header__'
LE_FLOAT64 = np.dtype('<f8')


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: ModelParams
    d: int
    seed: int
    step: int
    epoch: int = 0
    train_config: dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    header: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path,
    params: ModelParams,
    config: EncoderConfig,
    seed: int,
    step: int,
    epoch: int = 0,
    train_config: Optional[dict] = None,
    optimizer: Optional[OptimizerState] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        'format': FORMAT,
        'code_version': __version__,
        'encoder_config': config.model_dump(),
        'd': config.d_token,
        'seed': seed,
        'step': step,
        'epoch': epoch,
        'train_config': train_config or {},
        'shapes': {p: list(s) for p, s in params.shapes().items()},
        'optimizer_step': optimizer.step if optimizer else None,
    }
    arrays = {HEADER_KEY: np.array(json.dumps(header, sort_keys=True))}
    for p, t in params.items():
        arrays[f'param/{p}'] = np.array(t.data, dtype=LE_FLOAT64)
    if optimizer is not None:
        for p in params.paths():
            arrays[f'optim/m/{p}'] = np.array(optimizer.m[p], dtype=LE_FLOAT64)
            arrays[f'optim/v/{p}'] = np.array(optimizer.v[p], dtype=LE_FLOAT64)
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.info(f"Saved checkpoint | path={path}, step={step}, epoch={epoch}")
    return path


def load_checkpoint(path, expected: Optional[EncoderConfig] = None) -> Checkpoint:
    """
    Read and verify a checkpoint.

    Raises:
        PathError: missing file
        CheckpointError: malformed header, missing path or wrong shape
    """
    path = Path(path)
    if not path.exists():
        raise PathError(path, f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if HEADER_KEY not in contents:
        raise CheckpointError(f"checkpoint {path} has no header")
    header = json.loads(str(contents[HEADER_KEY]))
    if header.get('format') != FORMAT:
        raise CheckpointError(f"checkpoint {path} has format {header.get('format')!r}, expected {FORMAT!r}")

    config = EncoderConfig(**header['encoder_config'])
    if expected is not None and expected != config:
        raise CheckpointError(f"checkpoint {path} was written for a different encoder config")

    arrays = {key[len('param/'):]: value for key, value in contents.items() if key.startswith('param/')}
    for p, a in arrays.items():
        if a.dtype != LE_FLOAT64:
            raise CheckpointError(f"parameter {p!r} stored as {a.dtype}, expected little-endian float64")
    params = ModelParams.from_arrays(arrays)
    check_params(params, config)

    optimizer = None
    if header.get('optimizer_step') is not None:
        optimizer = OptimizerState(
            step=int(header['optimizer_step']),
            m={p: contents[f'optim/m/{p}'].astype(np.float64) for p in params.paths()},
            v={p: contents[f'optim/v/{p}'].astype(np.float64) for p in params.paths()},
        )
    logger.debug(f"Loaded checkpoint | path={path}, step={header['step']}")
    return Checkpoint(
        config=config,
        params=params,
        d=int(header['d']),
        seed=int(header['seed']),
        step=int(header['step']),
        epoch=int(header.get('epoch', 0)),
        train_config=header.get('train_config', {}),
        optimizer=optimizer,
        header=header,
    )


def file_digest(path) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
