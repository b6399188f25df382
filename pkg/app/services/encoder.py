"""
Visual token encoder and caption encoder.

The image side projects tangible/intangible tokens with one shared linear
map and the image-feature vector l with a 3-layer ReLU MLP, adds one learned
embedding per token type, runs pre-norm transformer blocks whose attention
scores receive the rank-derived bias (the same bias in every head), reads the
output at position 0 and L2-normalizes its projection.

The caption side is a plain transformer over learned token and absolute
position embeddings, read out at the end-of-sequence slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from app.core.config import EOS_ID, PAD_ID, EncoderConfig
from app.core.errors import CapacityError, CheckpointError, ContractViolation, VocabularyError
from app.core.logging import get_logger
from app.services import numcore as nc
from app.services.rankmatrix import N_RANKS, WeightEncoding, build_ranks, weights_from_ranks
from app.services.tokens import TokenPosition, TokenSet, kind_ids, pack, validate_token_set

logger = get_logger(__name__)

TYPE_EMBEDDINGS = ('p_l', 'p_v', 'p_u')
NO_DECAY_SUFFIXES = ('.bias', '.gamma', '.beta')
NO_DECAY_PATHS = (
    'image.type_embedding.p_l',
    'image.type_embedding.p_v',
    'image.type_embedding.p_u',
    'image.weight_encoding',
    'text.position_embedding',
    'logit_scale',
)
WEIGHT_ENCODING_PATH = 'image.weight_encoding'
LOGIT_SCALE_PATH = 'logit_scale'


class ModelParams:
    """Every learnable tensor of both encoders, addressable by dotted path."""

    def __init__(self, tensors: dict[str, nc.Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, path: str) -> nc.Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def paths(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {path: t.shape for path, t in self._tensors.items()}

    @property
    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    @property
    def weight_encoding(self) -> WeightEncoding:
        return WeightEncoding(self._tensors[WEIGHT_ENCODING_PATH])

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {path: t.data.copy() for path, t in self._tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ModelParams:
        return cls({path: nc.Tensor(np.array(a, dtype=np.float64), requires_grad=True)
                    for path, a in arrays.items()})

    def copy(self) -> ModelParams:
        return ModelParams.from_arrays(self.to_arrays())

    def decays(self, path: str) -> bool:
        """Whether decoupled weight decay applies to this tensor."""
        return path not in NO_DECAY_PATHS and not path.endswith(NO_DECAY_SUFFIXES)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())


def _transformer_shapes(prefix: str, d_model: int, d_ff: int) -> list[tuple[str, tuple[int, ...], str]]:
    shapes = []
    for name in ('ln1', 'ln2'):
        shapes += [(f'{prefix}.{name}.gamma', (d_model,), 'ones'), (f'{prefix}.{name}.beta', (d_model,), 'zeros')]
    for name in ('q', 'k', 'v', 'out'):
        shapes += [(f'{prefix}.attn.{name}.weight', (d_model, d_model), 'linear'),
                   (f'{prefix}.attn.{name}.bias', (d_model,), 'zeros')]
    shapes += [(f'{prefix}.ffn.0.weight', (d_model, d_ff), 'linear'), (f'{prefix}.ffn.0.bias', (d_ff,), 'zeros'),
               (f'{prefix}.ffn.1.weight', (d_ff, d_model), 'linear'), (f'{prefix}.ffn.1.bias', (d_model,), 'zeros')]
    return shapes


def param_layout(config: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(path, shape, initializer) for every parameter, in a fixed order."""
    dm = config.d_model
    layout = [
        ('image.token_proj.weight', (config.d_token, dm), 'linear'),
        ('image.token_proj.bias', (dm,), 'zeros'),
        ('image.feature_mlp.0.weight', (config.d_l, dm), 'linear'),
        ('image.feature_mlp.0.bias', (dm,), 'zeros'),
        ('image.feature_mlp.1.weight', (dm, dm), 'linear'),
        ('image.feature_mlp.1.bias', (dm,), 'zeros'),
        ('image.feature_mlp.2.weight', (dm, dm), 'linear'),
        ('image.feature_mlp.2.bias', (dm,), 'zeros'),
    ]
    layout += [(f'image.type_embedding.{name}', (dm,), 'embedding') for name in TYPE_EMBEDDINGS]
    for i in range(config.n_layers):
        layout += _transformer_shapes(f'image.layers.{i}', dm, config.d_ff)
    layout += [
        ('image.final_ln.gamma', (dm,), 'ones'),
        ('image.final_ln.beta', (dm,), 'zeros'),
        ('image.proj.weight', (dm, config.embed_dim), 'linear'),
        (WEIGHT_ENCODING_PATH, (N_RANKS,), 'zeros'),
        ('text.token_embedding', (config.vocab_size, dm), 'embedding'),
        ('text.position_embedding', (config.text_context_length, dm), 'embedding'),
    ]
    for i in range(config.text_layers):
        layout += _transformer_shapes(f'text.layers.{i}', dm, config.d_ff)
    layout += [
        ('text.final_ln.gamma', (dm,), 'ones'),
        ('text.final_ln.beta', (dm,), 'zeros'),
        ('text.proj.weight', (dm, config.embed_dim), 'linear'),
        (LOGIT_SCALE_PATH, (), 'temperature'),
    ]
    return layout


def init_params(config: EncoderConfig, seed: int, init_temperature: float = 0.07) -> ModelParams:
    """Seeded initialization; identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for path, shape, kind in param_layout(config):
        if kind == 'linear':
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif kind == 'embedding':
            data = rng.normal(0.0, config.init_std, size=shape)
        elif kind == 'ones':
            data = np.ones(shape)
        elif kind == 'temperature':
            data = np.array(math.log(1.0 / init_temperature))
        else:
            data = np.zeros(shape)
        tensors[path] = nc.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
    params = ModelParams(tensors)
    logger.debug(f"Initialized parameters | seed={seed}, tensors={len(params)}, values={params.num_parameters}")
    return params


def check_params(params: ModelParams, config: EncoderConfig) -> None:
    """Verify every expected path exists with the expected shape."""
    for path, shape, _ in param_layout(config):
        if path not in params:
            raise CheckpointError(f"missing parameter {path!r}")
        if params[path].shape != tuple(shape):
            raise CheckpointError(f"parameter {path!r} has shape {list(params[path].shape)}, expected {list(shape)}")


# ---------------------------------------------------------------------------
# batches

@dataclass
class PreparedImage:
    """One token set packed for the encoder (pure function of the token set)."""
    sample_id: str
    tokens: np.ndarray
    image_features: np.ndarray
    kinds: np.ndarray
    valid_mask: np.ndarray
    ranks: Optional[np.ndarray]
    positions: list[TokenPosition]


@dataclass
class ImageBatch:
    tokens: np.ndarray           # [B, T, d_token]
    image_features: np.ndarray   # [B, d_l]
    kinds: np.ndarray            # [B, T], -1 for PAD
    valid_mask: np.ndarray       # [B, T]
    ranks: Optional[np.ndarray]  # [B, T, T]
    sample_ids: list[str]


@dataclass
class CaptionBatch:
    ids: np.ndarray         # [B, text_context_length]
    valid_mask: np.ndarray  # [B, text_context_length]
    eos_index: np.ndarray   # [B]


def prepare_image(ts: TokenSet, config: EncoderConfig, with_ranks: bool = True) -> PreparedImage:
    validate_token_set(ts, d=config.d_token, d_l=config.d_l, context_length=config.context_length)
    tokens, positions, valid_mask = pack(ts, config.context_length, width=config.d_token)
    ranks = build_ranks(ts, positions, config.context_length).ranks if with_ranks else None
    return PreparedImage(
        sample_id=ts.sample_id,
        tokens=tokens,
        image_features=np.asarray(ts.l, dtype=np.float64),
        kinds=kind_ids(positions),
        valid_mask=valid_mask,
        ranks=ranks,
        positions=positions,
    )


def stack_images(prepared: Sequence[PreparedImage]) -> ImageBatch:
    with_ranks = all(p.ranks is not None for p in prepared)
    return ImageBatch(
        tokens=np.stack([p.tokens for p in prepared]),
        image_features=np.stack([p.image_features for p in prepared]),
        kinds=np.stack([p.kinds for p in prepared]),
        valid_mask=np.stack([p.valid_mask for p in prepared]),
        ranks=np.stack([p.ranks for p in prepared]) if with_ranks else None,
        sample_ids=[p.sample_id for p in prepared],
    )


def make_image_batch(token_sets: Sequence[TokenSet], config: EncoderConfig, with_ranks: bool = True) -> ImageBatch:
    return stack_images([prepare_image(ts, config, with_ranks) for ts in token_sets])


def make_caption_batch(
    captions: Sequence[Sequence[int]],
    config: EncoderConfig,
    sample_ids: Optional[Sequence[str]] = None,
) -> CaptionBatch:
    """
    Pad captions to the text context, appending the end-of-sequence id.

    Raises:
        VocabularyError: for an id outside [0, vocab_size)
        CapacityError: when a caption plus EOS exceeds the text context
    """
    size = config.text_context_length
    ids = np.full((len(captions), size), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(captions), size), dtype=bool)
    eos = np.zeros(len(captions), dtype=np.int64)
    for row, caption in enumerate(captions):
        caption = list(caption)
        bad = [i for i in caption if not 0 <= i < config.vocab_size]
        if bad:
            raise VocabularyError(f"caption id {bad[0]} outside vocabulary of size {config.vocab_size}")
        if len(caption) + 1 > size:
            sid = sample_ids[row] if sample_ids else f'caption[{row}]'
            raise CapacityError(sid, len(caption) + 1, size)
        ids[row, :len(caption)] = caption
        ids[row, len(caption)] = EOS_ID
        valid[row, :len(caption) + 1] = True
        eos[row] = len(caption)
    return CaptionBatch(ids=ids, valid_mask=valid, eos_index=eos)


# ---------------------------------------------------------------------------
# building blocks

def linear(x: nc.Tensor, params: ModelParams, prefix: str, bias: bool = True) -> nc.Tensor:
    out = nc.matmul(x, params[f'{prefix}.weight'])
    return nc.add(out, params[f'{prefix}.bias']) if bias else out


def add_type_embeddings(
    tokens: nc.Tensor,
    positions: Union[Sequence[TokenPosition], np.ndarray],
    params: ModelParams,
) -> nc.Tensor:
    """Add p_l / p_v / p_u by token type; PAD rows are left unchanged."""
    kinds = positions if isinstance(positions, np.ndarray) else kind_ids(list(positions))
    onehot = np.zeros(kinds.shape + (len(TYPE_EMBEDDINGS),))
    for k in range(len(TYPE_EMBEDDINGS)):
        onehot[..., k] = kinds == k
    width = tokens.shape[-1]
    table = nc.concat([nc.reshape(params[f'image.type_embedding.{name}'], (1, width))
                       for name in TYPE_EMBEDDINGS], axis=0)
    return nc.add(tokens, nc.matmul(nc.Tensor(onehot), table))


class AttentionOutput(NamedTuple):
    output: nc.Tensor   # after the output projection, [B, T, d_model]
    mixed: nc.Tensor    # value mix before the output projection, [B, T, d_model]
    values: nc.Tensor   # value projection, [B, T, d_model]
    probs: np.ndarray   # [B, H, T, T]


def multi_head_attention(
    x: nc.Tensor,
    bias: Optional[nc.Tensor],
    valid_mask: np.ndarray,
    params: ModelParams,
    prefix: str,
    n_heads: int,
) -> AttentionOutput:
    """
    Scaled dot-product attention with an optional additive score bias.

    The same ``bias[b]`` ([T, T]) is added to every head after the 1/sqrt(d_head)
    scaling; keys outside ``valid_mask`` get zero probability.
    """
    B, T, dm = x.shape
    dh = dm // n_heads

    def heads(t: nc.Tensor) -> nc.Tensor:
        return nc.transpose(nc.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    values = linear(x, params, f'{prefix}.v')
    q = heads(linear(x, params, f'{prefix}.q'))
    k = heads(linear(x, params, f'{prefix}.k'))
    v = heads(values)
    scores = nc.mul(nc.matmul(q, nc.swap_last(k)), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = nc.add(scores, nc.reshape(bias, (B, 1, T, T)))
    probs = nc.softmax_lastdim(scores, mask=valid_mask[:, None, None, :])
    mixed = nc.reshape(nc.transpose(nc.matmul(probs, v), (0, 2, 1, 3)), (B, T, dm))
    return AttentionOutput(linear(mixed, params, f'{prefix}.out'), mixed, values, probs.data)


def attention_layer(
    x: nc.Tensor,
    bias: Optional[nc.Tensor],
    valid_mask: np.ndarray,
    params: ModelParams,
    prefix: str,
    n_heads: int,
) -> nc.Tensor:
    """One pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""
    y = nc.layer_norm(x, params[f'{prefix}.ln1.gamma'], params[f'{prefix}.ln1.beta'])
    x = nc.add(x, multi_head_attention(y, bias, valid_mask, params, f'{prefix}.attn', n_heads).output)
    y = nc.layer_norm(x, params[f'{prefix}.ln2.gamma'], params[f'{prefix}.ln2.beta'])
    hidden = nc.relu(linear(y, params, f'{prefix}.ffn.0'))
    return nc.add(x, linear(hidden, params, f'{prefix}.ffn.1'))


def image_feature_mlp(features: nc.Tensor, params: ModelParams) -> nc.Tensor:
    h = nc.relu(linear(features, params, 'image.feature_mlp.0'))
    h = nc.relu(linear(h, params, 'image.feature_mlp.1'))
    return linear(h, params, 'image.feature_mlp.2')


# ---------------------------------------------------------------------------
# encoders

def encode_image_batch(
    batch: ImageBatch,
    params: ModelParams,
    config: EncoderConfig,
    additive_attention: bool = True,
) -> nc.Tensor:
    """Image embeddings s, one unit-norm row per sample: [B, embed_dim]."""
    B, T, _ = batch.tokens.shape
    dm = config.d_model
    h = linear(nc.Tensor(batch.tokens), params, 'image.token_proj')
    summary = image_feature_mlp(nc.Tensor(batch.image_features), params)
    h = nc.concat([nc.reshape(summary, (B, 1, dm)), nc.slice_(h, 1, 1, T)], axis=1)
    h = add_type_embeddings(h, batch.kinds, params)

    bias = None
    if additive_attention:
        if batch.ranks is None:
            raise ContractViolation("additive attention needs rank matrices in the batch")
        bias = weights_from_ranks(batch.ranks, params.weight_encoding)

    for i in range(config.n_layers):
        h = attention_layer(h, bias, batch.valid_mask, params, f'image.layers.{i}', config.n_heads)
    h = nc.layer_norm(h, params['image.final_ln.gamma'], params['image.final_ln.beta'])
    readout = nc.reshape(nc.slice_(h, 1, 0, 1), (B, dm))
    return nc.l2_normalize_lastdim(linear(readout, params, 'image.proj', bias=False))


def encode_caption_batch(batch: CaptionBatch, params: ModelParams, config: EncoderConfig) -> nc.Tensor:
    """Caption embeddings t, one unit-norm row per caption: [B, embed_dim]."""
    B, T = batch.ids.shape
    dm = config.d_model
    h = nc.take(params['text.token_embedding'], batch.ids)
    h = nc.add(h, nc.slice_(params['text.position_embedding'], 0, 0, T))
    for i in range(config.text_layers):
        h = attention_layer(h, None, batch.valid_mask, params, f'text.layers.{i}', config.text_heads)
    h = nc.layer_norm(h, params['text.final_ln.gamma'], params['text.final_ln.beta'])
    rows = nc.take(nc.reshape(h, (B * T, dm)), np.arange(B) * T + batch.eos_index)
    return nc.l2_normalize_lastdim(linear(rows, params, 'text.proj', bias=False))


def encode_image(
    ts: TokenSet,
    params: ModelParams,
    config: EncoderConfig,
    additive_attention: bool = True,
) -> np.ndarray:
    """Embedding s of a single token set."""
    batch = make_image_batch([ts], config, with_ranks=additive_attention)
    return encode_image_batch(batch, params, config, additive_attention).data[0].copy()


def encode_caption(caption: Sequence[int], params: ModelParams, config: EncoderConfig) -> np.ndarray:
    """Embedding t of a single caption."""
    batch = make_caption_batch([caption], config)
    return encode_caption_batch(batch, params, config).data[0].copy()


class VisualTokenModel:
    """Frozen encoders bundled with their configuration, for evaluation."""

    def __init__(self, config: EncoderConfig, params: ModelParams, additive_attention: bool = True,
                 batch_size: int = 64):
        check_params(params, config)
        self.config = config
        self.params = params
        self.additive_attention = additive_attention
        self.batch_size = batch_size

    def embed_images(self, token_sets: Sequence[TokenSet]) -> np.ndarray:
        rows = []
        for start in range(0, len(token_sets), self.batch_size):
            chunk = token_sets[start:start + self.batch_size]
            batch = make_image_batch(chunk, self.config, with_ranks=self.additive_attention)
            rows.append(encode_image_batch(batch, self.params, self.config, self.additive_attention).data)
        return np.concatenate(rows) if rows else np.zeros((0, self.config.embed_dim))

    def embed_captions(self, captions: Sequence[Sequence[int]]) -> np.ndarray:
        rows = []
        for start in range(0, len(captions), self.batch_size):
            batch = make_caption_batch(captions[start:start + self.batch_size], self.config)
            rows.append(encode_caption_batch(batch, self.params, self.config).data)
        return np.concatenate(rows) if rows else np.zeros((0, self.config.embed_dim))
