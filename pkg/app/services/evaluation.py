"""
Retrieval metrics and compositional choice tests.

All choice protocols count ties as failures; argmax ties in retrieval go to
the lowest index.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.errors import ConfigError, PathError
from app.core.logging import get_logger
from app.services.checkpoint import Checkpoint, file_digest, load_checkpoint
from app.services.encoder import ModelParams, VisualTokenModel
from app.services.tokens import TokenSet

logger = get_logger(__name__)


@dataclass
class SimilarityReport:
    matrix: np.ndarray  # [N_img, N_txt] cosine similarities
    t2i_top1: float
    i2t_top1: float
    diag_mean: float
    offdiag_mean: float

    def summary(self) -> dict:
        data = asdict(self)
        data.pop('matrix')
        data['n'] = int(self.matrix.shape[0])
        return data


class ChoiceItem(NamedTuple):
    image: TokenSet
    correct: tuple[int, ...]
    distractor: tuple[int, ...]


class WordOrderItem(NamedTuple):
    image: TokenSet
    correct: tuple[int, ...]
    shuffled: tuple[tuple[int, ...], ...]


class GroupQuad(NamedTuple):
    image_a: TokenSet
    image_b: TokenSet
    caption_a: tuple[int, ...]
    caption_b: tuple[int, ...]


@dataclass
class GroupScores:
    text_correct: float
    image_correct: float
    group_correct: float
    n: int = 0


ModelSource = Union[VisualTokenModel, Checkpoint, str, Path]


# ---------------------------------------------------------------------------
# scoring on embeddings

def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def similarity_report(S: np.ndarray, T: np.ndarray) -> SimilarityReport:
    """Cosine similarity matrix with top-1 retrieval accuracies (row i of S pairs with row i of T)."""
    if S.ndim != 2 or T.ndim != 2 or S.shape[1] != T.shape[1]:
        raise ConfigError('encoder.embed_dim', f'image embeddings {S.shape} and caption embeddings {T.shape} differ')
    M = _unit_rows(S) @ _unit_rows(T).T
    n = min(M.shape)
    if n == 0:
        return SimilarityReport(M, float('nan'), float('nan'), float('nan'), float('nan'))
    idx = np.arange(n)
    i2t = float(np.mean(np.argmax(M[:n], axis=1) == idx))
    t2i = float(np.mean(np.argmax(M[:, :n], axis=0) == idx))
    diag = np.zeros(M.shape, dtype=bool)
    diag[idx, idx] = True
    offdiag = M[~diag]
    return SimilarityReport(
        matrix=M,
        t2i_top1=t2i,
        i2t_top1=i2t,
        diag_mean=float(M[diag].mean()),
        offdiag_mean=float(offdiag.mean()) if offdiag.size else float('nan'),
    )


def pairwise_accuracy(s: np.ndarray, t_correct: np.ndarray, t_distractor: np.ndarray) -> float:
    """Fraction of rows where cos(s, t_correct) > cos(s, t_distractor)."""
    s, tc, td = _unit_rows(s), _unit_rows(t_correct), _unit_rows(t_distractor)
    if not len(s):
        return float('nan')
    return float(np.mean(np.sum(s * tc, axis=1) > np.sum(s * td, axis=1)))


def multiple_choice_accuracy(s: np.ndarray, t_correct: np.ndarray, t_shuffled: np.ndarray) -> float:
    """
    Fraction of rows where the correct caption strictly beats every shuffled one.

    ``t_shuffled`` has shape (n, k, d): k distractor embeddings per row.
    """
    s, tc, td = _unit_rows(s), _unit_rows(t_correct), _unit_rows(t_shuffled)
    if not len(s):
        return float('nan')
    scores = np.einsum('nd,nkd->nk', s, np.concatenate([tc[:, None, :], td], axis=1))
    return float(np.mean(scores[:, 0] > scores[:, 1:].max(axis=1)))


def group_scores(s_a: np.ndarray, s_b: np.ndarray, t_a: np.ndarray, t_b: np.ndarray) -> GroupScores:
    """Per-quad text, image and group correctness averaged over quads."""
    s_a, s_b, t_a, t_b = (_unit_rows(x) for x in (s_a, s_b, t_a, t_b))
    if not len(s_a):
        return GroupScores(float('nan'), float('nan'), float('nan'), 0)

    def cos(x, y):
        return np.sum(x * y, axis=1)

    aa, ab, ba, bb = cos(s_a, t_a), cos(s_a, t_b), cos(s_b, t_a), cos(s_b, t_b)
    text = (aa > ab) & (bb > ba)
    image = (aa > ba) & (bb > ab)
    return GroupScores(float(text.mean()), float(image.mean()), float((text & image).mean()), len(s_a))


# ---------------------------------------------------------------------------
# models and caching

def as_model(source: ModelSource, additive_attention: Optional[bool] = None) -> VisualTokenModel:
    """Wrap a checkpoint (object or path) as a frozen model; additive attention follows its training run."""
    if isinstance(source, VisualTokenModel):
        return source
    checkpoint = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    if additive_attention is None:
        additive_attention = bool(checkpoint.train_config.get('additive_attention', True))
    return VisualTokenModel(checkpoint.config, checkpoint.params, additive_attention)


def check_compatible(model: VisualTokenModel, corpus: Sequence[TokenSet]) -> None:
    config = model.config
    for ts in corpus:
        if ts.n_tangible + ts.n_intangible and ts.d != config.d_token:
            raise ConfigError('encoder.d_token', f'checkpoint expects d={config.d_token}, '
                                                 f'sample {ts.sample_id!r} has d={ts.d}')
        if ts.l.shape[0] != config.d_l:
            raise ConfigError('encoder.d_l', f'checkpoint expects d_l={config.d_l}, '
                                             f'sample {ts.sample_id!r} has {ts.l.shape[0]}')


def params_digest(params: ModelParams) -> str:
    digest = hashlib.sha256()
    for path in sorted(params.paths()):
        digest.update(path.encode())
        digest.update(np.ascontiguousarray(params[path].data, dtype='<f8').tobytes())
    return digest.hexdigest()


def corpus_digest(corpus: Sequence[TokenSet]) -> str:
    digest = hashlib.sha256()
    for ts in corpus:
        digest.update(ts.sample_id.encode())
        for arr in (ts.l, ts.V, ts.U):
            digest.update(np.ascontiguousarray(arr, dtype='<f8').tobytes())
        digest.update(json.dumps([ts.triplets, ts.neighbors, ts.captions]).encode())
    return digest.hexdigest()


class EmbeddingCache:
    """Image/caption embeddings on disk, keyed by (model digest, corpus digest, attention mode)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def key(self, model_digest: str, data_digest: str, additive_attention: bool) -> str:
        raw = f'{model_digest}:{data_digest}:{int(additive_attention)}'
        return hashlib.sha256(raw.encode()).hexdigest()[:32]

    def load(self, key: str) -> Optional[tuple[np.ndarray, np.ndarray]]:
        path = self.directory / f'{key}.npz'
        if not path.exists():
            return None
        with np.load(path) as archive:
            return archive['images'], archive['captions']

    def store(self, key: str, images: np.ndarray, captions: np.ndarray) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f'{key}.npz'
        with open(path, 'wb') as f:
            np.savez(f, images=images, captions=captions)
        return path


def embed_corpus(
    model: VisualTokenModel,
    corpus: Sequence[TokenSet],
    cache: Optional[EmbeddingCache] = None,
    model_digest: Optional[str] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Embed every image and primary caption in corpus order."""
    check_compatible(model, corpus)
    key = None
    if cache is not None:
        key = cache.key(model_digest or params_digest(model.params), corpus_digest(corpus), model.additive_attention)
        hit = cache.load(key)
        if hit is not None:
            logger.debug(f"Embedding cache hit | key={key}")
            return hit
    images = model.embed_images(list(corpus))
    captions = model.embed_captions([ts.caption for ts in corpus])
    if cache is not None:
        cache.store(key, images, captions)
    return images, captions


# ---------------------------------------------------------------------------
# protocols

def retrieval_eval(
    source: ModelSource,
    corpus: Sequence[TokenSet],
    cache: Optional[EmbeddingCache] = None,
    additive_attention: Optional[bool] = None,
) -> SimilarityReport:
    """
    Text-to-image and image-to-text top-1 retrieval over a corpus.

    Raises:
        ConfigError: when corpus widths do not match the checkpoint
    """
    model = as_model(source, additive_attention)
    digest = file_digest(source) if isinstance(source, (str, Path)) else None
    S, T = embed_corpus(model, corpus, cache, digest)
    report = similarity_report(S, T)
    logger.info(f"Retrieval | n={len(corpus)}, t2i_top1={report.t2i_top1:.3f}, i2t_top1={report.i2t_top1:.3f}")
    return report


def pairwise_choice_eval(source: ModelSource, items: Sequence[ChoiceItem],
                         additive_attention: Optional[bool] = None) -> float:
    """Fraction of items whose correct caption outscores the distractor for the image."""
    model = as_model(source, additive_attention)
    if not items:
        return float('nan')
    images = [p.image for p in items]
    check_compatible(model, images)
    s = model.embed_images(images)
    t_correct = model.embed_captions([p.correct for p in items])
    t_distractor = model.embed_captions([p.distractor for p in items])
    return pairwise_accuracy(s, t_correct, t_distractor)


def word_order_accuracy(source: ModelSource, items: Sequence[WordOrderItem],
                        additive_attention: Optional[bool] = None) -> float:
    """Fraction of items whose caption outscores all of its word-shuffled versions for the image."""
    model = as_model(source, additive_attention)
    if not items:
        return float('nan')
    images = [it.image for it in items]
    check_compatible(model, images)
    k = len(items[0].shuffled)
    if any(len(it.shuffled) != k for it in items):
        raise ConfigError('word_order', 'every item needs the same number of shuffled captions')
    s = model.embed_images(images)
    t_correct = model.embed_captions([it.correct for it in items])
    t_shuffled = model.embed_captions([c for it in items for c in it.shuffled])
    return multiple_choice_accuracy(s, t_correct, t_shuffled.reshape(len(items), k, -1))


def group_eval(source: ModelSource, quads: Sequence[GroupQuad],
               additive_attention: Optional[bool] = None) -> GroupScores:
    """Winoground-style text/image/group scores over 2x2 image-caption quads."""
    model = as_model(source, additive_attention)
    if not quads:
        return GroupScores(float('nan'), float('nan'), float('nan'), 0)
    s_a = model.embed_images([q.image_a for q in quads])
    s_b = model.embed_images([q.image_b for q in quads])
    t_a = model.embed_captions([q.caption_a for q in quads])
    t_b = model.embed_captions([q.caption_b for q in quads])
    return group_scores(s_a, s_b, t_a, t_b)


# ---------------------------------------------------------------------------
# choice items from the ground-truth sidecar

def _by_id(corpus: Sequence[TokenSet]) -> dict[str, TokenSet]:
    return {ts.sample_id: ts for ts in corpus}


def _twins(corpus: Sequence[TokenSet], ground: dict) -> list[tuple[TokenSet, TokenSet]]:
    lookup = _by_id(corpus)
    pairs = []
    for sid, record in sorted(ground['scenes'].items()):
        base = record.get('twin_of')
        if base is not None and base in lookup and sid in lookup:
            pairs.append((lookup[base], lookup[sid]))
    return pairs


def twin_items(corpus: Sequence[TokenSet], ground: dict) -> list[ChoiceItem]:
    """Both directions of every direction-ambiguous pair: (A, capA, capB) and (B, capB, capA)."""
    items = []
    for a, b in _twins(corpus, ground):
        items.append(ChoiceItem(a, a.caption, b.caption))
        items.append(ChoiceItem(b, b.caption, a.caption))
    return items


def twin_quads(corpus: Sequence[TokenSet], ground: dict) -> list[GroupQuad]:
    return [GroupQuad(a, b, a.caption, b.caption) for a, b in _twins(corpus, ground)]


def swap_items(corpus: Sequence[TokenSet], ground: dict) -> list[ChoiceItem]:
    """One relation-swap item per scene that has a swappable triplet."""
    items = []
    for ts in corpus:
        record = ground['scenes'].get(ts.sample_id)
        if record and record.get('swap'):
            items.append(ChoiceItem(ts, tuple(record['swap']['correct']), tuple(record['swap']['swapped'])))
    return items


def word_order_items(corpus: Sequence[TokenSet], ground: dict) -> list[WordOrderItem]:
    """One word-order item per scene whose caption has enough distinct shuffles."""
    items = []
    for ts in corpus:
        record = ground['scenes'].get(ts.sample_id)
        if record and record.get('word_order'):
            entry = record['word_order']
            items.append(WordOrderItem(ts, tuple(entry['correct']), tuple(tuple(c) for c in entry['shuffled'])))
    return items


def full_report(
    source: ModelSource,
    corpus: Sequence[TokenSet],
    ground: Optional[dict] = None,
    cache: Optional[EmbeddingCache] = None,
) -> tuple[dict, SimilarityReport]:
    """Retrieval plus, when ground truth is present, the compositional choice tests."""
    model = as_model(source)
    digest = file_digest(source) if isinstance(source, (str, Path)) else None
    S, T = embed_corpus(model, corpus, cache, digest)
    retrieval = similarity_report(S, T)
    report = {'retrieval': retrieval.summary(), 'additive_attention': model.additive_attention}
    if ground is not None:
        swaps, twins, quads = swap_items(corpus, ground), twin_items(corpus, ground), twin_quads(corpus, ground)
        groups = group_eval(model, quads)
        report['relation_swap'] = {'accuracy': pairwise_choice_eval(model, swaps), 'n': len(swaps)}
        report['ambiguous_pairs'] = {'accuracy': pairwise_choice_eval(model, twins), 'n': len(twins)}
        report['group'] = asdict(groups)
        word_order = word_order_items(corpus, ground)
        report['word_order'] = {'accuracy': word_order_accuracy(model, word_order), 'n': len(word_order)}
    else:
        logger.warning("No ground truth given | compositional choice tests skipped")
    return report, retrieval


# ---------------------------------------------------------------------------
# plot data

def similarity_frame(report: SimilarityReport, sample_ids: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Similarity matrix as a labelled table (rows images, columns captions)."""
    labels = list(sample_ids) if sample_ids is not None else [str(i) for i in range(report.matrix.shape[0])]
    return pd.DataFrame(report.matrix, index=labels[:report.matrix.shape[0]], columns=labels[:report.matrix.shape[1]])


def report_frame(report: dict) -> pd.DataFrame:
    """Numeric entries of an eval report as long-format (section, metric, value) rows."""
    rows = []
    for section, values in report.items():
        if not isinstance(values, dict):
            continue
        for metric, value in values.items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                rows.append({'section': section, 'metric': metric, 'value': float(value)})
    return pd.DataFrame(rows, columns=['section', 'metric', 'value'])


def metric_series(metrics_path) -> pd.DataFrame:
    """Long-format (step, epoch, event, metric, value) rows from a training metrics log."""
    path = Path(metrics_path)
    if not path.exists():
        raise PathError(path, f"metrics log not found: {path}")
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            for key, value in record.items():
                if key in ('event', 'step', 'epoch') or not isinstance(value, (int, float)):
                    continue
                rows.append({'step': record.get('step'), 'epoch': record.get('epoch'),
                             'event': record.get('event'), 'metric': key, 'value': float(value)})
    return pd.DataFrame(rows, columns=['step', 'epoch', 'event', 'metric', 'value'])
