"""
Rank matrices and the learnable rank-weight encoding.

Ordered token pairs get an importance rank in 0..7:

    7  subject -> object of a triplet (directional node-to-node)
    6  subject or object -> the triplet's predicate (node-to-edge)
    5  predicate -> its subject or object (edge-to-node)
    4..1  first..fourth nearest neighbor of a tangible token
    0  anything else, self-pairs and padding

Overlapping cases keep the maximum rank. Ranks become additive attention
biases through ``w = cumsum(exp(a))`` with ``a[0]`` pinned at zero; rank 0
always maps to a bias of exactly 0.0.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from app.core.errors import ContractViolation, DimensionError
from app.core.logging import get_logger
from app.services import numcore as nc
from app.services.tokens import TokenKind, TokenPosition, TokenSet

logger = get_logger(__name__)

N_RANKS = 8
RANK_NODE_TO_NODE = 7
RANK_NODE_TO_EDGE = 6
RANK_EDGE_TO_NODE = 5
NEIGHBOR_RANKS = (4, 3, 2, 1)

# Instrumentation: how often build_ranks ran in this process.
CALL_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class RankMatrix:
    ranks: np.ndarray
    valid_mask: np.ndarray

    def nonzero_cells(self) -> dict[tuple[int, int], int]:
        rows, cols = np.nonzero(self.ranks)
        return {(int(p), int(q)): int(self.ranks[p, q]) for p, q in zip(rows, cols)}


def _new_matrix(context_length: int) -> np.ndarray:
    return np.zeros((context_length, context_length), dtype=np.int64)


def build_ranks(ts: TokenSet, positions: Sequence[TokenPosition], context_length: int) -> RankMatrix:
    """Fill the rank matrix for one packed token set."""
    CALL_COUNTS['build_ranks'] += 1
    if len(positions) != context_length:
        raise DimensionError('build_ranks positions', (len(positions),), (context_length,))
    tangible = {}
    intangible = {}
    for i, pos in enumerate(positions):
        if pos.kind is TokenKind.TANGIBLE:
            tangible[pos.source_index] = i
        elif pos.kind is TokenKind.INTANGIBLE:
            intangible[pos.source_index] = i

    ranks = _new_matrix(context_length)

    def bump(p: int, q: int, rank: int):
        if p != q and rank > ranks[p, q]:
            ranks[p, q] = rank

    for s, o, c in ts.triplets:
        vs, vo, uc = tangible[s], tangible[o], intangible[c]
        bump(vs, vo, RANK_NODE_TO_NODE)
        bump(vs, uc, RANK_NODE_TO_EDGE)
        bump(vo, uc, RANK_NODE_TO_EDGE)
        bump(uc, vs, RANK_EDGE_TO_NODE)
        bump(uc, vo, RANK_EDGE_TO_NODE)
    for a, nearest in enumerate(ts.neighbors):
        for rank, b in zip(NEIGHBOR_RANKS, nearest):
            bump(tangible[a], tangible[b], rank)

    valid_mask = np.array([pos.kind is not TokenKind.PAD for pos in positions], dtype=bool)
    return RankMatrix(ranks=ranks, valid_mask=valid_mask)


def oracle_ranks(ts: TokenSet, context_length: Optional[int] = None) -> RankMatrix:
    """
    Brute-force reference: for every cell, enumerate each applicable case and
    keep the largest rank. Only used to cross-check build_ranks.
    """
    n, m = ts.n_tangible, ts.n_intangible
    context_length = context_length or ts.n_slots
    ranks = _new_matrix(context_length)

    def decode(p: int):
        if p == 0:
            return 'l', None
        if p <= n:
            return 'v', p - 1
        if p <= n + m:
            return 'u', p - 1 - n
        return 'pad', None

    for p in range(context_length):
        kind_p, i = decode(p)
        for q in range(context_length):
            kind_q, j = decode(q)
            if p == q:
                continue
            candidates = [0]
            if kind_p == 'v' and kind_q == 'v':
                if any(s == i and o == j for s, o, _ in ts.triplets):
                    candidates.append(7)
                nearest = list(ts.neighbors[i])[:4]
                if j in nearest:
                    candidates.append(4 - nearest.index(j))
            elif kind_p == 'v' and kind_q == 'u':
                if any(c == j and i in (s, o) for s, o, c in ts.triplets):
                    candidates.append(6)
            elif kind_p == 'u' and kind_q == 'v':
                if any(c == i and j in (s, o) for s, o, c in ts.triplets):
                    candidates.append(5)
            ranks[p, q] = max(candidates)
    valid_mask = np.arange(context_length) < ts.n_slots
    return RankMatrix(ranks=ranks, valid_mask=valid_mask)


class WeightEncoding:
    """
    Learnable vector ``a`` of length 8 with ``a[0]`` frozen at 0.

    ``weight_table()`` returns ``cumsum(exp(a))``; only ``a[1:]`` enters the
    graph, so no gradient ever reaches ``a[0]``.
    """

    def __init__(self, a: Optional[nc.Tensor] = None):
        if a is None:
            a = nc.Tensor(np.zeros(N_RANKS), requires_grad=True)
        if a.shape != (N_RANKS,):
            raise DimensionError('weight encoding', a.shape, (N_RANKS,))
        if a.data[0] != 0.0:
            raise ContractViolation(f"weight encoding a[0] must be 0, got {a.data[0]}")
        self.a = a

    @classmethod
    def from_values(cls, values: Sequence[float], requires_grad: bool = True) -> WeightEncoding:
        return cls(nc.Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad))

    def weight_table(self) -> nc.Tensor:
        head = nc.Tensor(np.zeros(1))
        free = nc.slice_(self.a, 0, 1, N_RANKS)
        return nc.cumsum_lastdim(nc.exp(nc.concat([head, free], axis=0)))


def weights_from_ranks(rm: Union[RankMatrix, np.ndarray], enc: WeightEncoding) -> nc.Tensor:
    """
    Replace each rank r > 0 by w[r] and rank 0 by 0.0.

    Accepts a single RankMatrix or a stacked integer array of any shape
    (e.g. ``[batch, T, T]``).
    """
    ranks = rm.ranks if isinstance(rm, RankMatrix) else np.asarray(rm, dtype=np.int64)
    if ranks.size and (ranks.min() < 0 or ranks.max() >= N_RANKS):
        raise DimensionError('weights_from_ranks (rank outside 0..7)', ranks.shape)
    table = enc.weight_table()
    return nc.mul(nc.take(table, ranks), (ranks > 0).astype(np.float64))


def render_grid(rm: RankMatrix, positions: Optional[Sequence[TokenPosition]] = None) -> str:
    """Aligned integer grid with token labels, for the inspect command."""
    size = rm.ranks.shape[0]
    if positions is None:
        labels = [str(i) for i in range(size)]
    else:
        short = {TokenKind.IMAGE: 'l', TokenKind.TANGIBLE: 'v', TokenKind.INTANGIBLE: 'u', TokenKind.PAD: '.'}
        labels = [short[p.kind] + ('' if p.source_index is None else str(p.source_index)) for p in positions]
    width = max(3, max(len(s) for s in labels) + 1)
    lines = [' ' * width + ''.join(s.rjust(width) for s in labels)]
    for p in range(size):
        cells = ''.join(str(int(r)).rjust(width) if rm.valid_mask[p] and rm.valid_mask[q] else '.'.rjust(width)
                        for q, r in enumerate(rm.ranks[p]))
        lines.append(labels[p].rjust(width) + cells)
    return '\n'.join(lines)
