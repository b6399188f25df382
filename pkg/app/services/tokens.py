"""
Per-image semantic token sets and their on-disk interchange format.

A corpus file holds one JSON object per line: an optional header line
``{"header": {...}}`` followed by one record per image. ``.gz`` files are
read and written through gzip transparently.
"""
from __future__ import annotations

import gzip
import io
import json
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.core.errors import CapacityError, CorpusParseError, PathError, TokenSetValidationError
from app.core.logging import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 'semtok-tokens/1'
MAX_NEIGHBORS = 4


class TokenKind(str, Enum):
    IMAGE = 'IMAGE'
    TANGIBLE = 'TANGIBLE'
    INTANGIBLE = 'INTANGIBLE'
    PAD = 'PAD'


@dataclass(frozen=True)
class TokenPosition:
    kind: TokenKind
    source_index: Optional[int] = None


@dataclass(frozen=True)
class TokenSet:
    """
    Tokens extracted from one image.

    ``V`` holds tangible (object) vectors, ``U`` intangible (relation) vectors.
    Triplets are ``(subject, object, predicate)`` with subject/object indexing
    V and predicate indexing U. ``neighbors[a]`` lists up to four tangible
    indices nearest to tangible ``a``, nearest first.
    """
    sample_id: str
    l: np.ndarray
    V: np.ndarray
    U: np.ndarray
    triplets: tuple[tuple[int, int, int], ...] = ()
    neighbors: tuple[tuple[int, ...], ...] = ()
    caption: tuple[int, ...] = ()
    extra_captions: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        l = np.array(self.l, dtype=np.float64).reshape(-1)
        V = np.array(self.V, dtype=np.float64)
        U = np.array(self.U, dtype=np.float64)
        width = next((a.shape[1] for a in (V, U) if a.ndim == 2), l.shape[0])
        object.__setattr__(self, 'l', self._frozen(l))
        object.__setattr__(self, 'V', self._frozen(V if V.size or V.ndim == 2 else np.zeros((0, width))))
        object.__setattr__(self, 'U', self._frozen(U if U.size or U.ndim == 2 else np.zeros((0, width))))
        object.__setattr__(self, 'triplets', tuple(tuple(int(i) for i in t) for t in self.triplets))
        neighbors = tuple(tuple(int(b) for b in nb) for nb in self.neighbors)
        if len(neighbors) < len(self.V):
            neighbors = neighbors + ((),) * (len(self.V) - len(neighbors))
        object.__setattr__(self, 'neighbors', neighbors)
        object.__setattr__(self, 'caption', tuple(int(i) for i in self.caption))
        object.__setattr__(self, 'extra_captions', tuple(tuple(int(i) for i in c) for c in self.extra_captions))

    @staticmethod
    def _frozen(arr: np.ndarray) -> np.ndarray:
        arr.flags.writeable = False
        return arr

    @property
    def n_tangible(self) -> int:
        return int(self.V.shape[0])

    @property
    def n_intangible(self) -> int:
        return int(self.U.shape[0])

    @property
    def d(self) -> int:
        return int(self.V.shape[1]) if self.V.ndim == 2 else 0

    @property
    def n_slots(self) -> int:
        return 1 + self.n_tangible + self.n_intangible

    @property
    def captions(self) -> tuple[tuple[int, ...], ...]:
        return (self.caption,) + self.extra_captions


def validate_token_set(
    ts: TokenSet,
    d: Optional[int] = None,
    d_l: Optional[int] = None,
    context_length: Optional[int] = None,
) -> list[str]:
    """
    Check every TokenSet invariant.

    Returns:
        Warnings for tolerated irregularities (unused predicates)

    Raises:
        TokenSetValidationError: naming the offending field
        CapacityError: when context_length is given and the set does not fit
    """
    sid = ts.sample_id

    def fail(field_name: str, message: str):
        raise TokenSetValidationError(sid, field_name, message)

    n, m = ts.n_tangible, ts.n_intangible
    if ts.V.ndim != 2 or ts.U.ndim != 2:
        fail('V' if ts.V.ndim != 2 else 'U', 'must be a list of equal-width vectors')
    if n and m and ts.V.shape[1] != ts.U.shape[1]:
        fail('U', f'width {ts.U.shape[1]} differs from V width {ts.V.shape[1]}')
    if d is not None:
        if n and ts.V.shape[1] != d:
            fail('V', f'width {ts.V.shape[1]} differs from corpus d={d}')
        if m and ts.U.shape[1] != d:
            fail('U', f'width {ts.U.shape[1]} differs from corpus d={d}')
    expected_l = d_l if d_l is not None else d
    if expected_l is not None and ts.l.shape[0] != expected_l:
        fail('l', f'width {ts.l.shape[0]} differs from expected {expected_l}')
    for name, arr in (('l', ts.l), ('V', ts.V), ('U', ts.U)):
        if not np.all(np.isfinite(arr)):
            fail(name, 'contains non-finite values')

    predicate_owner: dict[int, int] = {}
    for k, (s, o, p) in enumerate(ts.triplets):
        if not 0 <= s < n:
            fail(f'triplets[{k}].subject', f'index {s} outside [0, {n})')
        if not 0 <= o < n:
            fail(f'triplets[{k}].object', f'index {o} outside [0, {n})')
        if not 0 <= p < m:
            fail(f'triplets[{k}].predicate', f'index {p} outside [0, {m})')
        if s == o:
            fail(f'triplets[{k}]', f'subject and object are both {s}')
        if p in predicate_owner:
            fail(f'triplets[{k}].predicate', f'predicate {p} already used by triplets[{predicate_owner[p]}]')
        predicate_owner[p] = k

    if len(ts.neighbors) != n:
        fail('neighbors', f'{len(ts.neighbors)} lists for {n} tangible tokens')
    for a, nb in enumerate(ts.neighbors):
        if len(nb) > MAX_NEIGHBORS:
            fail(f'neighbors[{a}]', f'{len(nb)} entries, at most {MAX_NEIGHBORS} allowed')
        if len(set(nb)) != len(nb):
            fail(f'neighbors[{a}]', 'contains duplicates')
        if a in nb:
            fail(f'neighbors[{a}]', 'contains the token itself')
        for b in nb:
            if not 0 <= b < n:
                fail(f'neighbors[{a}]', f'index {b} outside [0, {n})')

    if context_length is not None and ts.n_slots > context_length:
        raise CapacityError(sid, ts.n_slots, context_length)

    warnings = []
    unused = sorted(set(range(m)) - set(predicate_owner))
    if unused:
        warnings.append(f'sample {sid!r}: intangible tokens {unused} are not referenced by any triplet')
    return warnings


def pack(
    ts: TokenSet,
    context_length: int,
    width: Optional[int] = None,
) -> tuple[np.ndarray, list[TokenPosition], np.ndarray]:
    """
    Lay a token set out as ``[l] ++ V ++ U ++ PAD`` rows.

    Row 0 carries l when its width equals the token width; otherwise it is
    left zero and the encoder reads ``ts.l`` directly.

    Returns:
        (token matrix [context_length x d], positions, valid mask)

    Raises:
        CapacityError: if 1 + |V| + |U| > context_length
    """
    if ts.n_slots > context_length:
        raise CapacityError(ts.sample_id, ts.n_slots, context_length)
    d = width if width is not None else ts.d
    tokens = np.zeros((context_length, d), dtype=np.float64)
    if ts.l.shape[0] == d:
        tokens[0] = ts.l
    n, m = ts.n_tangible, ts.n_intangible
    tokens[1:1 + n] = ts.V
    tokens[1 + n:1 + n + m] = ts.U

    positions = [TokenPosition(TokenKind.IMAGE)]
    positions += [TokenPosition(TokenKind.TANGIBLE, j) for j in range(n)]
    positions += [TokenPosition(TokenKind.INTANGIBLE, c) for c in range(m)]
    positions += [TokenPosition(TokenKind.PAD)] * (context_length - ts.n_slots)

    valid_mask = np.zeros(context_length, dtype=bool)
    valid_mask[:ts.n_slots] = True
    return tokens, positions, valid_mask


def unpack(tokens: np.ndarray, positions: list[TokenPosition]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of pack: drop PAD rows and regroup by kind."""
    l = tokens[[i for i, p in enumerate(positions) if p.kind is TokenKind.IMAGE][0]]
    V = tokens[[i for i, p in enumerate(positions) if p.kind is TokenKind.TANGIBLE]]
    U = tokens[[i for i, p in enumerate(positions) if p.kind is TokenKind.INTANGIBLE]]
    return l, V, U


def kind_ids(positions: list[TokenPosition]) -> np.ndarray:
    """Per-position kind as an int array: 0 IMAGE, 1 TANGIBLE, 2 INTANGIBLE, -1 PAD."""
    lookup = {TokenKind.IMAGE: 0, TokenKind.TANGIBLE: 1, TokenKind.INTANGIBLE: 2, TokenKind.PAD: -1}
    return np.array([lookup[p.kind] for p in positions], dtype=np.int64)


# ---------------------------------------------------------------------------
# interchange format

class CorpusHeader(BaseModel):
    model_config = ConfigDict(extra='forbid')
    format: str = FORMAT_VERSION
    d: int = Field(ge=1)
    d_l: Optional[int] = Field(None, ge=1)


class TokenSetRecord(BaseModel):
    """Schema of one corpus line."""
    model_config = ConfigDict(extra='forbid')
    sample_id: str
    d: int = Field(ge=1)
    l: list[float]
    V: list[list[float]]
    U: list[list[float]]
    E: list[tuple[int, int, int]]
    N: dict[int, list[int]]
    caption: list[int]
    extra_captions: list[list[int]] = Field(default_factory=list)

    def to_token_set(self) -> TokenSet:
        n = len(self.V)
        neighbors = tuple(tuple(self.N.get(a, ())) for a in range(n))
        extra_keys = sorted(set(self.N) - set(range(n)))
        if extra_keys:
            raise TokenSetValidationError(self.sample_id, f'neighbors[{extra_keys[0]}]',
                                          f'tangible index outside [0, {n})')
        return TokenSet(
            sample_id=self.sample_id,
            l=np.array(self.l, dtype=np.float64),
            V=np.array(self.V, dtype=np.float64).reshape(n, self.d) if n else np.zeros((0, self.d)),
            U=np.array(self.U, dtype=np.float64).reshape(len(self.U), self.d) if self.U else np.zeros((0, self.d)),
            triplets=tuple(self.E),
            neighbors=neighbors,
            caption=tuple(self.caption),
            extra_captions=tuple(tuple(c) for c in self.extra_captions),
        )

    @classmethod
    def from_token_set(cls, ts: TokenSet, d: int) -> dict:
        record = {
            'sample_id': ts.sample_id,
            'd': d,
            'l': ts.l.tolist(),
            'V': ts.V.tolist(),
            'U': ts.U.tolist(),
            'E': [list(t) for t in ts.triplets],
            'N': {str(a): list(nb) for a, nb in enumerate(ts.neighbors) if nb},
            'caption': list(ts.caption),
        }
        if ts.extra_captions:
            record['extra_captions'] = [list(c) for c in ts.extra_captions]
        return record


def _open_for_write(path: Path):
    if path.suffix == '.gz':
        # mtime=0 keeps gzip output byte-identical across runs
        raw = open(path, 'wb')
        return io.TextIOWrapper(gzip.GzipFile(filename='', mode='wb', fileobj=raw, mtime=0),
                                encoding='utf-8', newline='\n')
    return open(path, 'w', encoding='utf-8', newline='\n')


def _numbered_lines(path: Path) -> Iterator[tuple[int, str]]:
    """Decoded lines with 1-based numbers; undecodable bytes or a broken gzip stream become CorpusParseError."""
    opener = gzip.open if path.suffix == '.gz' else open
    line_no = 0
    with opener(path, 'rb') as f:
        while True:
            try:
                raw = f.readline()
            except (EOFError, OSError, zlib.error) as e:
                raise CorpusParseError(line_no + 1, '<encoding>', f'unreadable compressed data: {e}') from e
            if not raw:
                return
            line_no += 1
            try:
                text = raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise CorpusParseError(line_no, '<encoding>', f'invalid UTF-8 at byte {e.start}') from e
            yield line_no, text


def _loc(error: dict) -> str:
    return '.'.join(str(part) for part in error.get('loc', ())) or '<record>'


def read_corpus(
    path,
    start: int = 0,
    stop: Optional[int] = None,
    warnings: Optional[list[str]] = None,
) -> Iterator[TokenSet]:
    """
    Stream validated token sets from a corpus file.

    Args:
        path: corpus file (``.gz`` suffix means gzip)
        start, stop: record offsets (header excluded) to read
        warnings: optional list collecting validation warnings

    Raises:
        CorpusParseError: schema violation, with line number and field
        TokenSetValidationError: invariant violation, with sample_id and field
    """
    path = Path(path)
    if not path.exists():
        raise PathError(path, f"corpus not found: {path}")
    header: Optional[CorpusHeader] = None
    index = 0
    for line_no, line in _numbered_lines(path):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusParseError(line_no, '<json>', str(e)) from e
        if not isinstance(payload, dict):
            raise CorpusParseError(line_no, '<record>', 'expected a JSON object')
        if 'header' in payload:
            if header is not None or index:
                raise CorpusParseError(line_no, 'header', 'header must be the first line')
            try:
                header = CorpusHeader.model_validate(payload['header'])
            except ValidationError as e:
                first = e.errors()[0]
                raise CorpusParseError(line_no, 'header.' + _loc(first), first['msg']) from e
            continue
        if index < start:
            index += 1
            continue
        if stop is not None and index >= stop:
            break
        index += 1
        try:
            record = TokenSetRecord.model_validate(payload)
        except ValidationError as e:
            first = e.errors()[0]
            raise CorpusParseError(line_no, _loc(first), first['msg']) from e
        if header is not None and record.d != header.d:
            raise CorpusParseError(line_no, 'd', f'{record.d} differs from header d={header.d}')
        if any(len(row) != record.d for row in record.V):
            bad = next(i for i, row in enumerate(record.V) if len(row) != record.d)
            raise CorpusParseError(line_no, f'V.{bad}', f'expected {record.d} values')
        if any(len(row) != record.d for row in record.U):
            bad = next(i for i, row in enumerate(record.U) if len(row) != record.d)
            raise CorpusParseError(line_no, f'U.{bad}', f'expected {record.d} values')
        ts = record.to_token_set()
        d_l = header.d_l if header is not None and header.d_l else record.d
        for message in validate_token_set(ts, d=record.d, d_l=d_l):
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
        yield ts


def load_corpus(path, warnings: Optional[list[str]] = None) -> list[TokenSet]:
    corpus = list(read_corpus(path, warnings=warnings))
    logger.info(f"Loaded corpus | path={path}, records={len(corpus)}")
    return corpus


def write_corpus(
    token_sets: Iterable[TokenSet],
    path,
    d: Optional[int] = None,
    d_l: Optional[int] = None,
) -> int:
    """
    Write token sets in the interchange format.

    Floats are written with Python's shortest round-trip repr, so reading
    back reproduces every value bit for bit.

    Returns:
        Number of records written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with _open_for_write(path) as f:
        for ts in token_sets:
            width = d if d is not None else ts.d
            if count == 0:
                header = CorpusHeader(d=width, d_l=d_l if d_l is not None else int(ts.l.shape[0]))
                f.write(json.dumps({'header': header.model_dump()}) + '\n')
            f.write(json.dumps(TokenSetRecord.from_token_set(ts, width)) + '\n')
            count += 1
    logger.info(f"Wrote corpus | path={path}, records={count}")
    return count
