"""
Synthetic scene-graph corpus.

Each scene places 2-8 distinct object classes at random 2-D positions and
links some of them with directed (subject, object, predicate) triplets.
Token vectors are noisy class prototypes, neighbor lists follow Euclidean
distance between positions, and the caption spells every triplet out as
"the <subj> <pred> the <obj>" joined by "and", so it decodes back to the
exact triplet multiset.

A share of consecutive scene pairs are direction-ambiguous twins: the second
scene reuses the first one's vectors and positions verbatim and reverses one
triplet. Only the triplet structure tells the two apart.

Generation is keyed by (seed, split, scene index), so any slice of a corpus
can be produced independently.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.core.config import EOS_ID, PAD_ID, SceneConfig
from app.core.errors import ConfigError, VocabularyError
from app.core.logging import get_logger
from app.services.tokens import TokenSet

logger = get_logger(__name__)

OBJECT_NAMES = ('person', 'tree', 'dog', 'rock', 'cat', 'table', 'car', 'bench', 'horse', 'ball', 'cup', 'kite')
PREDICATE_NAMES = ('beside', 'sits_on', 'holds', 'rides', 'under', 'behind', 'looks_at', 'carries')

THE_ID = 2
AND_ID = 3
FIRST_CONTENT_ID = 4

SPLITS = {'train': 0, 'val': 1}
GROUND_TRUTH_FORMAT = 'semtok-ground-truth/1'
WORD_ORDER_SHUFFLES = 4

# RNG stream tags, so prototypes, pairing decisions and scenes never share draws
_PROTOTYPE_STREAM = 101
_PAIRING_STREAM = 202
_SWAP_STREAM = 303
_WORD_ORDER_STREAM = 404
_MAX_REJECTIONS = 100_000


# ---------------------------------------------------------------------------
# caption grammar

@dataclass(frozen=True)
class CaptionGrammar:
    """
    Word ids: 0 PAD, 1 EOS, 2 "the", 3 "and", then object names, then
    predicate names.
    """
    object_names: tuple[str, ...]
    predicate_names: tuple[str, ...]

    @classmethod
    def for_sizes(cls, n_objects: int, n_predicates: int) -> CaptionGrammar:
        objects = tuple(OBJECT_NAMES[k] if k < len(OBJECT_NAMES) else f'object_{k}' for k in range(n_objects))
        predicates = tuple(PREDICATE_NAMES[k] if k < len(PREDICATE_NAMES) else f'relation_{k}'
                           for k in range(n_predicates))
        return cls(objects, predicates)

    @property
    def vocabulary(self) -> list[str]:
        return ['<pad>', '<eos>', 'the', 'and', *self.object_names, *self.predicate_names]

    @property
    def size(self) -> int:
        return FIRST_CONTENT_ID + len(self.object_names) + len(self.predicate_names)

    def object_id(self, cls_index: int) -> int:
        return FIRST_CONTENT_ID + cls_index

    def predicate_id(self, cls_index: int) -> int:
        return FIRST_CONTENT_ID + len(self.object_names) + cls_index

    def encode(self, triplets: Sequence[tuple[int, int, int]]) -> list[int]:
        """Caption ids for (subject class, object class, predicate class) triplets, in order."""
        ids: list[int] = []
        for k, (s, o, p) in enumerate(triplets):
            if k:
                ids.append(AND_ID)
            ids += [THE_ID, self.object_id(s), self.predicate_id(p), THE_ID, self.object_id(o)]
        return ids

    def decode(self, ids: Sequence[int]) -> list[tuple[int, int, int]]:
        """
        Recover the class triplets of a caption.

        Raises:
            VocabularyError: if the ids do not follow the grammar
        """
        ids = [i for i in ids if i not in (PAD_ID, EOS_ID)]
        n_obj = len(self.object_names)
        triplets = []
        pos = 0
        while pos < len(ids):
            if triplets:
                if ids[pos] != AND_ID:
                    raise VocabularyError(f"expected 'and' at position {pos}, got id {ids[pos]}")
                pos += 1
            clause = ids[pos:pos + 5]
            if len(clause) != 5 or clause[0] != THE_ID or clause[3] != THE_ID:
                raise VocabularyError(f"malformed clause at position {pos}: {clause}")
            s, p, o = clause[1] - FIRST_CONTENT_ID, clause[2] - FIRST_CONTENT_ID - n_obj, clause[4] - FIRST_CONTENT_ID
            if not (0 <= s < n_obj and 0 <= o < n_obj and 0 <= p < len(self.predicate_names)):
                raise VocabularyError(f"clause at position {pos} does not name object-predicate-object")
            triplets.append((s, o, p))
            pos += 5
        return triplets

    def ids(self, words: Sequence[str]) -> list[int]:
        lookup = {w: i for i, w in enumerate(self.vocabulary)}
        try:
            return [lookup[w] for w in words]
        except KeyError as e:
            raise VocabularyError(f"unknown word {e.args[0]!r}") from e

    def words(self, ids: Sequence[int]) -> str:
        vocab = self.vocabulary
        return ' '.join(vocab[i] if 0 <= i < len(vocab) else f'<{i}>' for i in ids)


# ---------------------------------------------------------------------------
# scenes

def _prototypes(n: int, d: int, max_cosine: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors whose pairwise cosine similarity stays below max_cosine (rejection-sampled)."""
    accepted: list[np.ndarray] = []
    for _ in range(_MAX_REJECTIONS):
        if len(accepted) == n:
            break
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(float(v @ u) < max_cosine for u in accepted):
            accepted.append(v)
    if len(accepted) < n:
        raise ConfigError('scenes.max_cosine', f'could not place {n} prototypes of width {d} below cosine {max_cosine}')
    return np.stack(accepted)


@dataclass(frozen=True)
class SceneSpec:
    """Vocabularies with their fixed prototype vectors plus the per-scene sampling ranges."""
    config: SceneConfig
    object_base: np.ndarray
    predicate_base: np.ndarray
    grammar: CaptionGrammar

    @classmethod
    def from_config(cls, config: SceneConfig) -> SceneSpec:
        rng = np.random.default_rng([config.seed, _PROTOTYPE_STREAM])
        base = _prototypes(config.n_object_classes + config.n_predicate_classes, config.d, config.max_cosine, rng)
        return cls(
            config=config,
            object_base=base[:config.n_object_classes],
            predicate_base=base[config.n_object_classes:],
            grammar=CaptionGrammar.for_sizes(config.n_object_classes, config.n_predicate_classes),
        )

    @property
    def d(self) -> int:
        return self.config.d


@dataclass(frozen=True)
class Scene:
    """Structure of one scene; ``triplets`` index objects and predicate slots (one slot per triplet)."""
    sample_id: str
    object_classes: tuple[int, ...]
    positions: np.ndarray
    triplets: tuple[tuple[int, int, int], ...]
    predicate_classes: tuple[int, ...]
    twin_of: Optional[str] = None

    def class_triplets(self) -> list[tuple[int, int, int]]:
        return [(self.object_classes[s], self.object_classes[o], self.predicate_classes[c])
                for s, o, c in self.triplets]


def nearest_neighbors(positions: np.ndarray, k: int = 4) -> tuple[tuple[int, ...], ...]:
    """Up to k nearest other objects by Euclidean distance, nearest first (ties by index)."""
    positions = np.asarray(positions, dtype=np.float64)
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    result = []
    for a in range(len(positions)):
        order = [int(b) for b in np.argsort(dist[a], kind='stable') if b != a]
        result.append(tuple(order[:k]))
    return tuple(result)


def _sample_scene(spec: SceneSpec, sample_id: str, rng: np.random.Generator) -> Scene:
    cfg = spec.config
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = tuple(int(c) for c in rng.choice(cfg.n_object_classes, size=n, replace=False))
    positions = rng.random((n, 2))
    while len({tuple(p) for p in positions}) < n:
        positions = rng.random((n, 2))

    # unordered pairs, so no triplet ever has its reverse in the same scene
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    m = min(int(rng.integers(cfg.min_triplets, cfg.max_triplets + 1)), len(pairs))
    chosen = rng.choice(len(pairs), size=m, replace=False)
    triplets = []
    for c, pair_index in enumerate(chosen):
        a, b = pairs[int(pair_index)]
        s, o = (a, b) if rng.random() < 0.5 else (b, a)
        triplets.append((s, o, c))
    predicates = tuple(int(p) for p in rng.integers(cfg.n_predicate_classes, size=m))
    return Scene(sample_id, classes, positions, tuple(triplets), predicates)


def _twin(scene: Scene, sample_id: str, rng: np.random.Generator) -> Scene:
    k = int(rng.integers(len(scene.triplets)))
    triplets = list(scene.triplets)
    s, o, c = triplets[k]
    triplets[k] = (o, s, c)
    return Scene(sample_id, scene.object_classes, scene.positions, tuple(triplets), scene.predicate_classes,
                 twin_of=scene.sample_id)


def realize(scene: Scene, spec: SceneSpec, rng: np.random.Generator) -> TokenSet:
    """Draw the token vectors of a scene and attach its caption."""
    sigma = spec.config.sigma
    d = spec.d
    n, m = len(scene.object_classes), len(scene.predicate_classes)
    V = spec.object_base[list(scene.object_classes)] + sigma * rng.standard_normal((n, d))
    U = spec.predicate_base[list(scene.predicate_classes)] + sigma * rng.standard_normal((m, d))
    # global summary stand-in: noisy mean of the object vectors
    l = V.mean(axis=0) + sigma * rng.standard_normal(d)
    return TokenSet(
        sample_id=scene.sample_id,
        l=l,
        V=V,
        U=U,
        triplets=scene.triplets,
        neighbors=nearest_neighbors(scene.positions),
        caption=tuple(spec.grammar.encode(scene.class_triplets())),
    )


def _scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], index])


def is_twin_index(seed: int, split: str, index: int, rate: float) -> bool:
    """Odd indices are the second half of an ambiguous pair with probability ``rate``."""
    if index % 2 == 0:
        return False
    return bool(np.random.default_rng([seed, SPLITS[split], index // 2, _PAIRING_STREAM]).random() < rate)


def sample_id_for(split: str, index: int) -> str:
    return f'{split}-{index:06d}'


@dataclass
class GeneratedCorpus:
    token_sets: list[TokenSet]
    scenes: list[Scene]


def generate_scene(spec: SceneSpec, seed: int, index: int, split: str = 'train') -> tuple[Scene, TokenSet]:
    """One scene and its tokens, a pure function of (seed, split, index)."""
    rate = spec.config.ambiguous_rate
    if is_twin_index(seed, split, index, rate):
        base_rng = _scene_rng(seed, split, index - 1)
        base = _sample_scene(spec, sample_id_for(split, index - 1), base_rng)
        base_ts = realize(base, spec, base_rng)
        scene = _twin(base, sample_id_for(split, index), _scene_rng(seed, split, index))
        ts = TokenSet(
            sample_id=scene.sample_id,
            l=base_ts.l,
            V=base_ts.V,
            U=base_ts.U,
            triplets=scene.triplets,
            neighbors=base_ts.neighbors,
            caption=tuple(spec.grammar.encode(scene.class_triplets())),
        )
        return scene, ts
    rng = _scene_rng(seed, split, index)
    scene = _sample_scene(spec, sample_id_for(split, index), rng)
    return scene, realize(scene, spec, rng)


def generate(n_scenes: int, spec: SceneSpec, seed: int, split: str = 'train') -> GeneratedCorpus:
    """Generate ``n_scenes`` scenes of one split."""
    scenes, token_sets = [], []
    for index in range(n_scenes):
        scene, ts = generate_scene(spec, seed, index, split)
        scenes.append(scene)
        token_sets.append(ts)
    logger.debug(f"Generated scenes | split={split}, n={n_scenes}, "
                 f"twins={sum(s.twin_of is not None for s in scenes)}")
    return GeneratedCorpus(token_sets, scenes)


# ---------------------------------------------------------------------------
# relation swaps

@dataclass(frozen=True)
class SwapPair:
    correct: tuple[int, ...]
    swapped: tuple[int, ...]
    triplet_index: int


def make_swapped_pair(caption: Sequence[int], grammar: CaptionGrammar, seed: int = 0) -> Optional[SwapPair]:
    """
    Exchange subject and object words of one triplet of a caption.

    The triplet is chosen by ``seed`` among those with distinct subject and
    object words. Returns None (skip) when no triplet qualifies.
    """
    triplets = grammar.decode(caption)
    swappable = [k for k, (s, o, _) in enumerate(triplets) if s != o]
    if not swappable:
        return None
    k = swappable[int(np.random.default_rng([seed, _SWAP_STREAM]).integers(len(swappable)))]
    swapped = list(triplets)
    s, o, p = swapped[k]
    swapped[k] = (o, s, p)
    return SwapPair(tuple(grammar.encode(triplets)), tuple(grammar.encode(swapped)), k)


@dataclass(frozen=True)
class WordOrderSet:
    correct: tuple[int, ...]
    shuffled: tuple[tuple[int, ...], ...]


def _distinct_orderings(words: Sequence[int]) -> int:
    count = math.factorial(len(words))
    for c in Counter(words).values():
        count //= math.factorial(c)
    return count


def make_word_order_set(caption: Sequence[int], seed: int = 0, n_shuffled: int = WORD_ORDER_SHUFFLES) -> Optional[WordOrderSet]:
    """
    Shuffle the words of a caption into ``n_shuffled`` distractors.

    Every distractor differs from the caption and from the other
    distractors. Returns None (skip) when the caption has too few distinct
    orderings.
    """
    words = tuple(int(i) for i in caption if i not in (PAD_ID, EOS_ID))
    if _distinct_orderings(words) < n_shuffled + 1:
        return None
    rng = np.random.default_rng([seed, _WORD_ORDER_STREAM])
    seen = {words}
    shuffled: list[tuple[int, ...]] = []
    while len(shuffled) < n_shuffled:
        candidate = tuple(int(i) for i in rng.permutation(words))
        if candidate not in seen:
            seen.add(candidate)
            shuffled.append(candidate)
    return WordOrderSet(words, tuple(shuffled))


# ---------------------------------------------------------------------------
# ground truth sidecar

def ground_truth(splits: dict[str, GeneratedCorpus], spec: SceneSpec, seed: int) -> dict:
    """Scene -> triplets (as words), twin links, one relation-swap pair and word-order shuffles per scene."""
    grammar = spec.grammar
    records: dict[str, dict] = {}
    for split, corpus in splits.items():
        for index, (scene, ts) in enumerate(zip(corpus.scenes, corpus.token_sets)):
            swap = make_swapped_pair(ts.caption, grammar, seed=seed * 1_000_003 + index)
            word_order = make_word_order_set(ts.caption, seed=seed * 1_000_003 + index)
            records[scene.sample_id] = {
                'split': split,
                'triplets': [[grammar.object_names[s], grammar.predicate_names[p], grammar.object_names[o]]
                             for s, o, p in scene.class_triplets()],
                'twin_of': scene.twin_of,
                'swap': None if swap is None else {
                    'correct': list(swap.correct),
                    'swapped': list(swap.swapped),
                    'triplet_index': swap.triplet_index,
                },
                'word_order': None if word_order is None else {
                    'correct': list(word_order.correct),
                    'shuffled': [list(c) for c in word_order.shuffled],
                },
            }
    return {
        'format': GROUND_TRUTH_FORMAT,
        'seed': seed,
        'vocabulary': grammar.vocabulary,
        'scenes': records,
    }


def write_ground_truth(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def read_ground_truth(path) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def twin_pairs(ground: dict, split: Optional[str] = None) -> list[tuple[str, str]]:
    """(base sample id, twin sample id) for every direction-ambiguous pair."""
    return [(rec['twin_of'], sid) for sid, rec in sorted(ground['scenes'].items())
            if rec['twin_of'] is not None and (split is None or rec['split'] == split)]


# ---------------------------------------------------------------------------
# fixtures for inspect and the property suite

def demo_token_set(spec: Optional[SceneSpec] = None) -> TokenSet:
    """The person-beside-tree scene: two objects, one relation, noise-free prototypes."""
    spec = spec or SceneSpec.from_config(SceneConfig())
    names = spec.grammar.object_names
    person, tree = names.index('person'), names.index('tree')
    beside = spec.grammar.predicate_names.index('beside')
    V = spec.object_base[[person, tree]]
    return TokenSet(
        sample_id='demo-person-beside-tree',
        l=V.mean(axis=0),
        V=V,
        U=spec.predicate_base[[beside]],
        triplets=((0, 1, 0),),
        neighbors=((1,), (0,)),
        caption=tuple(spec.grammar.encode([(person, tree, beside)])),
    )


def random_token_set(
    rng: np.random.Generator,
    d: int,
    max_tangible: int = 10,
    max_intangible: int = 6,
    sample_id: str = 'random',
) -> TokenSet:
    """Arbitrary valid token set (random graph, random neighbor lists) for oracle checks."""
    n = int(rng.integers(0, max_tangible + 1))
    m = int(rng.integers(0, max_intangible + 1)) if n >= 2 else 0
    triplets = []
    for c in range(m):
        if rng.random() < 0.8:
            s, o = (int(x) for x in rng.choice(n, size=2, replace=False))
            triplets.append((s, o, c))
    neighbors = []
    for a in range(n):
        others = [b for b in range(n) if b != a]
        k = int(rng.integers(0, min(4, len(others)) + 1))
        neighbors.append(tuple(int(b) for b in rng.permutation(others)[:k]))
    return TokenSet(
        sample_id=sample_id,
        l=rng.standard_normal(d),
        V=rng.standard_normal((n, d)),
        U=rng.standard_normal((m, d)),
        triplets=tuple(triplets),
        neighbors=tuple(neighbors),
    )
