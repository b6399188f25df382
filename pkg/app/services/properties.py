"""
Property suite behind ``verify``.

Each check builds its own seeded inputs, returns a PropertyResult and never
raises; an exception inside a check is reported as a failure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from app.core.config import EncoderConfig, tiny_encoder_config
from app.core.errors import ConfigError
from app.core.logging import get_logger
from app.services import numcore as nc
from app.services.encoder import (
    LOGIT_SCALE_PATH,
    ModelParams,
    encode_caption_batch,
    encode_image,
    encode_image_batch,
    init_params,
    make_caption_batch,
    make_image_batch,
    multi_head_attention,
)
from app.services.rankmatrix import WeightEncoding, build_ranks, oracle_ranks
from app.services.synthcorpus import demo_token_set, random_token_set
from app.services.tokens import TokenSet, pack
from app.services.trainer import contrastive_loss

logger = get_logger(__name__)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _weighted_sum(t: nc.Tensor, weights: np.ndarray) -> nc.Tensor:
    return nc.sum_(nc.mul(t, weights))


# ---------------------------------------------------------------------------
# numcore

def check_op_gradients(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Every differentiable op against central differences (inputs in [-2, 2], step 1e-6)."""
    rng = np.random.default_rng(seed)

    def leaf(*shape, positive=False):
        data = rng.uniform(-2, 2, size=shape)
        if positive:
            data = np.abs(data) + 0.5
        return nc.Tensor(data, requires_grad=True)

    mask = np.array([[True, True, False, True], [True, False, True, True], [False, True, True, True]])
    cases: dict[str, tuple[Callable[..., nc.Tensor], list[nc.Tensor]]] = {
        'add': (nc.add, [leaf(3, 4), leaf(4)]),
        'sub': (nc.sub, [leaf(3, 4), leaf(3, 1)]),
        'mul': (nc.mul, [leaf(3, 4), leaf(3, 4)]),
        'div': (nc.div, [leaf(3, 4), leaf(3, 4, positive=True)]),
        'exp': (nc.exp, [leaf(3, 4)]),
        'ln': (nc.ln, [leaf(3, 4, positive=True)]),
        'sqrt': (nc.sqrt, [leaf(3, 4, positive=True)]),
        'relu': (nc.relu, [leaf(3, 4)]),
        'matmul': (nc.matmul, [leaf(2, 3, 4), leaf(4, 2)]),
        'sum': (lambda x: nc.sum_(x, axis=1, keepdims=True), [leaf(3, 4)]),
        'mean': (lambda x: nc.mean(x, axis=0), [leaf(3, 4)]),
        'transpose': (lambda x: nc.transpose(x, (1, 0, 2)), [leaf(2, 3, 4)]),
        'reshape': (lambda x: nc.reshape(x, (4, 3)), [leaf(3, 4)]),
        'concat': (lambda x, y: nc.concat([x, y], axis=0), [leaf(2, 4), leaf(3, 4)]),
        'slice': (lambda x: nc.slice_(x, 1, 1, 3), [leaf(3, 4)]),
        'take': (lambda x: nc.take(x, np.array([[0, 2], [2, 1]])), [leaf(3, 4)]),
        'cumsum': (nc.cumsum_lastdim, [leaf(3, 4)]),
        'softmax': (lambda x: nc.softmax_lastdim(x, mask), [leaf(3, 4)]),
        'log_softmax': (nc.log_softmax_lastdim, [leaf(3, 4)]),
        'layer_norm': (nc.layer_norm, [leaf(3, 4), leaf(4), leaf(4)]),
        'l2_normalize': (nc.l2_normalize_lastdim, [leaf(3, 4)]),
    }
    failures, worst = [], 0.0
    for name, (op, inputs) in cases.items():
        out_shape = op(*inputs).shape
        weights = rng.uniform(-1, 1, size=out_shape)
        report = nc.grad_check(lambda: _weighted_sum(op(*inputs), weights), inputs, step=1e-6, tol=1e-5)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f'{name} ({report.max_rel_error:.2e})')
    detail = f'{len(cases)} ops, worst rel. error {worst:.2e}'
    return PropertyResult('op_gradients', not failures, detail + (f'; failing: {", ".join(failures)}' if failures else ''))


def check_softmax_law(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Rows sum to 1 within 1e-12 and masked entries are exactly 0."""
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5, size=(50, 7))
    mask = rng.random((50, 7)) < 0.6
    mask[np.arange(50), rng.integers(7, size=50)] = True
    p = nc.softmax_lastdim(nc.Tensor(x), mask).data
    row_error = float(np.max(np.abs(p.sum(axis=-1) - 1.0)))
    masked_ok = bool(np.all(p[~mask] == 0.0))
    stable = nc.softmax_lastdim(nc.Tensor(np.array([1000.0, 0.0]))).data
    ok = row_error <= 1e-12 and masked_ok and abs(stable[0] - 1.0) <= 1e-12
    return PropertyResult('softmax_law', ok, f'max row error {row_error:.1e}, masked zeros {masked_ok}')


# ---------------------------------------------------------------------------
# rankmatrix

def check_weight_table_law(seed: int = 0, quick: bool = False) -> PropertyResult:
    """cumsum(exp(a)) is strictly increasing with steps exp(a[r+1]); a = 0 gives 1..8."""
    rng = np.random.default_rng(seed)
    base = WeightEncoding().weight_table().data
    if not np.array_equal(base, np.arange(1.0, 9.0)):
        return PropertyResult('weight_table_law', False, f'a = 0 gives {base.tolist()}')
    for _ in range(100):
        a = np.concatenate([[0.0], rng.uniform(-3, 3, size=7)])
        w = WeightEncoding.from_values(a).weight_table().data
        steps = np.diff(w)
        if not (np.all(steps > 0) and np.allclose(steps, np.exp(a[1:]), rtol=1e-12, atol=0)):
            return PropertyResult('weight_table_law', False, f'violated for a={a.tolist()}')
    return PropertyResult('weight_table_law', True, '100 random encodings')


def check_rank_oracle(seed: int = 0, quick: bool = False) -> PropertyResult:
    """build_ranks equals the brute-force oracle on random token sets (|V| <= 10, |U| <= 6)."""
    rng = np.random.default_rng(seed)
    context = 17
    n_sets = 200 if quick else 1000
    for i in range(n_sets):
        ts = random_token_set(rng, d=3, sample_id=f'random-{i}')
        _, positions, _ = pack(ts, context)
        fast = build_ranks(ts, positions, context)
        slow = oracle_ranks(ts, context)
        if not np.array_equal(fast.ranks, slow.ranks):
            return PropertyResult('rank_oracle', False, f'mismatch on set {i}: {fast.nonzero_cells()} vs '
                                                        f'{slow.nonzero_cells()}')
    return PropertyResult('rank_oracle', True, f'{n_sets} random token sets agree')


# ---------------------------------------------------------------------------
# loss and full model

def _tiny_samples(config: EncoderConfig, rng: np.random.Generator, n: int) -> list[TokenSet]:
    samples = []
    max_tangible = min(4, config.context_length - 3)
    while len(samples) < n:
        ts = random_token_set(rng, config.d_token, max_tangible=max_tangible, max_intangible=2,
                              sample_id=f'tiny-{len(samples)}')
        if ts.n_slots > config.context_length or ts.n_tangible < 2:
            continue
        ts = replace(ts, l=rng.standard_normal(config.d_l),
                     caption=tuple(int(i) for i in rng.integers(2, config.vocab_size, size=rng.integers(2, 6))))
        samples.append(ts)
    return samples


def check_contrastive_gradients(seed: int = 0, quick: bool = False) -> PropertyResult:
    rng = np.random.default_rng(seed)
    raw_s = nc.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    raw_t = nc.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    tau = nc.Tensor(np.array(np.log(1 / 0.07)), requires_grad=True)

    def loss():
        return contrastive_loss(nc.l2_normalize_lastdim(raw_s), nc.l2_normalize_lastdim(raw_t), tau)

    report = nc.grad_check(loss, {'S': raw_s, 'T': raw_t, 'tau': tau}, tol=1e-5)
    return PropertyResult('contrastive_gradients', report.passed, f'max rel. error {report.max_rel_error:.2e}')


def full_model_loss(params: ModelParams, config: EncoderConfig, samples: list[TokenSet],
                    additive_attention: bool = True) -> Callable[[], nc.Tensor]:
    """Closure recomputing the batch loss from the current parameter values."""
    images = make_image_batch(samples, config, with_ranks=additive_attention)
    captions = make_caption_batch([ts.caption for ts in samples], config)

    def loss() -> nc.Tensor:
        S = encode_image_batch(images, params, config, additive_attention)
        T = encode_caption_batch(captions, params, config)
        return contrastive_loss(S, T, params[LOGIT_SCALE_PATH])

    return loss


def check_full_model_gradients(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Every parameter group of both encoders plus the loss, on the tiny shape."""
    config = tiny_encoder_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    samples = _tiny_samples(config, rng, 3)
    report = nc.grad_check(full_model_loss(params, config, samples), dict(params.items()),
                           tol=1e-4, max_coords=4 if quick else None, seed=seed)
    worst = sorted(report.per_param.items(), key=lambda kv: -kv[1])[:3]
    detail = (f'{report.checked} coordinates, max rel. error {report.max_rel_error:.2e}; worst: '
              + ', '.join(f'{p}={e:.1e}' for p, e in worst))
    return PropertyResult('full_model_gradients', report.passed, detail)


def check_bias_liveness(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Loss gradient reaches a[1..7] whenever ranked cells exist; a[0] never receives one."""
    config = tiny_encoder_config()
    params = init_params(config, seed=seed)
    samples = _tiny_samples(config, np.random.default_rng(seed), 3)
    params.zero_grad()
    full_model_loss(params, config, samples)().backward()
    grad = params.weight_encoding.a.grad
    present = set()
    for ts in samples:
        _, positions, _ = pack(ts, config.context_length)
        present |= {int(r) for r in np.unique(build_ranks(ts, positions, config.context_length).ranks) if r > 0}
    # w[r] feeds every cell of rank >= r, so a[r] is live iff some rank >= r is present
    live = [r for r in range(1, 8) if any(q >= r for q in present)]
    ok = grad is not None and grad[0] == 0.0 and all(grad[r] != 0.0 for r in live)
    return PropertyResult('bias_liveness', ok, f'ranks present {sorted(present)}, grad a = {np.round(grad, 6).tolist()}')


# ---------------------------------------------------------------------------
# structural invariances

def _permuted(ts: TokenSet, rng: np.random.Generator) -> TokenSet:
    """Same scene with tangible and intangible tokens reordered and every index relabeled."""
    pv = rng.permutation(ts.n_tangible)  # new position -> old index
    pu = rng.permutation(ts.n_intangible)
    new_v = {int(old): new for new, old in enumerate(pv)}
    new_u = {int(old): new for new, old in enumerate(pu)}
    neighbors = [()] * ts.n_tangible
    for old, nb in enumerate(ts.neighbors):
        neighbors[new_v[old]] = tuple(new_v[b] for b in nb)
    return replace(
        ts,
        V=ts.V[pv],
        U=ts.U[pu],
        triplets=tuple((new_v[s], new_v[o], new_u[c]) for s, o, c in ts.triplets),
        neighbors=tuple(neighbors),
    )


def check_permutation_invariance(seed: int = 0, quick: bool = False) -> PropertyResult:
    config = tiny_encoder_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    worst = 0.0
    for ts in _tiny_samples(config, rng, 5):
        a = encode_image(ts, params, config)
        b = encode_image(_permuted(ts, rng), params, config)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return PropertyResult('permutation_invariance', worst <= 1e-9, f'max |s - s_perm| = {worst:.1e}')


def check_padding_invariance(seed: int = 0, quick: bool = False) -> PropertyResult:
    """PAD row contents never change s (bit-exact); extra context slack changes it by < 1e-12."""
    config = tiny_encoder_config(context_length=8)
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    samples = _tiny_samples(config, rng, 4)
    batch = make_image_batch(samples, config)
    clean = encode_image_batch(batch, params, config).data
    noisy_tokens = batch.tokens.copy()
    noisy_tokens[~batch.valid_mask] = rng.normal(scale=10, size=noisy_tokens[~batch.valid_mask].shape)
    noisy = encode_image_batch(replace(batch, tokens=noisy_tokens), params, config).data
    exact = bool(np.array_equal(clean, noisy))

    wide = config.model_copy(update={'context_length': 12})
    slack = encode_image_batch(make_image_batch(samples, wide), params, wide).data
    slack_error = float(np.max(np.abs(slack - clean)))
    ok = exact and slack_error <= 1e-12
    return PropertyResult('padding_invariance', ok, f'bit-exact under PAD noise: {exact}; slack error {slack_error:.1e}')


def check_zero_bias_equivalence(seed: int = 0, quick: bool = False) -> PropertyResult:
    """All-zero ranks give exactly the plain (no additive bias) encoder."""
    config = tiny_encoder_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    batch = make_image_batch(_tiny_samples(config, rng, 4), config)
    zeroed = replace(batch, ranks=np.zeros_like(batch.ranks))
    with_bias = encode_image_batch(zeroed, params, config, additive_attention=True).data
    plain = encode_image_batch(batch, params, config, additive_attention=False).data
    error = float(np.max(np.abs(with_bias - plain)))
    return PropertyResult('zero_bias_equivalence', error <= 1e-12, f'max difference {error:.1e}')


def check_bias_monotonicity(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Raising one pre-softmax bias cell by 10 raises that attention probability in every head."""
    config = tiny_encoder_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    T = 5
    x = nc.Tensor(rng.normal(size=(1, T, config.d_model)))
    valid = np.ones((1, T), dtype=bool)
    bias = rng.normal(size=(1, T, T))
    p, q = 1, 3
    raised = bias.copy()
    raised[0, p, q] += 10.0
    prefix = 'image.layers.0.attn'
    before = multi_head_attention(x, nc.Tensor(bias), valid, params, prefix, config.n_heads).probs
    after = multi_head_attention(x, nc.Tensor(raised), valid, params, prefix, config.n_heads).probs
    ok = bool(np.all(after[0, :, p, q] > before[0, :, p, q]))
    return PropertyResult('bias_monotonicity', ok, f'p({p}->{q}) per head {before[0, :, p, q].round(4).tolist()} '
                                                   f'-> {after[0, :, p, q].round(4).tolist()}')


def check_demo_ranks(seed: int = 0, quick: bool = False) -> PropertyResult:
    """Person-beside-tree: person->beside and tree->beside are 6, beside->person and beside->tree are 5."""
    ts = demo_token_set()
    _, positions, _ = pack(ts, 5)
    cells = build_ranks(ts, positions, 5).nonzero_cells()
    expected = {(1, 2): 7, (2, 1): 4, (1, 3): 6, (2, 3): 6, (3, 1): 5, (3, 2): 5}
    return PropertyResult('demo_ranks', cells == expected, f'cells {cells}')


CHECKS: dict[str, Callable[..., PropertyResult]] = {
    'op_gradients': check_op_gradients,
    'softmax_law': check_softmax_law,
    'weight_table_law': check_weight_table_law,
    'rank_oracle': check_rank_oracle,
    'demo_ranks': check_demo_ranks,
    'contrastive_gradients': check_contrastive_gradients,
    'full_model_gradients': check_full_model_gradients,
    'bias_liveness': check_bias_liveness,
    'permutation_invariance': check_permutation_invariance,
    'padding_invariance': check_padding_invariance,
    'zero_bias_equivalence': check_zero_bias_equivalence,
    'bias_monotonicity': check_bias_monotonicity,
}


def run_properties(names: Optional[list[str]] = None, seed: int = 0, quick: bool = False) -> list[PropertyResult]:
    """Run the selected checks (all by default) in a fixed order."""
    unknown = set(names or []) - set(CHECKS)
    if unknown:
        raise ConfigError('verify.only', f"unknown checks: {sorted(unknown)}")
    results = []
    for name, check in CHECKS.items():
        if names and name not in names:
            continue
        started = time.perf_counter()
        try:
            result = check(seed=seed, quick=quick)
        except Exception as e:
            logger.exception(f"Property check crashed | name={name}")
            result = PropertyResult(name, False, f'{type(e).__name__}: {e}')
        result.seconds = time.perf_counter() - started
        level = logger.info if result.passed else logger.error
        level(f"Property {'OK' if result.passed else 'FAILED'} | name={name}, {result.detail}")
        results.append(result)
    return results
