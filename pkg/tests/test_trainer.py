import json
import math
from dataclasses import replace

import numpy as np
import pytest

from app.core.config import TrainConfig
from app.core.errors import ContractViolation, DimensionError, NonFiniteGradientError, TrainingDivergedError
from app.services import numcore as nc
from app.services.checkpoint import load_checkpoint
from app.services.encoder import WEIGHT_ENCODING_PATH, ModelParams
from app.services.rankmatrix import CALL_COUNTS
from app.services.trainer import (
    Trainer,
    contrastive_loss,
    init_optimizer_state,
    lr_at,
    read_metrics,
    sweep_learning_rates,
    train,
    update_params,
)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tau_for(scale):
    return nc.Tensor(np.array(math.log(scale)), requires_grad=True)


# loss

def test_single_pair_loss_is_zero(rng):
    s = nc.Tensor(unit_rows(rng.normal(size=(1, 4))))
    t = nc.Tensor(unit_rows(rng.normal(size=(1, 4))))
    assert contrastive_loss(s, t, tau_for(10.0)).item() == 0.0


def test_orthonormal_match_at_max_scale():
    eye = nc.Tensor(np.eye(4))
    assert contrastive_loss(eye, eye, tau_for(100.0)).item() < 1e-8


def test_logit_scale_is_clamped():
    eye = nc.Tensor(np.eye(3))
    capped = contrastive_loss(eye, eye, tau_for(100.0)).item()
    assert contrastive_loss(eye, eye, tau_for(1e6)).item() == pytest.approx(capped, rel=1e-9)


def test_loss_is_invariant_to_joint_permutation(rng):
    S = unit_rows(rng.normal(size=(6, 5)))
    T = unit_rows(rng.normal(size=(6, 5)))
    perm = rng.permutation(6)
    a = contrastive_loss(nc.Tensor(S), nc.Tensor(T), tau_for(20.0)).item()
    b = contrastive_loss(nc.Tensor(S[perm]), nc.Tensor(T[perm]), tau_for(20.0)).item()
    assert a >= 0.0
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_rejects_unnormalized_rows(rng):
    S = nc.Tensor(unit_rows(rng.normal(size=(2, 3))))
    with pytest.raises(ContractViolation):
        contrastive_loss(S, nc.Tensor(np.ones((2, 3))), tau_for(10.0))


def test_loss_rejects_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        contrastive_loss(nc.Tensor(np.eye(3)), nc.Tensor(np.eye(2, 3)), tau_for(10.0))


def test_loss_gradients(rng):
    raw_s = nc.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    raw_t = nc.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    tau = tau_for(1 / 0.07)
    report = nc.grad_check(
        lambda: contrastive_loss(nc.l2_normalize_lastdim(raw_s), nc.l2_normalize_lastdim(raw_t), tau),
        {'S': raw_s, 'T': raw_t, 'tau': tau},
    )
    assert report.passed, report


# schedule and optimizer

def test_schedule_shape():
    lr, total, warmup = 1e-3, 100, 10
    assert lr_at(0, total, warmup, lr) == 0.0
    assert lr_at(5, total, warmup, lr) == pytest.approx(lr / 2)
    assert lr_at(warmup, total, warmup, lr) == pytest.approx(lr)
    assert lr_at(total - 1, total, warmup, lr) < 1e-3 * lr
    assert lr_at(total, total, warmup, lr) == pytest.approx(0.0, abs=1e-18)


def test_schedule_without_warmup_starts_at_base():
    assert lr_at(0, 10, 0, 0.5) == 0.5


@pytest.mark.parametrize('total, warmup', [(2, 0), (3, 1), (5, 2), (12, 10), (7, 0)])
def test_schedule_ends_at_zero_for_short_spans(total, warmup):
    lr = 0.01
    assert lr_at(warmup, total, warmup, lr) == pytest.approx(lr)
    assert lr_at(total - 1, total, warmup, lr) < 1e-3 * lr
    assert all(lr_at(s + 1, total, warmup, lr) <= lr_at(s, total, warmup, lr) for s in range(warmup, total - 1))


def test_single_step_after_warmup_keeps_base_lr():
    assert lr_at(0, 1, 0, 0.5) == 0.5
    assert lr_at(2, 3, 2, 0.5) == 0.5
    assert lr_at(3, 3, 2, 0.5) == 0.0


def scalar_params(path='w.weight', value=0.5):
    return ModelParams({path: nc.Tensor(np.array(value), requires_grad=True)})


def test_zero_gradient_leaves_params_unchanged():
    params = scalar_params()
    update_params(params, {'w.weight': np.array(0.0)}, init_optimizer_state(params), lr=0.1)
    assert params['w.weight'].item() == 0.5


def test_first_step_moves_by_learning_rate():
    params = scalar_params()
    update_params(params, {'w.weight': np.array(1.0)}, init_optimizer_state(params), lr=0.1)
    assert params['w.weight'].item() == pytest.approx(0.4, abs=1e-6)


def test_decoupled_decay_without_gradient():
    params = scalar_params(value=2.0)
    state = init_optimizer_state(params)
    for _ in range(3):
        update_params(params, {'w.weight': None}, state, lr=0.1, weight_decay=0.1)
    assert params['w.weight'].item() == pytest.approx(2.0 * 0.99 ** 3)


def test_no_decay_for_excluded_paths():
    params = scalar_params(path='logit_scale', value=2.0)
    update_params(params, {'logit_scale': None}, init_optimizer_state(params), lr=0.1, weight_decay=0.1)
    assert params['logit_scale'].item() == 2.0


def test_first_weight_entry_never_moves():
    params = ModelParams({WEIGHT_ENCODING_PATH: nc.Tensor(np.zeros(8), requires_grad=True)})
    state = init_optimizer_state(params)
    for _ in range(5):
        update_params(params, {WEIGHT_ENCODING_PATH: np.ones(8)}, state, lr=0.1, weight_decay=0.1)
    a = params[WEIGHT_ENCODING_PATH].data
    assert a[0] == 0.0
    assert np.all(a[1:] < 0)


def test_non_finite_gradient_aborts():
    params = scalar_params()
    with pytest.raises(NonFiniteGradientError) as exc:
        update_params(params, {'w.weight': np.array(np.nan)}, init_optimizer_state(params), lr=0.1)
    assert exc.value.path == 'w.weight'
    assert params['w.weight'].item() == 0.5


# training loop

def test_trailing_single_sample_batch_is_dropped(small_corpus, tiny_config, tmp_path):
    config = TrainConfig(batch_size=4, epochs=1, warmup_epochs=0)
    corpus = small_corpus + small_corpus[:1]
    trainer = Trainer(corpus, config, tiny_config, tmp_path)
    assert trainer.steps_per_epoch == 2
    assert all(len(b) >= 2 for b in trainer.epoch_batches(0))
    assert Trainer(small_corpus + small_corpus[:2], config, tiny_config, tmp_path).steps_per_epoch == 3


def test_caption_choice_stays_in_range(small_corpus, tiny_config, tmp_path):
    corpus = [replace(ts, extra_captions=(ts.caption[:5],)) for ts in small_corpus]
    trainer = Trainer(corpus, TrainConfig(batch_size=4, epochs=1, warmup_epochs=0), tiny_config, tmp_path)
    choice = trainer.caption_choice(0)
    assert set(choice.tolist()) <= {0, 1}
    assert np.array_equal(choice, trainer.caption_choice(0))


def test_zero_epochs_writes_initial_checkpoint(small_corpus, tiny_config, tmp_path):
    config = TrainConfig(batch_size=4, epochs=0, warmup_epochs=0, seed=3)
    result = train(small_corpus, config, tiny_config, tmp_path)
    assert result.steps == 0
    assert result.metrics_path.read_text() == ''
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.step == 0 and ckpt.seed == 3
    from app.services.encoder import init_params
    initial = init_params(tiny_config, seed=3)
    assert all(np.array_equal(ckpt.params[p].data, initial[p].data) for p in initial)


def test_metrics_and_checkpoints(small_corpus, tiny_config, fast_train_config, tmp_path):
    result = train(small_corpus, fast_train_config, tiny_config, tmp_path, val_corpus=small_corpus)
    records = read_metrics(result.metrics_path)
    steps = [r for r in records if r['event'] == 'step']
    evals = [r for r in records if r['event'] == 'eval']
    assert [r['step'] for r in steps] == [0, 1, 2, 3]
    assert steps[0]['lr'] == 0.0
    assert all(math.isfinite(r['loss']) and r['loss'] >= 0 for r in steps)
    assert [r['epoch'] for r in evals] == [0, 1]
    assert {'t2i_top1', 'i2t_top1', 'diag_mean', 'offdiag_mean'} <= set(evals[0])
    assert (tmp_path / 'checkpoints' / 'epoch-0001.npz').exists()
    assert not (tmp_path / 'checkpoints' / 'epoch-0002.npz').exists()
    assert result.checkpoint_path == tmp_path / 'checkpoints' / 'final.npz'
    assert load_checkpoint(result.checkpoint_path).step == 4


def test_same_seed_gives_identical_logs(small_corpus, tiny_config, fast_train_config, tmp_path):
    a = train(small_corpus, fast_train_config, tiny_config, tmp_path / 'a', val_corpus=small_corpus)
    b = train(small_corpus, fast_train_config, tiny_config, tmp_path / 'b', val_corpus=small_corpus)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


def test_resume_reproduces_uninterrupted_run(small_corpus, tiny_config, fast_train_config, tmp_path):
    full = train(small_corpus, fast_train_config, tiny_config, tmp_path / 'full', val_corpus=small_corpus)
    midway = load_checkpoint(tmp_path / 'full' / 'checkpoints' / 'epoch-0001.npz')
    assert midway.epoch == 1 and midway.optimizer is not None
    resumed = train(small_corpus, fast_train_config, tiny_config, tmp_path / 'resumed',
                    val_corpus=small_corpus, resume=midway)
    tail = [r for r in read_metrics(full.metrics_path) if r['epoch'] == 1]
    assert read_metrics(resumed.metrics_path) == tail
    for p, t in full.params.items():
        assert np.array_equal(resumed.params[p].data, t.data)


def test_resume_rejects_other_encoder_shape(small_corpus, tiny_config, fast_train_config, tmp_path):
    full = train(small_corpus, fast_train_config.model_copy(update={'epochs': 1, 'warmup_epochs': 0}),
                 tiny_config, tmp_path)
    trainer = Trainer(small_corpus, fast_train_config, tiny_config.model_copy(update={'context_length': 12}),
                      tmp_path / 'other')
    with pytest.raises(ContractViolation):
        trainer.resume_from(load_checkpoint(full.checkpoint_path))


def test_plain_attention_never_builds_ranks(small_corpus, tiny_config, fast_train_config, tmp_path):
    config = fast_train_config.model_copy(update={'additive_attention': False})
    before = CALL_COUNTS['build_ranks']
    train(small_corpus, config, tiny_config, tmp_path, val_corpus=small_corpus)
    assert CALL_COUNTS['build_ranks'] == before


def test_additive_attention_builds_ranks_once_per_sample(small_corpus, tiny_config, fast_train_config, tmp_path):
    before = CALL_COUNTS['build_ranks']
    train(small_corpus, fast_train_config, tiny_config, tmp_path)
    assert CALL_COUNTS['build_ranks'] - before == len(small_corpus)


def test_non_finite_loss_dumps_batch(small_corpus, tiny_config, fast_train_config, tmp_path, monkeypatch):
    monkeypatch.setattr(Trainer, 'batch_loss', lambda self, batch: nc.Tensor(np.array(np.nan), requires_grad=True))
    with pytest.raises(TrainingDivergedError) as exc:
        train(small_corpus, fast_train_config, tiny_config, tmp_path)
    dump = json.loads((tmp_path / 'diverged_batch.json').read_text())
    assert dump['step'] == 0
    assert dump['sample_ids'] == exc.value.sample_ids
    assert len(dump['sample_ids']) == fast_train_config.batch_size


def test_learning_rate_sweep_picks_best(small_corpus, tiny_config, tmp_path):
    config = TrainConfig(batch_size=4, epochs=1, warmup_epochs=0, eval_every=1)
    summary = sweep_learning_rates(small_corpus, small_corpus, config, tiny_config, [1e-3, 1e-2], tmp_path)
    assert [run['lr'] for run in summary['runs']] == [1e-3, 1e-2]
    assert summary['best']['t2i_top1'] == max(run['t2i_top1'] for run in summary['runs'])
    assert (tmp_path / 'lr-0.001' / 'checkpoints' / 'final.npz').exists()
    assert json.loads((tmp_path / 'sweep.json').read_text()) == summary


def test_training_reduces_loss(small_corpus, tiny_config, tmp_path):
    config = TrainConfig(batch_size=8, epochs=40, lr=1e-2, warmup_epochs=2, weight_decay=0.0)
    result = train(small_corpus, config, tiny_config, tmp_path)
    assert result.final_loss < result.losses[0]
