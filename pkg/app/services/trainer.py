"""
Symmetric contrastive training of the image and caption encoders.

AdamW with decoupled weight decay, linear warmup followed by cosine
annealing (both per step), per-epoch shuffling keyed by (seed, epoch), a
JSON-lines metrics log and periodic checkpoints that include optimizer
moments so a resumed run continues exactly where the original left off.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from app.core.config import EncoderConfig, TrainConfig
from app.core.errors import ContractViolation, DimensionError, NonFiniteGradientError, TrainingDivergedError
from app.core.logging import get_logger
from app.services import numcore as nc
from app.services.checkpoint import Checkpoint, OptimizerState, save_checkpoint
from app.services.encoder import (
    LOGIT_SCALE_PATH,
    WEIGHT_ENCODING_PATH,
    CaptionBatch,
    ImageBatch,
    ModelParams,
    PreparedImage,
    VisualTokenModel,
    encode_caption_batch,
    encode_image_batch,
    init_params,
    make_caption_batch,
    prepare_image,
    stack_images,
)
from app.services.tokens import TokenSet

logger = get_logger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8
NORM_TOLERANCE = 1e-6


@dataclass
class Batch:
    images: ImageBatch
    captions: CaptionBatch
    sample_ids: list[str]


# ---------------------------------------------------------------------------
# loss

def contrastive_loss(
    S: nc.Tensor,
    T: nc.Tensor,
    tau: nc.Tensor,
    max_logit_scale: float = 100.0,
) -> nc.Tensor:
    """
    Symmetric cross-entropy over ``exp(tau) * S @ T^T`` with identity targets.

    ``exp(tau)`` is clamped at ``max_logit_scale``.

    Raises:
        ContractViolation: when a row of S or T is not unit-norm within 1e-6
    """
    if S.ndim != 2 or S.shape != T.shape or S.shape[0] < 1:
        raise DimensionError('contrastive_loss', S.shape, T.shape)
    for name, emb in (('S', S), ('T', T)):
        deviation = np.abs(np.linalg.norm(emb.data, axis=1) - 1.0)
        if deviation.max() > NORM_TOLERANCE:
            raise ContractViolation(f"rows of {name} must be unit-norm (max deviation {deviation.max():.2e})")
    n = S.shape[0]
    scale = nc.exp(nc.clamp_max(tau, math.log(max_logit_scale)))
    logits = nc.mul(scale, nc.matmul(S, nc.swap_last(T)))
    targets = np.eye(n)
    image_to_text = nc.neg(nc.mean(nc.sum_(nc.mul(nc.log_softmax_lastdim(logits), targets), axis=-1)))
    text_to_image = nc.neg(nc.mean(nc.sum_(nc.mul(nc.log_softmax_lastdim(nc.swap_last(logits)), targets), axis=-1)))
    return nc.mul(nc.add(image_to_text, text_to_image), 0.5)


# ---------------------------------------------------------------------------
# optimizer and schedule

def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """
    Linear warmup from 0 to base_lr, then cosine annealing that reaches 0 at
    the last step (total_steps - 1). A single post-warmup step keeps base_lr.
    """
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return base_lr if step < total_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={p: np.zeros_like(t.data) for p, t in params.items()},
        v={p: np.zeros_like(t.data) for p, t in params.items()},
    )


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(t.grad ** 2)) for _, t in params.items() if t.grad is not None))
    if total > max_norm:
        factor = max_norm / total
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * factor
    return total


def update_params(
    params: ModelParams,
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = BETAS,
    eps: float = EPS,
) -> ModelParams:
    """
    One AdamW step, in place.

    Decay is decoupled (``p *= 1 - lr * weight_decay``) and skipped for type
    and position embeddings, the temperature, the weight encoding, biases and
    layer-norm affines. ``a[0]`` of the weight encoding never moves.

    Raises:
        NonFiniteGradientError: if any gradient holds NaN or infinity
    """
    for path, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(path)
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for path, tensor in params.items():
        g = grads.get(path)
        g = np.zeros_like(tensor.data) if g is None else np.array(g, dtype=np.float64)
        if path == WEIGHT_ENCODING_PATH:
            g[0] = 0.0
        m = state.m.setdefault(path, np.zeros_like(tensor.data))
        v = state.v.setdefault(path, np.zeros_like(tensor.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and params.decays(path):
            tensor.data *= 1.0 - lr * weight_decay
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        if path == WEIGHT_ENCODING_PATH:
            step[0] = 0.0
        tensor.data -= step
    return params


# ---------------------------------------------------------------------------
# metrics log

class MetricsLogger:
    """Append-only JSON-lines event log (no timestamps, so same-seed runs match byte for byte)."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append or not self.path.exists():
            self.path.write_text('', encoding='utf-8')

    def log(self, **record) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')


def read_metrics(path) -> list[dict]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float('nan')


class Trainer:
    """Owns the parameters, optimizer state and data order of one training run."""

    def __init__(
        self,
        corpus: Sequence[TokenSet],
        train_config: TrainConfig,
        encoder_config: EncoderConfig,
        output_dir,
        val_corpus: Optional[Sequence[TokenSet]] = None,
    ):
        self.corpus = list(corpus)
        self.train_config = train_config
        self.encoder_config = encoder_config
        self.output_dir = Path(output_dir)
        self.val_corpus = list(val_corpus) if val_corpus else []
        self.params = init_params(encoder_config, train_config.seed, train_config.init_temperature)
        self.optimizer = init_optimizer_state(self.params)
        self.step = 0
        self.epoch = 0
        self._prepared: Optional[list[PreparedImage]] = None

    @property
    def steps_per_epoch(self) -> int:
        n, b = len(self.corpus), self.train_config.batch_size
        full, rest = divmod(n, b)
        # a trailing batch of one sample has no negatives; drop it
        return full + (1 if rest >= 2 else 0)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.train_config.epochs

    @property
    def warmup_steps(self) -> int:
        return self.steps_per_epoch * self.train_config.warmup_epochs

    def prepared(self) -> list[PreparedImage]:
        if self._prepared is None:
            with_ranks = self.train_config.additive_attention
            self._prepared = [prepare_image(ts, self.encoder_config, with_ranks) for ts in self.corpus]
            logger.debug(f"Packed corpus | samples={len(self._prepared)}, ranks={with_ranks}")
        return self._prepared

    def resume_from(self, checkpoint: Checkpoint) -> None:
        if checkpoint.config != self.encoder_config:
            raise ContractViolation("checkpoint encoder config differs from the run config")
        self.params = checkpoint.params
        self.optimizer = checkpoint.optimizer or init_optimizer_state(self.params)
        self.step = checkpoint.step
        self.epoch = checkpoint.epoch
        logger.info(f"Resuming | step={self.step}, epoch={self.epoch}")

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        order = np.random.default_rng([self.train_config.seed, epoch]).permutation(len(self.corpus))
        size = self.train_config.batch_size
        return [order[i:i + size] for i in range(0, len(order), size) if len(order[i:i + size]) >= 2]

    def caption_choice(self, epoch: int) -> np.ndarray:
        """Index into each sample's captions for this epoch (uniform, keyed by seed and epoch)."""
        rng = np.random.default_rng([self.train_config.seed, epoch, 1])
        counts = np.array([len(ts.captions) for ts in self.corpus])
        return np.floor(rng.random(len(self.corpus)) * counts).astype(np.int64)

    def make_batch(self, indices: np.ndarray, choice: np.ndarray) -> Batch:
        prepared = self.prepared()
        images = stack_images([prepared[i] for i in indices])
        captions = [self.corpus[i].captions[choice[i]] for i in indices]
        ids = [self.corpus[i].sample_id for i in indices]
        return Batch(images=images, captions=make_caption_batch(captions, self.encoder_config, ids), sample_ids=ids)

    def batch_loss(self, batch: Batch) -> nc.Tensor:
        S = encode_image_batch(batch.images, self.params, self.encoder_config, self.train_config.additive_attention)
        T = encode_caption_batch(batch.captions, self.params, self.encoder_config)
        return contrastive_loss(S, T, self.params[LOGIT_SCALE_PATH], self.train_config.max_logit_scale)

    def _diverged(self, batch: Batch) -> None:
        dump = self.output_dir / 'diverged_batch.json'
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({'step': self.step, 'sample_ids': batch.sample_ids}, indent=2), encoding='utf-8')
        logger.error(f"Non-finite loss | step={self.step}, dump={dump}")
        raise TrainingDivergedError(self.step, batch.sample_ids)

    def train_step(self, batch: Batch, lr: float) -> float:
        self.params.zero_grad()
        loss = self.batch_loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            self._diverged(batch)
        loss.backward()
        if self.train_config.grad_clip is not None:
            clip_gradients(self.params, self.train_config.grad_clip)
        grads = {path: t.grad for path, t in self.params.items()}
        update_params(self.params, grads, self.optimizer, lr, self.train_config.weight_decay)
        return value

    def evaluate(self) -> dict:
        # local import: evaluation depends on this module's siblings, not on the trainer
        from app.services.evaluation import similarity_report

        model = VisualTokenModel(self.encoder_config, self.params, self.train_config.additive_attention)
        report = similarity_report(model.embed_images(self.val_corpus),
                                   model.embed_captions([ts.caption for ts in self.val_corpus]))
        return report.summary()

    def checkpoint(self, name: str) -> Path:
        return save_checkpoint(
            self.output_dir / 'checkpoints' / name,
            self.params,
            self.encoder_config,
            seed=self.train_config.seed,
            step=self.step,
            epoch=self.epoch,
            train_config=self.train_config.model_dump(),
            optimizer=self.optimizer,
        )

    def run(self, metrics_name: str = 'metrics.jsonl') -> TrainResult:
        cfg = self.train_config
        # a resumed run continues the existing log
        metrics = MetricsLogger(self.output_dir / metrics_name, append=self.step > 0)
        losses, evals = [], []
        logger.info(f"Training | samples={len(self.corpus)}, epochs={cfg.epochs}, "
                    f"steps_per_epoch={self.steps_per_epoch}, additive_attention={cfg.additive_attention}")
        while self.epoch < cfg.epochs:
            epoch = self.epoch
            choice = self.caption_choice(epoch)
            epoch_losses = []
            for indices in self.epoch_batches(epoch):
                lr = lr_at(self.step, self.total_steps, self.warmup_steps, cfg.lr)
                loss = self.train_step(self.make_batch(indices, choice), lr)
                metrics.log(event='step', step=self.step, epoch=epoch, lr=lr, loss=loss)
                epoch_losses.append(loss)
                self.step += 1
            self.epoch += 1
            losses.extend(epoch_losses)
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float('nan')
            logger.info(f"Epoch done | epoch={epoch}, step={self.step}, mean_loss={mean_loss:.5f}")

            last = self.epoch == cfg.epochs
            if self.val_corpus and (self.epoch % cfg.eval_every == 0 or last):
                summary = self.evaluate()
                metrics.log(event='eval', epoch=epoch, step=self.step, **summary)
                evals.append({'epoch': epoch, **summary})
                logger.info(f"Validation | epoch={epoch}, t2i_top1={summary['t2i_top1']:.3f}, "
                            f"i2t_top1={summary['i2t_top1']:.3f}")
            if self.epoch % cfg.checkpoint_every == 0 and not last:
                self.checkpoint(f'epoch-{self.epoch:04d}.npz')

        final = self.checkpoint('final.npz')
        return TrainResult(self.params, final, metrics.path, self.step, losses, evals)


def train(
    corpus: Sequence[TokenSet],
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    output_dir,
    val_corpus: Optional[Sequence[TokenSet]] = None,
    resume: Optional[Checkpoint] = None,
    metrics_name: str = 'metrics.jsonl',
) -> TrainResult:
    """Train both encoders and write checkpoints plus the metrics log under output_dir."""
    trainer = Trainer(corpus, train_config, encoder_config, output_dir, val_corpus)
    if resume is not None:
        trainer.resume_from(resume)
    return trainer.run(metrics_name)


def sweep_learning_rates(
    corpus: Sequence[TokenSet],
    val_corpus: Sequence[TokenSet],
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    learning_rates: Sequence[float],
    output_dir,
) -> dict:
    """
    Train once per learning rate and keep the best by validation t2i top-1.

    Returns:
        Summary with per-lr scores and the chosen lr; also written to sweep.json
    """
    output_dir = Path(output_dir)
    results = []
    for lr in learning_rates:
        run_dir = output_dir / f'lr-{lr:g}'
        config = train_config.model_copy(update={'lr': lr})
        result = train(corpus, config, encoder_config, run_dir, val_corpus=val_corpus)
        score = result.evals[-1]['t2i_top1'] if result.evals else float('nan')
        results.append({'lr': lr, 't2i_top1': score, 'checkpoint': str(result.checkpoint_path)})
        logger.info(f"Sweep point | lr={lr:g}, t2i_top1={score:.3f}")
    scored = [r for r in results if not math.isnan(r['t2i_top1'])]
    best = max(scored, key=lambda r: r['t2i_top1']) if scored else None
    summary = {'runs': results, 'best': best}
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / 'sweep.json').write_text(json.dumps(summary, indent=2), encoding='utf-8')
    return summary
