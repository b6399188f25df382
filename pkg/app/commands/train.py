"""train: contrastive training, single run, learning-rate preset sweep or resume."""
import argparse
from pathlib import Path

from app.commands.common import add_config_args, existing_corpus, load_config, print_json, start_run
from app.core.config import LR_PRESETS, EncoderConfig
from app.core.errors import ConfigError
from app.core.logging import get_logger
from app.services.checkpoint import load_checkpoint
from app.services.tokens import TokenSet, load_corpus
from app.services.trainer import sweep_learning_rates, train

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('train', help="Train the image and caption encoders")
    add_config_args(parser)
    parser.add_argument('--epochs', type=int, help="train.epochs")
    parser.add_argument('--lr', type=float, help="train.lr")
    parser.add_argument('--batch-size', type=int, help="train.batch_size")
    parser.add_argument('--seed', type=int, help="train.seed")
    parser.add_argument('--no-additive-attention', dest='additive_attention', action='store_false', default=None,
                        help="Ablation: plain attention without the rank bias")
    parser.add_argument('--resume', type=Path, help="Continue from this checkpoint")
    parser.add_argument('--lr-preset', choices=sorted(LR_PRESETS), help="Train once per preset learning rate")
    parser.set_defaults(handler=run)


def check_corpus_width(corpus: list[TokenSet], encoder: EncoderConfig, name: str) -> None:
    for ts in corpus:
        if ts.n_tangible + ts.n_intangible and ts.d != encoder.d_token:
            raise ConfigError('encoder.d_token', f'{name} sample {ts.sample_id!r} has d={ts.d}, '
                                                 f'config expects {encoder.d_token}')
        if ts.l.shape[0] != encoder.d_l:
            raise ConfigError('encoder.d_l', f'{name} sample {ts.sample_id!r} has d_l={ts.l.shape[0]}, '
                                             f'config expects {encoder.d_l}')


def run(args: argparse.Namespace) -> int:
    config = load_config(args, {
        'train.epochs': args.epochs,
        'train.lr': args.lr,
        'train.batch_size': args.batch_size,
        'train.seed': args.seed,
        'train.additive_attention': args.additive_attention,
    })
    if args.resume and args.lr_preset:
        raise ConfigError('train.lr', '--resume and --lr-preset cannot be combined')
    out = start_run(config, 'train')

    corpus = load_corpus(existing_corpus(config, 'corpus'))
    check_corpus_width(corpus, config.encoder, 'train corpus')
    val_path = existing_corpus(config, 'val_corpus', required=False)
    val_corpus = load_corpus(val_path) if val_path else []
    check_corpus_width(val_corpus, config.encoder, 'val corpus')

    if args.lr_preset:
        if not val_corpus:
            raise ConfigError('paths.val_corpus', 'the learning-rate sweep selects by validation accuracy')
        summary = sweep_learning_rates(corpus, val_corpus, config.train, config.encoder,
                                       LR_PRESETS[args.lr_preset], out / 'sweep')
        print_json(summary)
        return 0

    resume = load_checkpoint(args.resume, expected=config.encoder) if args.resume else None
    result = train(corpus, config.train, config.encoder, out, val_corpus=val_corpus, resume=resume)
    print(f"steps: {result.steps}")
    print(f"final loss: {result.final_loss:.6f}")
    if result.evals:
        last = result.evals[-1]
        print(f"val t2i top-1: {last['t2i_top1']:.3f}  i2t top-1: {last['i2t_top1']:.3f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0
