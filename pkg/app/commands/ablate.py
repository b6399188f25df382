"""ablate: train with and without additive attention over several seeds and compare relation sensitivity."""
import argparse
import json

import numpy as np

from app.commands.common import add_config_args, existing_corpus, load_config, print_json, start_run
from app.commands.train import check_corpus_width
from app.core.errors import PathError
from app.core.logging import get_logger
from app.services.evaluation import as_model, pairwise_choice_eval, twin_items
from app.services.synthcorpus import read_ground_truth
from app.services.tokens import load_corpus
from app.services.trainer import train

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('ablate', help="Additive attention on vs off, averaged over seeds")
    add_config_args(parser)
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    parser.add_argument('--epochs', type=int, help="train.epochs")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args, {'train.epochs': args.epochs})
    out = start_run(config, 'ablate')
    corpus = load_corpus(existing_corpus(config, 'corpus'))
    val_corpus = load_corpus(existing_corpus(config, 'val_corpus'))
    check_corpus_width(corpus, config.encoder, 'train corpus')
    truth_path = config.paths.resolve('ground_truth')
    if not truth_path.exists():
        raise PathError(truth_path, f"ground truth not found: {truth_path} (run gen-data first)")
    items = twin_items(val_corpus, read_ground_truth(truth_path))
    logger.info(f"Ablation | seeds={args.seeds}, items={len(items)}")

    arms = {}
    for arm, additive in (('on', True), ('off', False)):
        scores = []
        for seed in args.seeds:
            train_config = config.train.model_copy(update={'seed': seed, 'additive_attention': additive})
            result = train(corpus, train_config, config.encoder, out / 'ablation' / arm / f'seed-{seed}',
                           val_corpus=val_corpus)
            scores.append(pairwise_choice_eval(as_model(result.checkpoint_path), items))
            logger.info(f"Ablation run | arm={arm}, seed={seed}, accuracy={scores[-1]:.3f}")
        arms[arm] = {'scores': scores, 'mean': float(np.mean(scores))}

    summary = {
        'seeds': args.seeds,
        'items': len(items),
        'additive_attention_on': arms['on'],
        'additive_attention_off': arms['off'],
        'gap': arms['on']['mean'] - arms['off']['mean'],
    }
    (out / 'ablation' / 'ablation.json').write_text(json.dumps(summary, indent=2) + '\n', encoding='utf-8')
    print_json(summary)
    return 0
