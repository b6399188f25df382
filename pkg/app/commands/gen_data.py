"""gen-data: write the synthetic train/val corpora and their ground-truth sidecar."""
import argparse

from app.commands.common import add_config_args, load_config, start_run
from app.core.errors import TokenSetValidationError
from app.core.logging import get_logger
from app.services.synthcorpus import SceneSpec, generate, ground_truth, write_ground_truth
from app.services.tokens import validate_token_set, write_corpus

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('gen-data', help="Generate the synthetic scene-graph corpus")
    add_config_args(parser)
    parser.add_argument('--n-train', type=int, help="scenes.n_train")
    parser.add_argument('--n-val', type=int, help="scenes.n_val")
    parser.add_argument('--seed', type=int, help="scenes.seed")
    parser.add_argument('--compress', action='store_true', default=None, help="Write .jsonl.gz files")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args, {
        'scenes.n_train': args.n_train,
        'scenes.n_val': args.n_val,
        'scenes.seed': args.seed,
        'scenes.compress': args.compress,
    })
    start_run(config, 'gen-data')
    scenes = config.scenes
    spec = SceneSpec.from_config(scenes)

    splits = {
        'train': generate(scenes.n_train, spec, scenes.seed, 'train'),
        'val': generate(scenes.n_val, spec, scenes.seed, 'val'),
    }
    written = {}
    for split, name in (('train', 'corpus'), ('val', 'val_corpus')):
        corpus = splits[split]
        for ts in corpus.token_sets:
            warnings = validate_token_set(ts, d=scenes.d, context_length=config.encoder.context_length)
            if warnings:
                raise TokenSetValidationError(ts.sample_id, 'U', '; '.join(warnings))
        path = config.paths.resolve(name)
        if scenes.compress and not getattr(config.paths, name):
            path = path.with_name(path.name + '.gz')
        write_corpus(corpus.token_sets, path, d=scenes.d, d_l=scenes.d)
        written[split] = path

    truth_path = write_ground_truth(ground_truth(splits, spec, scenes.seed), config.paths.resolve('ground_truth'))
    twins = sum(s.twin_of is not None for c in splits.values() for s in c.scenes)
    print(f"train: {scenes.n_train} scenes -> {written['train']}")
    print(f"val:   {scenes.n_val} scenes -> {written['val']}")
    print(f"ground truth -> {truth_path} ({twins} direction-ambiguous twins)")
    return 0
