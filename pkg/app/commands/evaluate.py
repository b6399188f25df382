"""eval: retrieval and compositional choice tests for a checkpoint."""
import argparse
import json
from pathlib import Path

from app.commands.common import add_config_args, existing_corpus, load_config, start_run
from app.core.logging import get_logger
from app.services.evaluation import EmbeddingCache, full_report, report_frame, similarity_frame
from app.services.synthcorpus import read_ground_truth
from app.services.tokens import load_corpus

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('eval', help="Evaluate a checkpoint on a corpus")
    add_config_args(parser)
    parser.add_argument('--checkpoint', type=Path, help="paths.checkpoint")
    parser.add_argument('--corpus', type=Path, help="Corpus to evaluate (default: the validation corpus)")
    parser.add_argument('--ground-truth', type=Path, help="paths.ground_truth")
    parser.add_argument('--dump-similarity', action='store_true', help="Also write the similarity matrix as CSV")
    parser.add_argument('--no-cache', action='store_true', help="Recompute embeddings even if cached")
    parser.set_defaults(handler=run)


def render(report: dict) -> str:
    r = report['retrieval']
    lines = [
        f"retrieval (n={r['n']}, additive attention {'on' if report['additive_attention'] else 'off'})",
        f"  t2i top-1     {r['t2i_top1']:.4f}",
        f"  i2t top-1     {r['i2t_top1']:.4f}",
        f"  diag mean     {r['diag_mean']:.4f}",
        f"  offdiag mean  {r['offdiag_mean']:.4f}",
    ]
    if 'relation_swap' in report:
        g = report['group']
        lines += [
            f"relation swap   {report['relation_swap']['accuracy']:.4f} (n={report['relation_swap']['n']})",
            f"ambiguous pairs {report['ambiguous_pairs']['accuracy']:.4f} (n={report['ambiguous_pairs']['n']})",
            f"group (n={g['n']}): text {g['text_correct']:.4f}  image {g['image_correct']:.4f}  "
            f"group {g['group_correct']:.4f}",
        ]
        if 'word_order' in report:
            lines.append(f"word order      {report['word_order']['accuracy']:.4f} (n={report['word_order']['n']})")
    return '\n'.join(lines)


def run(args: argparse.Namespace) -> int:
    config = load_config(args, {
        'paths.checkpoint': str(args.checkpoint) if args.checkpoint else None,
        'paths.ground_truth': str(args.ground_truth) if args.ground_truth else None,
    })
    out = start_run(config, 'eval')
    corpus_path = args.corpus or existing_corpus(config, 'val_corpus')
    corpus = load_corpus(corpus_path)
    truth_path = config.paths.resolve('ground_truth')
    ground = read_ground_truth(truth_path) if truth_path.exists() else None
    cache = None if args.no_cache else EmbeddingCache(out / 'cache' / 'embeddings')

    report, retrieval = full_report(config.paths.resolve('checkpoint'), corpus, ground, cache)
    report['checkpoint'] = str(config.paths.resolve('checkpoint'))
    report['corpus'] = str(corpus_path)

    eval_dir = out / 'eval'
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / 'report.json').write_text(json.dumps(report, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    report_frame(report).to_csv(eval_dir / 'report.csv', index=False)
    if args.dump_similarity:
        similarity_frame(retrieval, [ts.sample_id for ts in corpus]).to_csv(eval_dir / 'similarity.csv')
    print(render(report))
    return 0
