"""inspect: human-readable dump of a token set, its rank matrix and a checkpoint."""
import argparse
from pathlib import Path
from typing import Optional

import numpy as np

from app.commands.common import add_config_args, existing_corpus, load_config, start_run
from app.core.errors import PathError
from app.core.logging import get_logger
from app.services.checkpoint import load_checkpoint
from app.services.encoder import ModelParams
from app.services.rankmatrix import WeightEncoding, build_ranks, render_grid
from app.services.synthcorpus import CaptionGrammar, SceneSpec, demo_token_set
from app.services.tokens import TokenKind, TokenSet, pack, read_corpus

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('inspect', help="Dump a token set, its rank matrix and/or a checkpoint")
    add_config_args(parser)
    parser.add_argument('--sample-id', help="Token set to show from the corpus")
    parser.add_argument('--corpus', type=Path, help="Corpus holding --sample-id (default: paths.corpus)")
    parser.add_argument('--checkpoint', type=Path, help="Checkpoint whose weight table and parameters to show")
    parser.add_argument('--demo', action='store_true', help="Show the built-in person-beside-tree scene")
    parser.add_argument('--padded', action='store_true', help="Render the grid at the full context length")
    parser.set_defaults(handler=run)


def token_table(ts: TokenSet, context_length: int) -> str:
    _, positions, _ = pack(ts, context_length, width=ts.d)
    lines = [f"{'pos':>4} {'kind':<11} {'src':>4} {'norm':>8}"]
    for i, pos in enumerate(positions):
        if pos.kind is TokenKind.IMAGE:
            norm = float(np.linalg.norm(ts.l))
        elif pos.kind is TokenKind.TANGIBLE:
            norm = float(np.linalg.norm(ts.V[pos.source_index]))
        elif pos.kind is TokenKind.INTANGIBLE:
            norm = float(np.linalg.norm(ts.U[pos.source_index]))
        else:
            norm = 0.0
        src = '' if pos.source_index is None else str(pos.source_index)
        lines.append(f"{i:>4} {pos.kind.value:<11} {src:>4} {norm:>8.4f}")
    return '\n'.join(lines)


def describe_sample(ts: TokenSet, context_length: int, grammar: Optional[CaptionGrammar] = None) -> str:
    _, positions, _ = pack(ts, context_length, width=ts.d)
    rm = build_ranks(ts, positions, context_length)
    parts = [
        f"sample {ts.sample_id}: |V|={ts.n_tangible} |U|={ts.n_intangible} d={ts.d} d_l={ts.l.shape[0]}",
        f"triplets (subject, object, predicate): {list(ts.triplets)}",
        f"neighbors: {list(ts.neighbors)}",
        f"caption ids: {list(ts.caption)}",
    ]
    if grammar is not None and ts.caption and max(ts.caption) < grammar.size:
        parts.append(f"caption: {grammar.words(ts.caption)}")
    parts += ['', token_table(ts, context_length), '', 'rank matrix (row attends to column):',
              render_grid(rm, positions)]
    return '\n'.join(parts)


def describe_weights(enc: WeightEncoding) -> str:
    w = enc.weight_table().data
    rows = ['rank  a          w']
    rows += [f"{r:>4}  {enc.a.data[r]:<+9.4f}  {w[r]:.4f}" + ('  (unused, rank 0 bias is 0.0)' if r == 0 else '')
             for r in range(len(w))]
    return '\n'.join(rows)


def describe_params(params: ModelParams) -> str:
    rows = [f"{'path':<40} {'shape':<14} {'count':>7} decay"]
    for path in params.paths():
        t = params[path]
        rows.append(f"{path:<40} {str(list(t.shape)):<14} {t.data.size:>7} {'yes' if params.decays(path) else 'no'}")
    rows.append(f"total parameters: {params.num_parameters}")
    return '\n'.join(rows)


def find_sample(path: Path, sample_id: str) -> TokenSet:
    for ts in read_corpus(path):
        if ts.sample_id == sample_id:
            return ts
    raise PathError(path, f"sample {sample_id!r} not found in {path}")


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    start_run(config, 'inspect')
    if not (args.sample_id or args.checkpoint or args.demo):
        args.demo = True
    spec = SceneSpec.from_config(config.scenes)
    sections = []

    samples = []
    if args.demo:
        samples.append(demo_token_set(spec))
    if args.sample_id:
        samples.append(find_sample(args.corpus or existing_corpus(config, 'corpus'), args.sample_id))
    for ts in samples:
        context = config.encoder.context_length if args.padded else ts.n_slots
        sections.append(describe_sample(ts, context, spec.grammar))

    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        sections.append(f"checkpoint {args.checkpoint}: step={checkpoint.step} epoch={checkpoint.epoch} "
                        f"seed={checkpoint.seed} d={checkpoint.d}")
        sections.append('weight table:\n' + describe_weights(checkpoint.params.weight_encoding))
        sections.append('parameters:\n' + describe_params(checkpoint.params))
    else:
        sections.append('weight table (initial a = 0):\n' + describe_weights(WeightEncoding()))

    print('\n\n'.join(sections))
    return 0
