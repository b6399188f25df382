import json

import pandas as pd
import pytest

from app.main import main
from app.services.checkpoint import load_checkpoint

TINY_RUN = {
    'encoder': {
        'd_token': 6, 'd_l': 6, 'd_model': 16, 'n_layers': 1, 'n_heads': 2, 'd_ff': 24,
        'context_length': 8, 'embed_dim': 8, 'vocab_size': 12, 'text_context_length': 8,
        'text_layers': 1, 'text_heads': 2, 'init_std': 0.3,
    },
    'train': {'batch_size': 4, 'epochs': 1, 'warmup_epochs': 0, 'lr': 0.01, 'checkpoint_every': 1, 'eval_every': 1},
    'scenes': {
        'n_object_classes': 4, 'n_predicate_classes': 4, 'd': 6, 'max_objects': 3, 'max_triplets': 1,
        'n_train': 8, 'n_val': 8, 'ambiguous_rate': 0.5,
    },
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(TINY_RUN), encoding='utf-8')
    return path


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / 'run'


def cli(config_file, run_dir, *args):
    command, *rest = args
    return main([command, '--config', str(config_file), '--output-dir', str(run_dir), *rest])


@pytest.fixture
def generated(config_file, run_dir):
    assert cli(config_file, run_dir, 'gen-data') == 0
    return run_dir


@pytest.fixture
def trained(generated, config_file):
    assert cli(config_file, generated, 'train') == 0
    return generated


def test_gen_data_layout(generated, capsys):
    corpus = generated / 'corpus'
    assert {p.name for p in corpus.iterdir()} == {'train.jsonl', 'val.jsonl', 'ground_truth.json'}
    lines = (corpus / 'train.jsonl').read_text().splitlines()
    assert len(lines) == 9 and json.loads(lines[0])['header']['d'] == 6
    manifest = json.loads((generated / 'manifests' / 'gen-data.json').read_text())
    assert manifest['command'] == 'gen-data'
    assert manifest['config']['scenes']['n_train'] == 8
    assert (generated / 'logs' / 'app.log').exists()


def test_gen_data_is_reproducible(config_file, tmp_path):
    a, b = tmp_path / 'a', tmp_path / 'b'
    assert cli(config_file, a, 'gen-data', '--seed', '5') == 0
    assert cli(config_file, b, 'gen-data', '--seed', '5') == 0
    for name in ('train.jsonl', 'val.jsonl', 'ground_truth.json'):
        assert (a / 'corpus' / name).read_bytes() == (b / 'corpus' / name).read_bytes()


def test_gen_data_compressed(config_file, run_dir):
    assert cli(config_file, run_dir, 'gen-data', '--compress', '--n-train', '4') == 0
    assert (run_dir / 'corpus' / 'train.jsonl.gz').exists()
    assert not (run_dir / 'corpus' / 'train.jsonl').exists()


def test_train_writes_checkpoint_and_metrics(capsys, trained):
    checkpoint = load_checkpoint(trained / 'checkpoints' / 'final.npz')
    assert checkpoint.epoch == 1
    assert checkpoint.step == 2
    events = [json.loads(line)['event'] for line in (trained / 'metrics.jsonl').read_text().splitlines()]
    assert events.count('step') == 2 and 'eval' in events
    assert 'final loss:' in capsys.readouterr().out


def test_zero_epochs_still_writes_a_checkpoint(generated, config_file):
    assert cli(config_file, generated, 'train', '--epochs', '0') == 0
    checkpoint = load_checkpoint(generated / 'checkpoints' / 'final.npz')
    assert checkpoint.step == 0
    assert (generated / 'metrics.jsonl').read_text() == ''


def test_train_without_corpus_fails(config_file, run_dir, capsys):
    assert cli(config_file, run_dir, 'train') == 1
    assert 'run gen-data first' in capsys.readouterr().err


def test_bad_override_is_reported(generated, config_file, capsys):
    assert cli(config_file, generated, 'train', '--set', 'train.batch_size=1') == 1
    assert 'train.batch_size' in capsys.readouterr().err


def test_unknown_config_key(generated, config_file, capsys):
    assert cli(config_file, generated, 'train', '--set', 'train.momentum=0.9') == 1
    assert 'train.momentum' in capsys.readouterr().err


def test_malformed_override(generated, config_file):
    assert cli(config_file, generated, 'train', '--set', 'no-equals-sign') == 1


def test_eval_report(trained, config_file, capsys):
    assert cli(config_file, trained, 'eval', '--dump-similarity') == 0
    report = json.loads((trained / 'eval' / 'report.json').read_text())
    assert report['retrieval']['n'] == 8
    assert report['additive_attention'] is True
    assert {'relation_swap', 'ambiguous_pairs', 'group', 'word_order'} <= set(report)
    assert report['word_order']['n'] == 8
    summary = pd.read_csv(trained / 'eval' / 'report.csv')
    assert list(summary.columns) == ['section', 'metric', 'value']
    assert {'retrieval', 'word_order'} <= set(summary.section)
    frame = pd.read_csv(trained / 'eval' / 'similarity.csv', index_col=0)
    assert frame.shape == (8, 8)
    out = capsys.readouterr().out
    assert 't2i top-1' in out and 'word order' in out


def test_eval_missing_checkpoint(generated, config_file, capsys):
    assert cli(config_file, generated, 'eval') == 1
    assert 'final.npz' in capsys.readouterr().err


def test_plot_data(trained, config_file):
    assert cli(config_file, trained, 'plot-data') == 0
    frame = pd.read_csv(trained / 'plots' / 'metrics.csv')
    assert list(frame.columns) == ['step', 'epoch', 'event', 'metric', 'value']
    assert 'loss' in set(frame.metric)


def test_plot_data_wide(trained, config_file, tmp_path):
    out = tmp_path / 'wide.csv'
    assert cli(config_file, trained, 'plot-data', '--wide', '--out', str(out)) == 0
    assert 'loss' in pd.read_csv(out).columns


def test_inspect_demo_prints_rank_grid(config_file, run_dir, capsys):
    assert cli(config_file, run_dir, 'inspect', '--demo') == 0
    out = capsys.readouterr().out
    grid = {line.split()[0]: line.split()[1:] for line in out.splitlines()
            if line.split() and line.split()[0] in ('l', 'v0', 'v1', 'u0')}
    assert grid['v0'] == ['0', '0', '7', '6']
    assert grid['v1'] == ['0', '4', '0', '6']
    assert grid['u0'] == ['0', '5', '5', '0']
    assert 'weight table' in out
    assert json.loads((run_dir / 'manifests' / 'inspect.json').read_text())['command'] == 'inspect'


def test_inspect_sample_and_checkpoint(trained, config_file, capsys):
    assert cli(config_file, trained, 'inspect', '--sample-id', 'train-000000',
               '--checkpoint', str(trained / 'checkpoints' / 'final.npz')) == 0
    out = capsys.readouterr().out
    assert 'sample train-000000' in out
    assert 'total parameters:' in out


def test_inspect_unknown_sample(generated, config_file, capsys):
    assert cli(config_file, generated, 'inspect', '--sample-id', 'nope') == 1
    assert "'nope'" in capsys.readouterr().err


def test_verify_selected_checks(run_dir, capsys):
    assert main(['verify', '--output-dir', str(run_dir), '--seed', '3', '--only', 'demo_ranks', 'softmax_law']) == 0
    out = capsys.readouterr().out
    assert '2/2 checks passed' in out
    assert 'PASS  demo_ranks' in out
    manifest = json.loads((run_dir / 'manifests' / 'verify.json').read_text())
    assert manifest['command'] == 'verify' and manifest['seed'] == 3


def test_verify_failure_exit_code(monkeypatch, run_dir, capsys):
    from app.services import properties

    monkeypatch.setitem(properties.CHECKS, 'demo_ranks',
                        lambda seed=0, quick=False: properties.PropertyResult('demo_ranks', False, 'forced'))
    assert main(['verify', '--output-dir', str(run_dir), '--only', 'demo_ranks']) == 1
    assert '0/1 checks passed' in capsys.readouterr().out


def test_ablate_summary(generated, config_file):
    assert cli(config_file, generated, 'ablate', '--seeds', '0') == 0
    summary = json.loads((generated / 'ablation' / 'ablation.json').read_text())
    assert summary['seeds'] == [0]
    assert len(summary['additive_attention_on']['scores']) == len(summary['additive_attention_off']['scores']) == 1
    assert (generated / 'ablation' / 'off' / 'seed-0' / 'checkpoints' / 'final.npz').exists()


def test_lr_preset_sweep(generated, config_file):
    assert cli(config_file, generated, 'train', '--lr-preset', 'desk') == 0
    sweep = json.loads((generated / 'sweep' / 'sweep.json').read_text())
    assert [run['lr'] for run in sweep['runs']] == [3e-4, 1e-3, 3e-3]
    assert (generated / 'sweep' / 'lr-0.001' / 'checkpoints' / 'final.npz').exists()


def test_resume_and_preset_conflict(trained, config_file, capsys):
    code = cli(config_file, trained, 'train', '--lr-preset', 'desk',
               '--resume', str(trained / 'checkpoints' / 'final.npz'))
    assert code == 1
    assert 'train.lr' in capsys.readouterr().err


def test_resume_continues_training(trained, config_file):
    assert cli(config_file, trained, 'train', '--epochs', '2',
               '--resume', str(trained / 'checkpoints' / 'final.npz')) == 0
    assert load_checkpoint(trained / 'checkpoints' / 'final.npz').step == 4
    events = [json.loads(line) for line in (trained / 'metrics.jsonl').read_text().splitlines()]
    assert [e['step'] for e in events if e['event'] == 'step'] == [0, 1, 2, 3]
