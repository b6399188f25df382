import numpy as np
import pytest

from app.core.errors import CheckpointError, PathError
from app.services.checkpoint import (
    HEADER_KEY,
    OptimizerState,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)
from app.services.trainer import init_optimizer_state


def test_round_trip(tmp_path, tiny_config, tiny_params):
    path = save_checkpoint(tmp_path / 'ckpt' / 'a.npz', tiny_params, tiny_config, seed=3, step=17, epoch=2,
                           train_config={'lr': 0.01})
    loaded = load_checkpoint(path, expected=tiny_config)
    assert loaded.config == tiny_config
    assert (loaded.seed, loaded.step, loaded.epoch, loaded.d) == (3, 17, 2, tiny_config.d_token)
    assert loaded.train_config == {'lr': 0.01}
    assert loaded.optimizer is None
    for p, t in tiny_params.items():
        assert np.array_equal(loaded.params[p].data, t.data)
        assert loaded.params[p].requires_grad


def test_stored_as_little_endian_float64(tmp_path, tiny_config, tiny_params):
    path = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=0)
    with np.load(path) as archive:
        assert HEADER_KEY in archive.files
        assert archive['param/image.proj.weight'].dtype == np.dtype('<f8')


def test_optimizer_moments_round_trip(tmp_path, tiny_config, tiny_params):
    state = init_optimizer_state(tiny_params)
    state.step = 4
    state.m['logit_scale'] = np.array(0.25)
    path = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=4, optimizer=state)
    loaded = load_checkpoint(path)
    assert isinstance(loaded.optimizer, OptimizerState)
    assert loaded.optimizer.step == 4
    assert loaded.optimizer.m['logit_scale'] == 0.25
    assert set(loaded.optimizer.v) == set(tiny_params.paths())


def test_missing_file_is_path_error(tmp_path):
    with pytest.raises(PathError):
        load_checkpoint(tmp_path / 'missing.npz')


def test_garbage_file_is_checkpoint_error(tmp_path):
    path = tmp_path / 'junk.npz'
    path.write_bytes(b'not a zip archive')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_parameter_is_checkpoint_error(tmp_path, tiny_config, tiny_params):
    path = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=0)
    with np.load(path) as archive:
        contents = {k: archive[k] for k in archive.files if k != 'param/image.proj.weight'}
    np.savez(tmp_path / 'b.npz', **contents)
    with pytest.raises(CheckpointError, match='image.proj.weight'):
        load_checkpoint(tmp_path / 'b.npz')


def test_config_mismatch(tmp_path, tiny_config, tiny_params):
    path = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected=tiny_config.model_copy(update={'context_length': 12}))


def test_digest_tracks_content(tmp_path, tiny_config, tiny_params):
    a = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=0)
    c = save_checkpoint(tmp_path / 'c.npz', tiny_params, tiny_config, seed=0, step=1)
    assert len(file_digest(a)) == 64
    assert file_digest(a) == file_digest(a)
    assert file_digest(a) != file_digest(c)


def test_scalar_parameter_keeps_its_shape(tmp_path, tiny_config, tiny_params):
    tiny_params['logit_scale'].data = np.array(2.5)
    state = init_optimizer_state(tiny_params)
    state.m['logit_scale'] = np.array(0.125)
    path = save_checkpoint(tmp_path / 'a.npz', tiny_params, tiny_config, seed=0, step=1, optimizer=state)
    with np.load(path) as archive:
        assert archive['param/logit_scale'].shape == ()
        assert archive['optim/m/logit_scale'].shape == ()
    loaded = load_checkpoint(path, expected=tiny_config)
    assert loaded.params['logit_scale'].shape == ()
    assert loaded.params['logit_scale'].data == 2.5
    assert loaded.optimizer.m['logit_scale'].shape == ()
