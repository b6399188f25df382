from dataclasses import replace

import numpy as np
import pytest

from app.core.errors import CapacityError, CheckpointError, ContractViolation, MaskError, VocabularyError
from app.services import numcore as nc
from app.services.encoder import (
    LOGIT_SCALE_PATH,
    WEIGHT_ENCODING_PATH,
    ModelParams,
    VisualTokenModel,
    add_type_embeddings,
    check_params,
    encode_caption,
    encode_caption_batch,
    encode_image,
    encode_image_batch,
    init_params,
    make_caption_batch,
    make_image_batch,
    multi_head_attention,
)
from app.services.properties import _permuted, _tiny_samples
from app.services.tokens import pack


@pytest.fixture
def samples(tiny_config):
    return _tiny_samples(tiny_config, np.random.default_rng(3), 4)


def test_init_is_seeded(tiny_config):
    a = init_params(tiny_config, seed=5).to_arrays()
    b = init_params(tiny_config, seed=5).to_arrays()
    c = init_params(tiny_config, seed=6).to_arrays()
    assert all(np.array_equal(a[p], b[p]) for p in a)
    assert not all(np.array_equal(a[p], c[p]) for p in a)


def test_init_values(tiny_params):
    assert tiny_params[WEIGHT_ENCODING_PATH].data.tolist() == [0.0] * 8
    assert tiny_params[LOGIT_SCALE_PATH].item() == pytest.approx(np.log(1 / 0.07))
    assert tiny_params.weight_encoding.weight_table().data.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]


def test_decay_exclusions(tiny_params):
    assert tiny_params.decays('image.token_proj.weight')
    assert not tiny_params.decays('image.token_proj.bias')
    assert not tiny_params.decays('image.layers.0.ln1.gamma')
    assert not tiny_params.decays('image.type_embedding.p_v')
    assert not tiny_params.decays(WEIGHT_ENCODING_PATH)
    assert not tiny_params.decays(LOGIT_SCALE_PATH)


def test_check_params_rejects_wrong_shape(tiny_config, tiny_params):
    arrays = tiny_params.to_arrays()
    arrays['image.proj.weight'] = np.zeros((3, 3))
    with pytest.raises(CheckpointError):
        check_params(ModelParams.from_arrays(arrays), tiny_config)


def test_image_embeddings_are_unit_norm(tiny_config, tiny_params, samples):
    S = encode_image_batch(make_image_batch(samples, tiny_config), tiny_params, tiny_config).data
    assert S.shape == (4, tiny_config.embed_dim)
    assert np.allclose(np.linalg.norm(S, axis=1), 1.0, atol=1e-12)


def test_caption_embeddings_are_unit_norm_and_deterministic(tiny_config, tiny_params):
    t1 = encode_caption((2, 5, 9, 2, 6), tiny_params, tiny_config)
    t2 = encode_caption((2, 5, 9, 2, 6), tiny_params, tiny_config)
    assert np.linalg.norm(t1) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(t1, t2)


def test_caption_word_order_matters(tiny_config, tiny_params):
    a = encode_caption((2, 5, 9, 2, 6), tiny_params, tiny_config)
    b = encode_caption((2, 6, 9, 2, 5), tiny_params, tiny_config)
    assert not np.allclose(a, b)


def test_caption_padding_does_not_change_embedding(tiny_config, tiny_params):
    batch = make_caption_batch([(2, 5, 9), (2, 5, 9, 2, 6, 3)], tiny_config)
    T = encode_caption_batch(batch, tiny_params, tiny_config).data
    alone = encode_caption((2, 5, 9), tiny_params, tiny_config)
    assert np.allclose(T[0], alone, atol=1e-12)


def test_caption_errors(tiny_config):
    with pytest.raises(VocabularyError):
        make_caption_batch([(2, tiny_config.vocab_size)], tiny_config)
    with pytest.raises(CapacityError):
        make_caption_batch([tuple(range(2, 2 + tiny_config.text_context_length))], tiny_config)


def test_caption_batch_layout(tiny_config):
    batch = make_caption_batch([(4, 5)], tiny_config)
    assert batch.ids[0, :4].tolist() == [4, 5, 1, 0]
    assert batch.eos_index.tolist() == [2]
    assert batch.valid_mask[0].tolist() == [True] * 3 + [False] * 5


def test_pad_contents_do_not_change_embedding(tiny_config, tiny_params, samples):
    batch = make_image_batch(samples, tiny_config)
    clean = encode_image_batch(batch, tiny_params, tiny_config).data
    noisy_tokens = batch.tokens.copy()
    noisy_tokens[~batch.valid_mask] = 50.0
    noisy = encode_image_batch(replace(batch, tokens=noisy_tokens), tiny_params, tiny_config).data
    assert np.array_equal(clean, noisy)


def test_context_slack_does_not_change_embedding(tiny_config, tiny_params, samples):
    wide = tiny_config.model_copy(update={'context_length': 12})
    narrow_s = encode_image(samples[0], tiny_params, tiny_config)
    wide_s = encode_image(samples[0], tiny_params, wide)
    assert np.max(np.abs(narrow_s - wide_s)) <= 1e-12


def test_permuting_tokens_does_not_change_embedding(tiny_config, tiny_params, samples):
    rng = np.random.default_rng(0)
    for ts in samples:
        a = encode_image(ts, tiny_params, tiny_config)
        b = encode_image(_permuted(ts, rng), tiny_params, tiny_config)
        assert np.max(np.abs(a - b)) <= 1e-9


def test_zero_ranks_equal_plain_attention(tiny_config, tiny_params, samples):
    batch = make_image_batch(samples, tiny_config)
    zeroed = replace(batch, ranks=np.zeros_like(batch.ranks))
    a = encode_image_batch(zeroed, tiny_params, tiny_config, additive_attention=True).data
    b = encode_image_batch(batch, tiny_params, tiny_config, additive_attention=False).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_additive_attention_changes_embedding(tiny_config, tiny_params, samples):
    batch = make_image_batch(samples, tiny_config)
    assert batch.ranks.any()
    a = encode_image_batch(batch, tiny_params, tiny_config, additive_attention=True).data
    b = encode_image_batch(batch, tiny_params, tiny_config, additive_attention=False).data
    assert not np.allclose(a, b)


def test_additive_attention_needs_ranks(tiny_config, tiny_params, samples):
    batch = make_image_batch(samples, tiny_config, with_ranks=False)
    with pytest.raises(ContractViolation):
        encode_image_batch(batch, tiny_params, tiny_config, additive_attention=True)


def test_zero_type_embeddings_are_identity(tiny_config, tiny_params, samples):
    arrays = tiny_params.to_arrays()
    for name in ('p_l', 'p_v', 'p_u'):
        arrays[f'image.type_embedding.{name}'] = np.zeros(tiny_config.d_model)
    params = ModelParams.from_arrays(arrays)
    _, positions, _ = pack(samples[0], tiny_config.context_length, width=tiny_config.d_token)
    x = nc.Tensor(np.random.default_rng(0).normal(size=(tiny_config.context_length, tiny_config.d_model)))
    assert np.array_equal(add_type_embeddings(x, positions, params).data, x.data)


def test_single_valid_key_returns_its_value(tiny_config, tiny_params):
    x = nc.Tensor(np.random.default_rng(1).normal(size=(1, 3, tiny_config.d_model)))
    valid = np.array([[True, False, False]])
    out = multi_head_attention(x, None, valid, tiny_params, 'image.layers.0.attn', tiny_config.n_heads)
    assert np.allclose(out.mixed.data[0], np.broadcast_to(out.values.data[0, 0], (3, tiny_config.d_model)))


def test_all_invalid_keys_raise(tiny_config, tiny_params):
    x = nc.Tensor(np.zeros((1, 2, tiny_config.d_model)))
    with pytest.raises(MaskError):
        multi_head_attention(x, None, np.zeros((1, 2), dtype=bool), tiny_params, 'image.layers.0.attn',
                             tiny_config.n_heads)


def test_raising_a_bias_cell_raises_its_probability(tiny_config, tiny_params):
    rng = np.random.default_rng(2)
    x = nc.Tensor(rng.normal(size=(1, 5, tiny_config.d_model)))
    valid = np.ones((1, 5), dtype=bool)
    bias = rng.normal(size=(1, 5, 5))
    raised = bias.copy()
    raised[0, 2, 4] += 10.0
    prefix = 'image.layers.0.attn'
    before = multi_head_attention(x, nc.Tensor(bias), valid, tiny_params, prefix, tiny_config.n_heads).probs
    after = multi_head_attention(x, nc.Tensor(raised), valid, tiny_params, prefix, tiny_config.n_heads).probs
    assert np.all(after[0, :, 2, 4] > before[0, :, 2, 4])


def test_model_embeds_in_chunks(tiny_config, tiny_params, samples):
    whole = VisualTokenModel(tiny_config, tiny_params, batch_size=64).embed_images(samples)
    chunked = VisualTokenModel(tiny_config, tiny_params, batch_size=3).embed_images(samples)
    assert np.allclose(whole, chunked, atol=1e-12)
    assert VisualTokenModel(tiny_config, tiny_params).embed_captions([]).shape == (0, tiny_config.embed_dim)
