import os

os.environ.setdefault('ENVIRONMENT', 'test')

import numpy as np
import pytest

from app.core.config import SceneConfig, TrainConfig, tiny_encoder_config
from app.services.encoder import init_params
from app.services.synthcorpus import SceneSpec, generate
from app.services.tokens import TokenSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_encoder_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def two_object_set():
    """v0 and v1 linked by one triplet (0, 1, 0) and mutual first neighbors."""
    return TokenSet(
        sample_id='pair',
        l=np.full(3, 0.5),
        V=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        U=np.array([[0.0, 0.0, 1.0]]),
        triplets=((0, 1, 0),),
        neighbors=((1,), (0,)),
        caption=(2, 4, 8, 2, 5),
    )


@pytest.fixture
def small_scenes():
    """Scene config sized for the tiny encoder: d=6, at most 3 objects, one triplet (a 6-id caption)."""
    return SceneConfig(n_object_classes=4, n_predicate_classes=4, d=6, min_objects=2, max_objects=3,
                       min_triplets=1, max_triplets=1, n_train=8, n_val=8, sigma=0.05, ambiguous_rate=0.5)


@pytest.fixture
def small_corpus(small_scenes):
    spec = SceneSpec.from_config(small_scenes)
    return generate(8, spec, seed=0).token_sets


@pytest.fixture
def fast_train_config():
    return TrainConfig(batch_size=4, epochs=2, lr=1e-2, warmup_epochs=1, seed=0,
                       checkpoint_every=1, eval_every=1)
