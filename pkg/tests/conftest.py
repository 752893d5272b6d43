"""Shared fixtures. Trained models are cached on disk under tests/_cache so a
full suite run only pays for each training once."""

from pathlib import Path

import pytest

from talkedit.backend import ToyWorld, ToyWorldConfig
from talkedit import field as fld
from talkedit import language as lang
from talkedit import predictor as pred

CACHE = Path(__file__).parent / "_cache"

FULL_PREDICTOR_SEED = 1
FULL_EVAL_SEED = 2
FIELD_SEED_BASE = 3
FIELD_ITERS = 4000
CORPUS_SEED = 11
ENCODER_SEED = 13


def cached(name, builder, saver, loader):
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"{name}.pt"
    if path.exists():
        try:
            return loader(path)
        except Exception:
            path.unlink()
    model = builder()
    saver(model, path)
    return model


@pytest.fixture(scope="session")
def world():
    return ToyWorld(ToyWorldConfig(seed=7))


@pytest.fixture(scope="session")
def small_predictor(world):
    return cached(
        "predictor_small_n2000_s101_v3",
        lambda: pred.train_predictor(world, 2000, seed=101, epochs=24),
        pred.save_predictor,
        pred.load_predictor,
    )


@pytest.fixture(scope="session")
def small_eval_predictor(world):
    return cached(
        "predictor_eval_small_n2000_s101_v3",
        lambda: pred.train_eval_predictor(world, 2000, seed=101, epochs=24),
        pred.save_predictor,
        pred.load_predictor,
    )


# -- full-scale models for the acceptance suite ---------------------------------


@pytest.fixture(scope="session")
def full_predictor(world):
    return cached(
        f"predictor_full_n20000_s{FULL_PREDICTOR_SEED}_v3",
        lambda: pred.train_predictor(world, 20000, seed=FULL_PREDICTOR_SEED, batch_size=256),
        pred.save_predictor,
        pred.load_predictor,
    )


@pytest.fixture(scope="session")
def full_eval_predictor(world):
    return cached(
        f"predictor_evalfull_n20000_s{FULL_EVAL_SEED}_v3",
        lambda: pred.train_eval_predictor(world, 20000, seed=FULL_EVAL_SEED, batch_size=256),
        pred.save_predictor,
        pred.load_predictor,
    )


@pytest.fixture(scope="session")
def trained_fields(world, full_predictor):
    models = {}
    for attr in range(5):
        models[attr] = cached(
            f"field_attr{attr}_i{FIELD_ITERS}_s{FIELD_SEED_BASE + attr}_v3",
            lambda attr=attr: fld.train_field(
                world, full_predictor, attr, fld.FieldConfig(),
                n_iters=FIELD_ITERS, seed=FIELD_SEED_BASE + attr,
            ),
            fld.save_field,
            fld.load_field,
        )
    return models


@pytest.fixture(scope="session")
def full_corpus():
    return lang.generate_corpus(lang.load_templates(), seed=CORPUS_SEED, n=10000)


@pytest.fixture(scope="session")
def full_encoder(full_corpus):
    return cached(
        f"encoder_n10000_s{ENCODER_SEED}_v3",
        lambda: lang.train_encoder(full_corpus, seed=ENCODER_SEED),
        lang.save_encoder,
        lang.load_encoder,
    )
