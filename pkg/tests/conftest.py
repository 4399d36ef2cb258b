"""Shared fixtures: one small corpus and helpers to spin up training states."""

import numpy as np
import pytest

from cdvae.modes import Mode
from cdvae.networks import ArchConfig
from cdvae.synthetic import SynthConfig, generate_synthetic_corpus
from cdvae.training import TrainConfig, init_state, prepare_training_data

TINY_SYNTH = dict(
    n_speakers=4, n_contents=12, d_sp=24, d_mcc=10, base_frames=24,
    val_contents=2, test_contents=2,
)
TINY_SEED = 2024


def tiny_synth_config(**overrides) -> SynthConfig:
    return SynthConfig(**{**TINY_SYNTH, **overrides})


def tiny_arch() -> ArchConfig:
    return ArchConfig.desk_scale(d_sp=TINY_SYNTH["d_sp"], d_mcc=TINY_SYNTH["d_mcc"])


def tiny_train_config(mode=Mode.CDVAE, **overrides) -> TrainConfig:
    base = dict(mode=mode, batch_size=4, phase1_steps=0, phase2_steps=0,
                phase3_steps=0, val_interval=0, checkpoint_interval=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-corpus")
    return generate_synthetic_corpus(tiny_synth_config(), TINY_SEED, root)


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    """(data, stats) prepared with both domains; single-domain modes reuse it."""
    return prepare_training_data(tiny_corpus, Mode.CDVAE_CLS_GAN)


def fresh_state(tiny_corpus, tiny_data, mode=Mode.CDVAE, seed=1, **cfg_overrides):
    cfg = tiny_train_config(mode=mode, **cfg_overrides)
    state = init_state(tiny_arch(), cfg, tiny_corpus.speaker_ids, tiny_data[1], seed)
    return state, cfg


def param_snapshot(module_or_bundle) -> dict:
    return {k: v.detach().clone() for k, v in module_or_bundle.state_dict().items()}


def assert_snapshots_equal(a: dict, b: dict, keys=None):
    names = sorted(a) if keys is None else sorted(keys)
    assert sorted(a) == sorted(b) or keys is not None
    for k in names:
        assert np.array_equal(a[k].numpy(), b[k].numpy()), f"parameter {k} changed"


def assert_snapshots_differ(a: dict, b: dict, keys=None):
    names = sorted(a) if keys is None else sorted(keys)
    assert any(not np.array_equal(a[k].numpy(), b[k].numpy()) for k in names)
