#!/usr/bin/env python
# -*- coding: utf-8 -*-

import numpy as np
import pytest

from mixertts.adaptors import PredictorConfig
from mixertts.audio_text import MelConfig, write_tone_corpus
from mixertts.mixer import StackConfig
from mixertts.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mel_cfg():
    return MelConfig()


@pytest.fixture
def tone_manifest(tmp_path, mel_cfg):
    """the three utterance synthetic tone corpus; returns the manifest path"""
    return write_tone_corpus(str(tmp_path / 'tones'), mel_cfg)


@pytest.fixture
def tone_manifest_4(tmp_path, mel_cfg):
    return write_tone_corpus(str(tmp_path / 'tones4'), mel_cfg,
                             transcripts=('hi.', 'a cab', 'mixer', 'ok!'))


def toy_config(extended=False, dropout=True):
    """the toy preset; ``dropout=False`` switches every dropout off"""
    if dropout:
        return ModelConfig.toy(extended=extended)
    return ModelConfig(feature_dim=32, encoder=StackConfig(2, 3, 5, 2),
                       decoder=StackConfig(2, 3, 5, 2),
                       duration_predictor=PredictorConfig(hidden=16, dropout_p=0.0),
                       pitch_predictor=PredictorConfig(hidden=16, dropout_p=0.0),
                       aligner_dim=16, dropout_p=0.0, extended=extended,
                       lm_dim=32, max_positions=256)


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def deterministic_cfg():
    return toy_config(dropout=False)


@pytest.fixture
def deterministic_ext_cfg():
    return toy_config(extended=True, dropout=False)
