#!/usr/bin/env python
# -*- coding: utf-8 -*-

import pytest

from mixertts.config import Config, build_config, dump_config, load_config, parse_override
from mixertts.errors import ConfigError, InputError
from mixertts.mixer import StackConfig
from mixertts.model import ModelConfig


def test_defaults():
    config = load_config()
    assert config == Config()
    assert config.model == ModelConfig.full()
    assert config.train.base_lr == 0.1
    assert config.mel.hop_length == 275


def test_preset_with_partial_overrides():
    config = build_config({'model': {'preset': 'desk', 'extended': True,
                                     'encoder': {'n_blocks': 2, 'kernel_end': 13}},
                           'train': {'steps': 5}})
    assert config.model.feature_dim == 192
    assert config.model.extended
    assert config.model.encoder == StackConfig(2, 11, 13, 2)
    assert config.model.decoder == ModelConfig.desk().decoder
    assert config.train.steps == 5


@pytest.mark.parametrize('values', [
    {'optimizer': {}},
    {'model': {'channels': 3}},
    {'train': {'steps': 5, 'lr': 1.0}},
    {'model': 3},
    {'model': {'preset': 'huge'}},
    {'model': {'encoder': {'n_blocks': 3}}},
    [1, 2],
])
def test_rejected_configs(values):
    with pytest.raises(ConfigError):
        build_config(values)


def test_parse_override():
    assert parse_override('train.steps=5') == {'train': {'steps': 5}}
    assert parse_override('model.encoder.n_blocks=2') == {'model': {'encoder': {'n_blocks': 2}}}
    assert parse_override('train.bucket=true') == {'train': {'bucket': True}}
    assert parse_override('model.lm_table=a=b.txt') == {'model': {'lm_table': 'a=b.txt'}}
    for bad in ('steps=5', 'train.steps', 'train..steps=1'):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_overrides_apply_on_top_of_the_file(tmp_path):
    path = tmp_path / 'c.yaml'
    path.write_text(u'model:\n  preset: toy\ntrain:\n  steps: 10\n  seed: 3\n')
    config = load_config(str(path), ['train.steps=20', 'model.extended=true'])
    assert config.model == ModelConfig.toy(extended=True)
    assert (config.train.steps, config.train.seed) == (20, 3)


def test_dumped_config_loads_back(tmp_path):
    config = load_config(overrides=['model.preset=desk', 'mel.n_mels=64', 'train.accum=4'])
    path = tmp_path / 'dump.yaml'
    path.write_text(dump_config(config))
    assert load_config(str(path)) == config


def test_unreadable_config_files(tmp_path):
    with pytest.raises(InputError):
        load_config(str(tmp_path / 'missing.yaml'))
    path = tmp_path / 'bad.yaml'
    path.write_text(u'model: [unclosed\n')
    with pytest.raises(ConfigError):
        load_config(str(path))
