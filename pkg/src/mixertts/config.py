#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
reads, overrides and dumps mixertts configuration files.

A config file is YAML with up to three sections whose keys mirror the
fields of ``ModelConfig``, ``TrainConfig`` and ``MelConfig``::

    model:
      preset: desk          # full, desk or toy; optional
      extended: true
      encoder: {n_blocks: 3, kernel_start: 11, kernel_end: 15}
    train:
      steps: 500
      batch_size: 3
    mel:
      n_mels: 80

Keys that are left out keep their (preset) defaults. Unknown sections and
keys are rejected.
"""

import io
from dataclasses import asdict, dataclass, field

import pyaml
import yaml

from .audio_text import MelConfig
from .errors import ConfigError, InputError
from .model import ModelConfig
from .training import TrainConfig
from .util import merge_dataclass

SECTIONS = ('model', 'train', 'mel')


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mel: MelConfig = field(default_factory=MelConfig)

    def as_dict(self):
        return {'model': asdict(self.model), 'train': asdict(self.train),
                'mel': asdict(self.mel)}


def build_config(values=None):
    """
    builds a ``Config`` from a nested dictionary (as read from YAML).

    :raises ConfigError: on unknown sections/keys or invalid values
    """
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigError("a config file must contain a mapping of sections")
    unknown = [key for key in values if key not in SECTIONS]
    if unknown:
        raise ConfigError("unknown config section(s) {0}, expected {1}".format(
            unknown, list(SECTIONS)))
    model_values = values.get('model') or {}
    if not isinstance(model_values, dict):
        raise ConfigError("section 'model' must be a mapping, got {0!r}".format(model_values))
    model_values = dict(model_values)
    preset = model_values.pop('preset', None)
    model = ModelConfig()
    if preset is not None:
        model = ModelConfig.preset(preset, extended=bool(model_values.get('extended', False)))
    return Config(model=merge_dataclass(model, model_values, 'model'),
                  train=merge_dataclass(TrainConfig(), values.get('train') or {}, 'train'),
                  mel=merge_dataclass(MelConfig(), values.get('mel') or {}, 'mel'))


def parse_override(assignment):
    """
    turns ``section.key=value`` (``value`` is a YAML scalar, nested keys
    are dotted) into a nested dictionary
    """
    if '=' not in assignment:
        raise ConfigError("overrides look like section.key=value, got '{0}'".format(
            assignment))
    dotted, raw = assignment.split('=', 1)
    keys = dotted.strip().split('.')
    if len(keys) < 2 or not all(keys):
        raise ConfigError("override '{0}' needs a section and a key".format(assignment))
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise ConfigError("can't parse the value of '{0}': {1}".format(assignment, err))
    nested = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


def _deep_update(target, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _deep_update(target[key], value)
        else:
            target[key] = value
    return target


def load_config(path=None, overrides=()):
    """
    reads a YAML config file (or starts from the defaults when ``path`` is
    None) and applies ``section.key=value`` overrides on top.

    :rtype: ``Config``
    """
    values = {}
    if path is not None:
        try:
            with io.open(path, encoding='utf-8') as config_file:
                values = yaml.safe_load(config_file) or {}
        except IOError as err:
            raise InputError("can't read config file {0}: {1}".format(path, err))
        except yaml.YAMLError as err:
            raise ConfigError("{0} is not valid YAML: {1}".format(path, err))
    for assignment in overrides:
        values = _deep_update(values, parse_override(assignment))
    return build_config(values)


def dump_config(config):
    """the full configuration as a YAML string"""
    return pyaml.dump(config.as_dict())
