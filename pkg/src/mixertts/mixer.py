#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``mixer`` module contains the Mixer-TTS block and the encoder/decoder
stacks built from it.

A block is a time-mix sub-block followed by a channel-mix sub-block. Both
have the same shape::

    x + Dropout(Mask(Op_2(GELU(Mask(Op_1(Mask(LayerNorm(x))))))))

where the ``Op``s are two depth-wise 1D convolutions (time-mix, no expansion)
or two linear layers ``C -> 4C -> C`` (channel-mix). Masking after every
position-mixing step keeps the output at valid positions independent of
whatever sits in the padded positions of a batch.
"""

from collections import OrderedDict
from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .numerics import (Module, ParamSpec, apply_sequence_mask, depthwise_conv1d,
                       dropout, gelu, layer_norm, linear, scoped, subset)

LAYER_NORM_EPS = 1e-5


@dataclass
class MixerBlockConfig:
    """hyperparameters of one Mixer-TTS block"""
    feature_dim: int = 384
    kernel_size: int = 11
    expansion_factor: int = 4
    dropout_p: float = 0.15

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive, got {0}".format(self.feature_dim))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd, got {0}".format(self.kernel_size))
        if self.expansion_factor < 1:
            raise ConfigError("expansion_factor must be >= 1, got {0}".format(
                self.expansion_factor))
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1), got {0}".format(self.dropout_p))

    @property
    def hidden_dim(self):
        """width of the channel-mix MLP"""
        return self.feature_dim * self.expansion_factor


@dataclass
class StackConfig:
    """
    a stack of ``n_blocks`` blocks whose time-mix kernel grows linearly from
    ``kernel_start`` to ``kernel_end`` in steps of ``kernel_step``
    """
    n_blocks: int = 6
    kernel_start: int = 11
    kernel_end: int = 21
    kernel_step: int = 2

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0, got {0}".format(self.n_blocks))
        if self.n_blocks == 0:
            return
        expected_end = self.kernel_start + (self.n_blocks - 1) * self.kernel_step
        if expected_end != self.kernel_end:
            raise ConfigError(
                "{0} blocks starting at kernel {1} with step {2} end at {3}, "
                "not at {4}".format(self.n_blocks, self.kernel_start,
                                    self.kernel_step, expected_end, self.kernel_end))
        even = [k for k in self.kernels if k % 2 == 0 or k < 1]
        if even:
            raise ConfigError("stack kernels must be odd and positive, got {0}".format(even))

    @property
    def kernels(self):
        return [self.kernel_start + i * self.kernel_step for i in range(self.n_blocks)]


class MixerBlock(Module):
    """one Mixer-TTS block; parameters live in the dictionary passed to calls"""
    def __init__(self, cfg):
        self.cfg = cfg

    def param_specs(self):
        C, H, K = self.cfg.feature_dim, self.cfg.hidden_dim, self.cfg.kernel_size
        return OrderedDict([
            ('time.norm.gamma', ParamSpec((C,), 'ones')),
            ('time.norm.beta', ParamSpec((C,), 'zeros')),
            ('time.conv1.weight', ParamSpec((C, K), 'uniform', K)),
            ('time.conv1.bias', ParamSpec((C,), 'uniform', K)),
            ('time.conv2.weight', ParamSpec((C, K), 'uniform', K)),
            ('time.conv2.bias', ParamSpec((C,), 'uniform', K)),
            ('channel.norm.gamma', ParamSpec((C,), 'ones')),
            ('channel.norm.beta', ParamSpec((C,), 'zeros')),
            ('channel.fc1.weight', ParamSpec((C, H), 'uniform', C)),
            ('channel.fc1.bias', ParamSpec((H,), 'uniform', C)),
            ('channel.fc2.weight', ParamSpec((H, C), 'uniform', H)),
            ('channel.fc2.bias', ParamSpec((C,), 'uniform', H)),
        ])

    def __call__(self, x, lengths, params, training=False, rng=None):
        return mixer_block(x, lengths, self.cfg, params, training, rng)


def _check_channels(x, cfg):
    if x.ndim != 3 or x.shape[-1] != cfg.feature_dim:
        raise DimensionError(
            "mixer blocks expect [B, T, {0}] inputs, got {1}".format(cfg.feature_dim, x.shape))


def time_mix(x, lengths, cfg, params, training=False, rng=None):
    """
    mixes information across time with two depth-wise convolutions.

    Parameters
    ----------
    x : Tensor
        [B, T, C] input, zero at padded positions
    lengths : list of int
        valid length of every sequence in the batch
    cfg : MixerBlockConfig
    params : dict
        ``norm.gamma``, ``norm.beta``, ``conv1.weight`` ... (without the
        ``time.`` prefix)

    Returns
    -------
    Tensor
        [B, T, C], re-masked
    """
    _check_channels(x, cfg)
    h = layer_norm(x, params['norm.gamma'], params['norm.beta'], LAYER_NORM_EPS)
    h = apply_sequence_mask(h, lengths)
    h = depthwise_conv1d(h, params['conv1.weight'], params['conv1.bias'])
    h = gelu(apply_sequence_mask(h, lengths))
    h = depthwise_conv1d(h, params['conv2.weight'], params['conv2.bias'])
    h = dropout(apply_sequence_mask(h, lengths), cfg.dropout_p, training, rng)
    return apply_sequence_mask(x + h, lengths)


def channel_mix(x, lengths, cfg, params, training=False, rng=None):
    """
    mixes information across channels with a ``C -> expansion*C -> C`` MLP
    applied at every position.
    """
    _check_channels(x, cfg)
    h = layer_norm(x, params['norm.gamma'], params['norm.beta'], LAYER_NORM_EPS)
    h = linear(h, params['fc1.weight'], params['fc1.bias'])
    h = gelu(apply_sequence_mask(h, lengths))
    h = linear(h, params['fc2.weight'], params['fc2.bias'])
    h = dropout(apply_sequence_mask(h, lengths), cfg.dropout_p, training, rng)
    return apply_sequence_mask(x + h, lengths)


def mixer_block(x, lengths, cfg, params, training=False, rng=None):
    """time-mix first, then channel-mix"""
    x = time_mix(x, lengths, cfg, subset(params, 'time'), training, rng)
    return channel_mix(x, lengths, cfg, subset(params, 'channel'), training, rng)


def build_stack(stack_cfg, block_cfg):
    """
    returns the ordered list of ``MixerBlock``s of a stack. Block ``i`` gets
    the time-mix kernel ``kernel_start + i * kernel_step``; everything else is
    taken from ``block_cfg``.
    """
    return [MixerBlock(MixerBlockConfig(feature_dim=block_cfg.feature_dim,
                                        kernel_size=kernel,
                                        expansion_factor=block_cfg.expansion_factor,
                                        dropout_p=block_cfg.dropout_p))
            for kernel in stack_cfg.kernels]


def stack_param_specs(blocks):
    specs = OrderedDict()
    for i, block in enumerate(blocks):
        specs.update(scoped(block.param_specs(), str(i)))
    return specs


def run_stack(x, lengths, blocks, params, training=False, rng=None):
    """
    applies ``blocks`` in order. ``params`` holds the parameters of block
    ``i`` under the prefix ``i.``. An empty stack returns its (masked) input.
    """
    x = apply_sequence_mask(x, lengths)
    for i, block in enumerate(blocks):
        x = block(x, lengths, subset(params, str(i)), training, rng)
    return x
