#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``adaptors`` module contains everything that sits between the encoder
and the decoder: the duration and pitch predictors, the pitch embedding,
symbol-level pitch averaging and the length regulator that expands token
features into frame features.

Durations are predicted in the log domain as ``log(1 + d)``; pitch is
predicted per token in dataset-normalized units (z-scores over voiced
frames, unvoiced tokens are 0).
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .numerics import (Module, ParamSpec, Tensor, apply_sequence_mask, conv1d,
                       dropout, gather_rows, layer_norm, linear, relu)

logger = logging.getLogger(__name__)

PREDICTOR_NORM_EPS = 1e-5


@dataclass
class PredictorConfig:
    """
    a stack of ``n_layers`` [conv1d -> ReLU -> LayerNorm -> dropout] layers
    followed by a linear projection to one value per token
    """
    in_dim: int = 384
    hidden: int = 256
    kernel: int = 3
    n_layers: int = 2
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.hidden <= 0 or self.in_dim <= 0:
            raise ConfigError("predictor dimensions must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("predictor kernel must be odd, got {0}".format(self.kernel))
        if self.n_layers < 1:
            raise ConfigError("a predictor needs at least one layer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("predictor dropout_p must be in [0, 1)")


class VariancePredictor(Module):
    """the shared architecture of the duration and the pitch predictor"""
    def __init__(self, cfg):
        self.cfg = cfg

    def param_specs(self):
        cfg = self.cfg
        specs = OrderedDict()
        in_dim = cfg.in_dim
        for i in range(cfg.n_layers):
            fan_in = cfg.kernel * in_dim
            specs['layers.{0}.conv.weight'.format(i)] = ParamSpec(
                (cfg.kernel, in_dim, cfg.hidden), 'uniform', fan_in)
            specs['layers.{0}.conv.bias'.format(i)] = ParamSpec((cfg.hidden,), 'uniform', fan_in)
            specs['layers.{0}.norm.gamma'.format(i)] = ParamSpec((cfg.hidden,), 'ones')
            specs['layers.{0}.norm.beta'.format(i)] = ParamSpec((cfg.hidden,), 'zeros')
            in_dim = cfg.hidden
        specs['proj.weight'] = ParamSpec((cfg.hidden, 1), 'uniform', cfg.hidden)
        specs['proj.bias'] = ParamSpec((1,), 'uniform', cfg.hidden)
        return specs


class PitchEmbedding(Module):
    """lifts one scalar pitch value per token to ``feature_dim`` channels"""
    def __init__(self, feature_dim, kernel=3):
        self.feature_dim = feature_dim
        self.kernel = kernel

    def param_specs(self):
        return OrderedDict([
            ('weight', ParamSpec((self.kernel, 1, self.feature_dim), 'uniform', self.kernel)),
            ('bias', ParamSpec((self.feature_dim,), 'uniform', self.kernel)),
        ])


@dataclass
class PitchContour:
    """
    per-frame fundamental frequency in Hz, 0 for unvoiced frames. ``mean``
    and ``std`` are the dataset statistics used for normalization.
    """
    frame_f0: np.ndarray
    normalized: bool = False
    mean: float = None
    std: float = None

    def __post_init__(self):
        self.frame_f0 = np.asarray(self.frame_f0, dtype=np.float64).reshape(-1)
        if not self.normalized and np.any(self.frame_f0 < 0):
            raise InputError("pitch values in Hz can't be negative")

    def __len__(self):
        return len(self.frame_f0)

    @property
    def voiced(self):
        return self.frame_f0 > 0

    def normalize(self, mean, std):
        """z-scores the voiced frames; unvoiced frames stay 0"""
        values = np.where(self.voiced, (self.frame_f0 - mean) / std, 0.0)
        return PitchContour(values, normalized=True, mean=mean, std=std)


def pitch_statistics(contours):
    """mean and standard deviation of all voiced frames of all ``contours``"""
    voiced = [c.frame_f0[c.voiced] for c in contours]
    voiced = np.concatenate(voiced) if voiced else np.zeros(0)
    if voiced.size < 2:
        logger.warning("fewer than two voiced frames; pitch statistics default to (0, 1)")
        return 0.0, 1.0
    std = float(voiced.std())
    return float(voiced.mean()), std if std > 0 else 1.0


def normalize_symbol_pitch(pitch_hz, mean, std):
    """z-scores voiced (non-zero) token pitch values, unvoiced tokens stay 0"""
    pitch_hz = np.asarray(pitch_hz, dtype=np.float64)
    return np.where(pitch_hz > 0, (pitch_hz - mean) / std, 0.0)


def average_pitch(contour, durations):
    """
    averages the voiced frames of every token's span.

    Parameters
    ----------
    contour : PitchContour
        per-frame pitch in Hz (0 = unvoiced)
    durations : list of int
        frames per token, summing to the number of frames

    Returns
    -------
    Tensor
        [N] mean pitch per token, 0 for fully unvoiced spans
    """
    durations = np.asarray(durations, dtype=np.int64)
    if durations.sum() != len(contour):
        raise DimensionError(
            "durations sum to {0} frames but the pitch contour has {1}".format(
                durations.sum(), len(contour)))
    f0 = contour.frame_f0
    voiced = contour.voiced.astype(np.float64)
    bounds = np.concatenate(([0], np.cumsum(durations)))
    voiced_sum = np.add.reduceat(np.concatenate((f0 * voiced, [0.0])), bounds[:-1])
    voiced_count = np.add.reduceat(np.concatenate((voiced, [0.0])), bounds[:-1])
    # reduceat returns the element at the start for empty spans
    voiced_sum[durations == 0] = 0.0
    voiced_count[durations == 0] = 0.0
    means = np.where(voiced_count > 0, voiced_sum / np.maximum(voiced_count, 1.0), 0.0)
    return Tensor(means, dtype=np.float64)


def _run_predictor(enc, lengths, cfg, params, training, rng):
    h = enc
    for i in range(cfg.n_layers):
        prefix = 'layers.{0}.'.format(i)
        h = conv1d(h, params[prefix + 'conv.weight'], params[prefix + 'conv.bias'])
        h = layer_norm(relu(h), params[prefix + 'norm.gamma'], params[prefix + 'norm.beta'],
                       PREDICTOR_NORM_EPS)
        h = dropout(apply_sequence_mask(h, lengths), cfg.dropout_p, training, rng)
    out = linear(h, params['proj.weight'], params['proj.bias'])
    out = apply_sequence_mask(out, lengths)
    return out.reshape(out.shape[:-1])


def predict_durations(enc, lengths, cfg, params, training=False, rng=None):
    """
    predicts ``log(1 + duration)`` for every token.

    :type enc: ``Tensor`` of shape [B, N, C]
    :rtype: ``Tensor`` of shape [B, N], 0 at padded positions
    """
    return _run_predictor(enc, lengths, cfg, params, training, rng)


def predict_pitch(enc, lengths, cfg, params, training=False, rng=None):
    """
    predicts one normalized pitch value per token.

    :type enc: ``Tensor`` of shape [B, N, C]
    :rtype: ``Tensor`` of shape [B, N], 0 at padded positions
    """
    return _run_predictor(enc, lengths, cfg, params, training, rng)


def encode_durations(durations):
    """training targets of the duration predictor: ``log(1 + d)``"""
    return np.log1p(np.asarray(durations, dtype=np.float64))


def decode_durations(log_durations, pace=1.0):
    """
    turns predicted ``log(1 + d)`` values into integer frame counts:
    ``clamp(round(exp(p) - 1), 0)``, then scaled by ``pace`` and re-rounded.
    If every token decodes to 0 frames, the token with the largest
    prediction gets one frame so the output is never empty.
    """
    if pace <= 0:
        raise InputError("pace must be positive, got {0}".format(pace))
    log_durations = np.asarray(log_durations, dtype=np.float64)
    durations = np.maximum(np.round(np.expm1(log_durations)), 0.0)
    durations = np.maximum(np.round(durations * pace), 0.0).astype(np.int64)
    if durations.size and durations.sum() == 0:
        durations[int(np.argmax(log_durations))] = 1
    return durations


def embed_pitch(pitch, params, lengths=None):
    """
    embeds normalized per-token pitch with a 1D convolution.

    Parameters
    ----------
    pitch : Tensor or numpy.ndarray
        [N] or a padded batch [B, N]
    params : dict
        ``weight`` [K, 1, C] and ``bias`` [C]

    Returns
    -------
    Tensor
        [(B,) N, C]
    """
    weight = params['weight']
    pitch = pitch if isinstance(pitch, Tensor) else Tensor(pitch, dtype=weight.dtype)
    unbatched = pitch.ndim == 1
    x = pitch.reshape(((1,) if unbatched else ()) + pitch.shape + (1,))
    if lengths is None:
        lengths = [x.shape[1]] * x.shape[0]
    x = apply_sequence_mask(x, lengths)
    out = apply_sequence_mask(conv1d(x, weight, params['bias']), lengths)
    return out[0] if unbatched else out


def length_regulate(enc, durations):
    """
    repeats token ``n``'s feature vector ``durations[n]`` times.

    :type enc: ``Tensor`` of shape [N, C]
    :type durations: ``list`` of ``int`` (>= 0, summing to >= 1)
    :rtype: ``Tensor`` of shape [sum(durations), C]
    """
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != (enc.shape[0],):
        raise DimensionError("got {0} durations for {1} tokens".format(
            durations.size, enc.shape[0]))
    if np.any(durations < 0):
        raise InputError("durations can't be negative")
    if durations.sum() < 1:
        raise InputError("all durations are zero; nothing to regulate")
    return gather_rows(enc, np.repeat(np.arange(len(durations)), durations))


def length_regulate_batch(enc, durations, text_lengths):
    """
    length regulation for a padded batch.

    Parameters
    ----------
    enc : Tensor
        [B, N, C]
    durations : list of int arrays
        the durations of the valid tokens of every utterance
    text_lengths : list of int

    Returns
    -------
    frames : Tensor
        [B, T_max, C], zero beyond each utterance's length
    frame_lengths : list of int
        ``sum(durations[b])`` for every utterance
    """
    B, N, C = enc.shape
    frame_lengths = []
    indices = []
    for b in range(B):
        durs = np.asarray(durations[b], dtype=np.int64)
        if durs.shape != (text_lengths[b],):
            raise DimensionError("utterance {0}: {1} durations for {2} tokens".format(
                b, durs.size, text_lengths[b]))
        if np.any(durs < 0) or durs.sum() < 1:
            raise InputError("utterance {0}: durations must be >= 0 and not all zero".format(b))
        indices.append(b * N + np.repeat(np.arange(len(durs)), durs))
        frame_lengths.append(int(durs.sum()))
    t_max = max(frame_lengths)
    index = np.zeros((B, t_max), dtype=np.int64)
    for b, rows in enumerate(indices):
        index[b, :len(rows)] = rows
    frames = gather_rows(enc.reshape(B * N, C), index)
    return apply_sequence_mask(frames, frame_lengths), frame_lengths
