#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``model`` module assembles the Mixer-TTS graph.

Training mode::

    symbols -> embedding -> encoder stack -> (extended: LM attention)
        -> aligner (with the target mel) -> Viterbi durations
        -> + embedded ground-truth symbol pitch -> length regulator
        -> decoder stack -> linear -> mel

The duration and pitch predictors run on a detached copy of the encoder
output, so their losses never reach the encoder.

Inference mode replaces the aligner durations and the ground-truth pitch
with the predictors' outputs.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from .adaptors import (PitchEmbedding, PredictorConfig, VariancePredictor,
                       average_pitch, decode_durations, embed_pitch,
                       encode_durations, length_regulate_batch, normalize_symbol_pitch,
                       predict_durations, predict_pitch)
from .aligner import (AlignerConfig, AlignmentEncoder, beta_binomial_prior,
                      encode_for_alignment, forward_sum_loss, soft_alignment,
                      viterbi_durations)
from .audio_text import SymbolSequence
from .errors import ConfigError, DimensionError, InputError
from .lm_cond import (LmConditioner, LmConditionerConfig, attend_lm, load_demo_table,
                      load_table, lm_tokenize)
from .mixer import MixerBlockConfig, StackConfig, build_stack, run_stack, stack_param_specs
from .numerics import (Module, ParamSpec, Tensor, add, apply_sequence_mask,
                       count_specs, embedding, initialize, linear, mse, scoped,
                       sequence_mask, subset)

logger = logging.getLogger(__name__)

DEMO_LM_DIM = 32


@dataclass
class LossWeights:
    mel: float = 1.0
    aligner: float = 1.0
    durs: float = 0.1
    pitch: float = 0.1

    def as_tuple(self):
        return (self.mel, self.aligner, self.durs, self.pitch)


@dataclass
class ModelConfig:
    """
    every hyperparameter of the network. The input dimensions of the
    predictors follow ``feature_dim``.
    """
    vocab_size: int = 49
    feature_dim: int = 384
    n_mels: int = 80
    encoder: StackConfig = field(default_factory=lambda: StackConfig(6, 11, 21, 2))
    decoder: StackConfig = field(default_factory=lambda: StackConfig(9, 15, 31, 2))
    expansion_factor: int = 4
    dropout_p: float = 0.15
    duration_predictor: PredictorConfig = field(default_factory=PredictorConfig)
    pitch_predictor: PredictorConfig = field(default_factory=PredictorConfig)
    pitch_kernel: int = 3
    aligner_dim: int = 384
    aligner_kernel: int = 3
    use_prior: bool = False
    prior_scaling: float = 1.0
    extended: bool = False
    lm_table: str = None
    lm_dim: int = 128
    max_positions: int = 1024
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (pad plus one symbol)")
        if self.feature_dim <= 0 or self.n_mels <= 0:
            raise ConfigError("feature_dim and n_mels must be positive")
        if self.pitch_kernel % 2 == 0:
            raise ConfigError("pitch_kernel must be odd")
        if min(self.loss_weights.as_tuple()) < 0:
            raise ConfigError("loss weights can't be negative")
        self.duration_predictor = replace(self.duration_predictor, in_dim=self.feature_dim)
        self.pitch_predictor = replace(self.pitch_predictor, in_dim=self.feature_dim)
        # construction validates the derived sub-configs
        self.block_config
        self.aligner_config
        if self.extended:
            self.lm_config

    @property
    def block_config(self):
        return MixerBlockConfig(self.feature_dim, 3, self.expansion_factor, self.dropout_p)

    @property
    def aligner_config(self):
        return AlignerConfig(self.feature_dim, self.n_mels, self.aligner_dim,
                             self.aligner_kernel, self.use_prior, self.prior_scaling)

    @property
    def lm_config(self):
        return LmConditionerConfig(self.feature_dim, self.lm_dim, self.max_positions)

    @classmethod
    def full(cls, extended=False):
        """the full-size geometry: 384 channels, 6 + 9 blocks"""
        return cls(extended=extended)

    @classmethod
    def desk(cls, extended=False):
        """reduced dims for CPU training: 192 channels, 3 + 4 blocks"""
        return cls(feature_dim=192, encoder=StackConfig(3, 11, 15, 2),
                   decoder=StackConfig(4, 15, 21, 2),
                   duration_predictor=PredictorConfig(hidden=192, dropout_p=0.1),
                   pitch_predictor=PredictorConfig(hidden=192, dropout_p=0.1),
                   aligner_dim=192, dropout_p=0.1, extended=extended,
                   lm_dim=DEMO_LM_DIM, max_positions=512)

    @classmethod
    def toy(cls, extended=False):
        """a tiny model for tests and gradient checks"""
        return cls(feature_dim=32, encoder=StackConfig(2, 3, 5, 2),
                   decoder=StackConfig(2, 3, 5, 2),
                   duration_predictor=PredictorConfig(hidden=16, dropout_p=0.1),
                   pitch_predictor=PredictorConfig(hidden=16, dropout_p=0.1),
                   aligner_dim=16, dropout_p=0.1, extended=extended,
                   lm_dim=DEMO_LM_DIM, max_positions=256)

    @classmethod
    def preset(cls, name, extended=False):
        presets = {'full': cls.full, 'desk': cls.desk, 'toy': cls.toy}
        if name not in presets:
            raise ConfigError("unknown model preset '{0}', use one of {1}".format(
                name, sorted(presets)))
        return presets[name](extended=extended)


def model_param_specs(cfg):
    """
    the parameter specs of the whole model, keyed by dotted names such as
    ``encoder.0.time.conv1.weight``
    """
    C = cfg.feature_dim
    specs = OrderedDict()
    specs['embedding.weight'] = ParamSpec((cfg.vocab_size, C), 'normal')
    specs.update(scoped(stack_param_specs(build_stack(cfg.encoder, cfg.block_config)),
                        'encoder'))
    if cfg.extended:
        specs.update(scoped(LmConditioner(cfg.lm_config).param_specs(), 'lm'))
    specs.update(scoped(AlignmentEncoder(cfg.aligner_config).param_specs(), 'aligner'))
    specs.update(scoped(VariancePredictor(cfg.duration_predictor).param_specs(),
                        'duration_predictor'))
    specs.update(scoped(VariancePredictor(cfg.pitch_predictor).param_specs(),
                        'pitch_predictor'))
    specs.update(scoped(PitchEmbedding(C, cfg.pitch_kernel).param_specs(),
                        'pitch_embedding'))
    specs.update(scoped(stack_param_specs(build_stack(cfg.decoder, cfg.block_config)),
                        'decoder'))
    specs['proj.weight'] = ParamSpec((C, cfg.n_mels), 'uniform', C)
    specs['proj.bias'] = ParamSpec((cfg.n_mels,), 'uniform', C)
    return specs


def count_parameters(cfg):
    """number of trainable scalars; the frozen LM table is not counted"""
    return count_specs(model_param_specs(cfg))


def parameter_breakdown(cfg):
    """trainable scalars per top-level component, in graph order"""
    breakdown = OrderedDict()
    for name, spec in model_param_specs(cfg).items():
        component = name.split('.')[0]
        breakdown[component] = breakdown.get(component, 0) + \
            int(np.prod(spec.shape, dtype=np.int64))
    return breakdown


@dataclass
class ForwardOutput:
    """
    everything ``forward_train`` produces. ``mel`` is [B, T, M],
    ``log_durations`` and ``pitch`` are the predictor outputs [B, N];
    ``durations`` and ``pitch_target`` are what the decoder actually used.
    """
    mel: Tensor
    log_durations: Tensor
    pitch: Tensor
    durations: list
    pitch_target: np.ndarray
    text_lengths: list
    mel_lengths: list
    aligner_terms: list = field(default_factory=list)
    paths: list = field(default_factory=list)


@dataclass
class LossNormalizers:
    """
    the denominators of the mean losses. Computing them over all
    micro-batches of an optimizer step makes the summed micro-batch losses
    equal the loss of the concatenated batch.
    """
    mel_elements: float
    tokens: float
    utterances: float

    @classmethod
    def for_batches(cls, batches, n_mels):
        return cls(float(sum(sum(b.mel_lengths) for b in batches) * n_mels),
                   float(sum(sum(b.text_lengths) for b in batches)),
                   float(sum(len(b) for b in batches)))


@dataclass
class InferenceOutput:
    mel: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray

    @property
    def n_frames(self):
        return self.mel.shape[0]


class MixerTTS(Module):
    """
    the basic or (``cfg.extended``) extended Mixer-TTS model.

    Parameters
    ----------
    cfg : ModelConfig
    lm_table : FrozenEmbeddingTable or None
        frozen LM embeddings for the extended model; defaults to the table
        at ``cfg.lm_table`` or the bundled demo table
    params : dict or None
        existing parameters (e.g. from a checkpoint)
    seed : int
        seed of the parameter initialization
    """
    def __init__(self, cfg, lm_table=None, params=None, seed=0):
        self.cfg = cfg
        self.encoder_blocks = build_stack(cfg.encoder, cfg.block_config)
        self.decoder_blocks = build_stack(cfg.decoder, cfg.block_config)
        self.lm_table = None
        if cfg.extended:
            if lm_table is None:
                lm_table = load_table(cfg.lm_table) if cfg.lm_table else load_demo_table()
            if lm_table.dim != cfg.lm_dim:
                raise ConfigError("the LM table has {0}-dimensional embeddings, lm_dim is "
                                  "{1}".format(lm_table.dim, cfg.lm_dim))
            self.lm_table = lm_table
        specs = self.param_specs()
        if params is None:
            params = initialize(specs, np.random.default_rng(seed))
        else:
            _check_params(params, specs)
        self.params = params

    def param_specs(self):
        return model_param_specs(self.cfg)

    # shared pieces

    def _encode(self, params, symbols, text_lengths, lm_ids, lm_lengths, training, rng):
        x = embedding(params['embedding.weight'], symbols)
        enc = run_stack(x, text_lengths, self.encoder_blocks, subset(params, 'encoder'),
                        training, rng)
        if self.cfg.extended:
            if lm_ids is None:
                raise InputError("the extended model needs LM token ids")
            lm_emb = self.lm_table.lookup(lm_ids, dtype=enc.dtype)
            enc = attend_lm(enc, lm_emb, subset(params, 'lm'), text_lengths, lm_lengths)
        return enc

    def _predict(self, params, enc, text_lengths, training, rng):
        detached = enc.detach()
        log_durations = predict_durations(detached, text_lengths, self.cfg.duration_predictor,
                                          subset(params, 'duration_predictor'), training, rng)
        pitch = predict_pitch(detached, text_lengths, self.cfg.pitch_predictor,
                              subset(params, 'pitch_predictor'), training, rng)
        return log_durations, pitch

    def _decode(self, params, enc, pitch, durations, text_lengths, training, rng):
        tokens = add(enc, embed_pitch(pitch, subset(params, 'pitch_embedding'), text_lengths))
        frames, frame_lengths = length_regulate_batch(tokens, durations, text_lengths)
        dec = run_stack(frames, frame_lengths, self.decoder_blocks, subset(params, 'decoder'),
                        training, rng)
        mel = linear(dec, params['proj.weight'], params['proj.bias'])
        return apply_sequence_mask(mel, frame_lengths), frame_lengths

    # training

    def forward_train(self, batch, training=True, rng=None):
        """
        the training graph for a ``Batch``; durations come from the aligner
        and pitch from the batch's ground-truth contours.

        Raises
        ------
        AlignmentError
            if an utterance has more symbols than mel frames
        """
        params = self.params
        cfg = self.cfg
        text_lengths, mel_lengths = list(batch.text_lengths), list(batch.mel_lengths)
        enc = self._encode(params, batch.symbols, text_lengths, batch.lm_ids,
                           batch.lm_lengths, training, rng)
        text_enc, mel_enc = encode_for_alignment(enc, batch.mels, subset(params, 'aligner'),
                                                 text_lengths, mel_lengths)

        durations, paths, aligner_terms = [], [], []
        pitch_target = np.zeros(batch.symbols.shape)
        for b, (n_tokens, n_frames) in enumerate(zip(text_lengths, mel_lengths)):
            prior = None
            if cfg.use_prior:
                prior = beta_binomial_prior(n_tokens, n_frames, cfg.prior_scaling)
            lattice = soft_alignment(text_enc[b, :n_tokens], mel_enc[b, :n_frames], prior)
            aligner_terms.append(forward_sum_loss(lattice) * (1.0 / n_tokens))
            path, durs = viterbi_durations(lattice)
            paths.append(path)
            durations.append(np.asarray(durs, dtype=np.int64))
            symbol_pitch = average_pitch(batch.pitch[b], durs).data
            pitch_target[b, :n_tokens] = normalize_symbol_pitch(
                symbol_pitch, batch.pitch_mean, batch.pitch_std)

        mel, frame_lengths = self._decode(params, enc, pitch_target, durations, text_lengths,
                                          training, rng)
        if frame_lengths != mel_lengths:
            raise DimensionError("regulated lengths {0} differ from the mel lengths "
                                 "{1}".format(frame_lengths, mel_lengths))
        log_durations, pitch = self._predict(params, enc, text_lengths, training, rng)
        return ForwardOutput(mel, log_durations, pitch, durations, pitch_target,
                             text_lengths, mel_lengths, aligner_terms, paths)

    def total_loss(self, out, batch, normalizers=None):
        """
        ``w_mel * L_mel + w_aligner * L_aligner + w_durs * L_durs +
        w_pitch * L_pitch``, see ``total_loss``
        """
        return total_loss(out, batch, self.cfg.loss_weights, normalizers)

    # inference

    def infer_batch(self, sequences, pace=1.0, lm_ids=None):
        """
        synthesizes mel-spectrograms for several symbol sequences at once
        (eval mode, no dropout, no gradient tape).

        Parameters
        ----------
        sequences : list of SymbolSequence
        pace : float
            durations are multiplied by ``pace`` (2.0 is about half as fast)
        lm_ids : list of list of int or None
            LM token ids per sequence; for the extended model they default to
            the LM tokenization of each sequence's text

        Returns
        -------
        list of InferenceOutput
        """
        if not sequences:
            raise InputError("nothing to synthesize")
        params = OrderedDict((name, p.detach()) for name, p in self.params.items())
        sequences = [s if isinstance(s, SymbolSequence) else SymbolSequence(s)
                     for s in sequences]
        text_lengths = [len(s) for s in sequences]
        if min(text_lengths) == 0:
            raise InputError("can't synthesize an empty symbol sequence")
        if max(max(s.ids) for s in sequences) >= self.cfg.vocab_size:
            raise InputError("symbol ids exceed the model's vocabulary of {0}".format(
                self.cfg.vocab_size))
        symbols = np.zeros((len(sequences), max(text_lengths)), dtype=np.int64)
        for b, seq in enumerate(sequences):
            symbols[b, :len(seq)] = seq.ids

        padded_lm, lm_lengths = None, None
        if self.cfg.extended:
            if lm_ids is None:
                if any(s.text is None for s in sequences):
                    raise InputError("the extended model needs the text (or LM ids) of "
                                     "every sequence")
                lm_ids = [lm_tokenize(s.text, self.lm_table).ids for s in sequences]
            lm_lengths = [len(ids) for ids in lm_ids]
            padded_lm = np.zeros((len(sequences), max(lm_lengths)), dtype=np.int64)
            for b, ids in enumerate(lm_ids):
                padded_lm[b, :len(ids)] = ids

        enc = self._encode(params, symbols, text_lengths, padded_lm, lm_lengths, False, None)
        log_durations, pitch = self._predict(params, enc, text_lengths, False, None)
        durations = [decode_durations(log_durations.data[b, :n], pace)
                     for b, n in enumerate(text_lengths)]
        mel, frame_lengths = self._decode(params, enc, pitch.data, durations, text_lengths,
                                          False, None)
        return [InferenceOutput(mel.data[b, :frame_lengths[b]].copy(), durations[b],
                                pitch.data[b, :n].copy())
                for b, n in enumerate(text_lengths)]

    def forward_infer(self, symbols, pace=1.0, lm_ids=None):
        """synthesizes the mel-spectrogram of a single symbol sequence"""
        return self.infer_batch([symbols], pace,
                                None if lm_ids is None else [lm_ids])[0]

    def align(self, symbols, mel, lm_ids=None):
        """
        the most likely monotonic alignment of a symbol sequence to a
        [T, n_mels] mel-spectrogram.

        :rtype: (``MonotonicPath``, ``list`` of ``int`` durations)
        """
        params = OrderedDict((name, p.detach()) for name, p in self.params.items())
        seq = symbols if isinstance(symbols, SymbolSequence) else SymbolSequence(symbols)
        mel = np.asarray(mel)
        if mel.ndim != 2 or mel.shape[1] != self.cfg.n_mels:
            raise DimensionError("expected a [T, {0}] mel-spectrogram, got {1}".format(
                self.cfg.n_mels, mel.shape))
        lm_lengths = None
        if self.cfg.extended:
            if lm_ids is None:
                if seq.text is None:
                    raise InputError("the extended model needs the text (or LM ids)")
                lm_ids = lm_tokenize(seq.text, self.lm_table).ids
            lm_lengths = [len(lm_ids)]
            lm_ids = np.asarray(lm_ids, dtype=np.int64)[None, :]
        enc = self._encode(params, seq.ids[None, :], [len(seq)], lm_ids, lm_lengths,
                           False, None)
        text_enc, mel_enc = encode_for_alignment(enc[0], mel, subset(params, 'aligner'))
        prior = None
        if self.cfg.use_prior:
            prior = beta_binomial_prior(len(seq), mel.shape[0], self.cfg.prior_scaling)
        return viterbi_durations(soft_alignment(text_enc, mel_enc, prior))


def _check_params(params, specs):
    missing = [name for name in specs if name not in params]
    unexpected = [name for name in params if name not in specs]
    if missing or unexpected:
        raise ConfigError("parameters don't fit the model config (missing: {0}, "
                          "unexpected: {1})".format(missing[:5], unexpected[:5]))
    for name, spec in specs.items():
        if tuple(params[name].shape) != tuple(spec.shape):
            raise DimensionError("parameter {0} has shape {1}, expected {2}".format(
                name, params[name].shape, spec.shape))


def total_loss(out, batch, weights, normalizers=None):
    """
    the composite training loss.

    Parameters
    ----------
    out : ForwardOutput
    batch : Batch
    weights : LossWeights
    normalizers : LossNormalizers or None
        denominators of the mean losses; default to the counts of this
        batch (mean over valid mel elements, valid tokens and utterances)

    Returns
    -------
    loss : Tensor
        the weighted sum, a scalar
    components : dict
        float values of ``l_mel``, ``l_aligner``, ``l_durs`` and ``l_pitch``
    """
    if out.mel.shape != batch.mels.shape:
        raise DimensionError("predicted mel {0} vs target {1}".format(
            out.mel.shape, batch.mels.shape))
    if normalizers is None:
        normalizers = LossNormalizers.for_batches([batch], batch.mels.shape[-1])
    frame_mask = sequence_mask(out.mel_lengths, out.mel.shape[1])[:, :, None]
    token_mask = sequence_mask(out.text_lengths, out.log_durations.shape[1])

    l_mel = mse(out.mel, batch.mels, frame_mask, normalizers.mel_elements)
    duration_target = np.zeros(out.log_durations.shape)
    for b, durs in enumerate(out.durations):
        duration_target[b, :len(durs)] = encode_durations(durs)
    l_durs = mse(out.log_durations, duration_target, token_mask, normalizers.tokens)
    l_pitch = mse(out.pitch, out.pitch_target, token_mask, normalizers.tokens)
    l_aligner = reduce(add, out.aligner_terms) * (1.0 / normalizers.utterances)

    loss = (l_mel * weights.mel + l_aligner * weights.aligner
            + l_durs * weights.durs + l_pitch * weights.pitch)
    components = OrderedDict([('l_mel', l_mel.item()), ('l_aligner', l_aligner.item()),
                              ('l_durs', l_durs.item()), ('l_pitch', l_pitch.item())])
    return loss, components
