#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``debug`` module contains a number of functions which can be used to
check mixertts' numerics: finite-difference gradient checks for every
differentiable operation and for the full model, and brute-force oracles
for the alignment dynamic programs. The ``gradcheck`` command of the CLI
runs these suites.

All checks run in float64. Gradients are compared with central differences
(``h = 1e-5``); the relative error of a coordinate is
``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)``.
"""

import itertools
import logging
import math
from collections import OrderedDict, namedtuple

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx
from .adaptors import (PitchContour, PitchEmbedding, PredictorConfig, VariancePredictor,
                       embed_pitch, length_regulate_batch, predict_durations)
from .aligner import (AlignerConfig, AlignmentEncoder, AlignmentLattice,
                      beta_binomial_prior, encode_for_alignment, forward_sum_loss,
                      soft_alignment, viterbi_path)
from .audio_text import Batch
from .errors import InputError
from .lm_cond import FrozenEmbeddingTable, LmConditioner, LmConditionerConfig, attend_lm
from .mixer import MixerBlock, MixerBlockConfig, StackConfig
from .model import MixerTTS, ModelConfig
from .numerics import Tensor, backward, default_dtype

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
SUITES = ('numerics', 'aligner', 'model')

GradCase = namedtuple('GradCase', ['name', 'build'])
CheckResult = namedtuple('CheckResult', ['name', 'max_rel_error', 'n_instances', 'passed'])


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)


def _leaf(rng, *shape, **kwargs):
    scale = kwargs.get('scale', 1.0)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(out, weights):
    """a scalar that depends on every element of ``out``"""
    return nx.tsum(nx.mul(out, weights))


def gradcheck(fn, inputs, rng, max_coords=None, h=STEP):
    """
    compares the gradient ``backward`` computes for ``fn()`` with central
    differences.

    Parameters
    ----------
    fn : callable
        returns a scalar ``Tensor`` computed from ``inputs``
    inputs : list of Tensor
        float64 leaves with ``requires_grad=True``
    rng : numpy.random.Generator
        picks the checked coordinates
    max_coords : int or None
        check at most this many coordinates per input (all if None)

    Returns
    -------
    float
        the largest relative error over the checked coordinates
    """
    nx.zero_grad(OrderedDict((str(i), x) for i, x in enumerate(inputs)))
    backward(fn())
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[i]), numeric))
    return worst


# operation suites; every builder returns (fn, inputs)

def _unary(op, positive=False, away_from_zero=False, shape=(3, 4)):
    def build(rng):
        data = rng.standard_normal(shape)
        if positive:
            data = np.abs(data) + 0.5
        if away_from_zero:
            data = np.sign(data) * (np.abs(data) + 0.1)
        x = Tensor(data, requires_grad=True)
        weights = rng.standard_normal(op(x).shape)
        return (lambda: _project(op(x), weights)), [x]
    return build


def _binary(op, shape_a, shape_b, positive_b=False):
    def build(rng):
        a = _leaf(rng, *shape_a)
        b = Tensor(1.0 + rng.random(shape_b) if positive_b else rng.standard_normal(shape_b),
                   requires_grad=True)
        weights = rng.standard_normal(op(a, b).shape)
        return (lambda: _project(op(a, b), weights)), [a, b]
    return build


def _build_linear(rng):
    x, W, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    weights = rng.standard_normal((2, 3, 5))
    return (lambda: _project(nx.linear(x, W, b), weights)), [x, W, b]


def _build_depthwise(rng):
    x, k, b = _leaf(rng, 2, 6, 3), _leaf(rng, 3, 5), _leaf(rng, 3)
    weights = rng.standard_normal((2, 6, 3))
    return (lambda: _project(nx.depthwise_conv1d(x, k, b), weights)), [x, k, b]


def _build_conv1d(rng):
    x, W, b = _leaf(rng, 2, 5, 3), _leaf(rng, 3, 3, 4), _leaf(rng, 4)
    weights = rng.standard_normal((2, 5, 4))
    return (lambda: _project(nx.conv1d(x, W, b), weights)), [x, W, b]


def _build_layer_norm(rng):
    x, gamma, beta = _leaf(rng, 2, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    weights = rng.standard_normal((2, 3, 5))
    return (lambda: _project(nx.layer_norm(x, gamma, beta), weights)), [x, gamma, beta]


def _build_dropout(rng):
    x = _leaf(rng, 4, 5)
    weights = rng.standard_normal((4, 5))
    seed = int(rng.integers(1 << 30))

    def fn():
        return _project(nx.dropout(x, 0.3, True, np.random.default_rng(seed)), weights)
    return fn, [x]


def _build_mask(rng):
    x = _leaf(rng, 2, 4, 3)
    weights = rng.standard_normal((2, 4, 3))
    return (lambda: _project(nx.apply_sequence_mask(x, [4, 2]), weights)), [x]


def _build_embedding(rng):
    table = _leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    weights = rng.standard_normal((2, 4, 3))
    return (lambda: _project(nx.embedding(table, ids), weights)), [table]


def _build_pairwise(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 5, 3)
    weights = rng.standard_normal((5, 4))
    return (lambda: _project(nx.pairwise_distance(a, b), weights)), [a, b]


def _build_mse(rng):
    pred = _leaf(rng, 3, 4)
    target = rng.standard_normal((3, 4))
    mask = rng.random((3, 4)) > 0.3
    return (lambda: nx.mse(pred, target, mask)), [pred]


def _build_getitem(rng):
    x = _leaf(rng, 4, 5)
    rows = np.array([0, 2, 2, 3])
    weights = rng.standard_normal((4, 3))
    return (lambda: _project(x[rows, 1:4], weights)), [x]


NUMERICS_CASES = [
    GradCase('add', _binary(nx.add, (3, 4), (4,))),
    GradCase('sub', _binary(nx.sub, (3, 4), (3, 1))),
    GradCase('mul', _binary(nx.mul, (2, 3, 4), (3, 4))),
    GradCase('div', _binary(nx.div, (3, 4), (3, 4), positive_b=True)),
    GradCase('matmul', _binary(nx.matmul, (2, 3, 4), (4, 5))),
    GradCase('exp', _unary(nx.exp)),
    GradCase('sum', _unary(lambda x: nx.tsum(x, axis=1, keepdims=True))),
    GradCase('mean', _unary(lambda x: nx.mean(x, axis=0))),
    GradCase('reshape', _unary(lambda x: nx.reshape(x, (2, 6)))),
    GradCase('transpose', _unary(lambda x: nx.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
    GradCase('getitem', _build_getitem),
    GradCase('linear', _build_linear),
    GradCase('depthwise_conv1d', _build_depthwise),
    GradCase('conv1d', _build_conv1d),
    GradCase('layer_norm', _build_layer_norm),
    GradCase('gelu', _unary(nx.gelu)),
    GradCase('relu', _unary(nx.relu, away_from_zero=True)),
    GradCase('log_softmax', _unary(lambda x: nx.log_softmax(x, axis=-1))),
    GradCase('softmax', _unary(lambda x: nx.softmax(x, axis=0))),
    GradCase('dropout', _build_dropout),
    GradCase('apply_sequence_mask', _build_mask),
    GradCase('embedding', _build_embedding),
    GradCase('pairwise_distance', _build_pairwise),
    GradCase('mse', _build_mse),
]


def _build_forward_sum(rng):
    T = int(rng.integers(3, 8))
    N = int(rng.integers(1, T + 1))
    logits = _leaf(rng, T, N)
    return (lambda: forward_sum_loss(AlignmentLattice(nx.log_softmax(logits, axis=1)))), \
        [logits]


def _build_soft_alignment(rng):
    text_enc, mel_enc = _leaf(rng, 3, 4), _leaf(rng, 6, 4)
    prior = beta_binomial_prior(3, 6)
    return (lambda: forward_sum_loss(soft_alignment(text_enc, mel_enc, prior))), \
        [text_enc, mel_enc]


def _build_alignment_encoder(rng):
    cfg = AlignerConfig(text_dim=4, n_mels=5, attn_dim=3)
    params = AlignmentEncoder(cfg).init_parameters(rng)
    text = _leaf(rng, 2, 3, 4)
    mel = rng.standard_normal((2, 6, 5))

    def fn():
        text_enc, mel_enc = encode_for_alignment(text, mel, params, [3, 2], [6, 4])
        return forward_sum_loss(soft_alignment(text_enc[1, :2], mel_enc[1, :4]))
    return fn, [text] + list(params.values())


ALIGNER_CASES = [
    GradCase('forward_sum_loss', _build_forward_sum),
    GradCase('soft_alignment', _build_soft_alignment),
    GradCase('encode_for_alignment', _build_alignment_encoder),
]


def _build_mixer_block(rng):
    block = MixerBlock(MixerBlockConfig(feature_dim=4, kernel_size=3, expansion_factor=2,
                                        dropout_p=0.0))
    params = block.init_parameters(rng)
    x = _leaf(rng, 2, 5, 4)
    weights = rng.standard_normal((2, 5, 4))
    return (lambda: _project(block(x, [5, 3], params), weights)), [x] + list(params.values())


def _build_predictor(rng):
    cfg = PredictorConfig(in_dim=4, hidden=3, dropout_p=0.0)
    params = VariancePredictor(cfg).init_parameters(rng)
    x = _leaf(rng, 2, 5, 4)
    weights = rng.standard_normal((2, 5))
    return (lambda: _project(predict_durations(x, [5, 3], cfg, params), weights)), \
        [x] + list(params.values())


def _build_pitch_embedding(rng):
    params = PitchEmbedding(4).init_parameters(rng)
    pitch = rng.standard_normal((2, 5))
    weights = rng.standard_normal((2, 5, 4))
    return (lambda: _project(embed_pitch(pitch, params, [5, 3]), weights)), \
        list(params.values())


def _build_length_regulator(rng):
    enc = _leaf(rng, 2, 3, 4)
    durations = [np.array([2, 0, 1]), np.array([1, 3])]
    weights = rng.standard_normal((2, 4, 4))
    return (lambda: _project(length_regulate_batch(enc, durations, [3, 2])[0], weights)), [enc]


def _build_attend_lm(rng):
    params = LmConditioner(LmConditionerConfig(feature_dim=4, lm_dim=3,
                                               max_positions=8)).init_parameters(rng)
    t_e = _leaf(rng, 2, 5, 4)
    lm_emb = rng.standard_normal((2, 3, 3))
    weights = rng.standard_normal((2, 5, 4))
    return (lambda: _project(attend_lm(t_e, lm_emb, params, [5, 3], [3, 2]), weights)), \
        [t_e] + list(params.values())


def tiny_model_config(extended=False):
    """a model small enough for finite differences over its full graph"""
    return ModelConfig(vocab_size=10, feature_dim=8, n_mels=6,
                       encoder=StackConfig(1, 3, 3, 2), decoder=StackConfig(1, 3, 3, 2),
                       duration_predictor=PredictorConfig(hidden=4),
                       pitch_predictor=PredictorConfig(hidden=4),
                       aligner_dim=4, extended=extended, lm_dim=5, max_positions=16)


def random_batch(rng, n_mels, vocab_size, text_lengths=(3, 2), mel_lengths=(7, 5),
                 lm_lengths=None, lm_vocab=8):
    """a padded ``Batch`` with random symbols, mel frames and pitch"""
    B = len(text_lengths)
    symbols = np.zeros((B, max(text_lengths)), dtype=np.int64)
    mels = np.zeros((B, max(mel_lengths), n_mels))
    pitch = []
    for b, (n, t) in enumerate(zip(text_lengths, mel_lengths)):
        symbols[b, :n] = rng.integers(1, vocab_size, size=n)
        mels[b, :t] = rng.standard_normal((t, n_mels))
        f0 = 100.0 + 100.0 * rng.random(t)
        f0[rng.random(t) < 0.3] = 0.0
        pitch.append(PitchContour(f0))
    lm_ids = None
    if lm_lengths is not None:
        lm_ids = np.zeros((B, max(lm_lengths)), dtype=np.int64)
        for b, m in enumerate(lm_lengths):
            lm_ids[b, :m] = rng.integers(0, lm_vocab, size=m)
        lm_lengths = list(lm_lengths)
    return Batch(['u{0}'.format(b) for b in range(B)], symbols, list(text_lengths), mels,
                 list(mel_lengths), pitch, 150.0, 30.0, lm_ids, lm_lengths)


def random_lm_table(rng, n_tokens=8, dim=5):
    return FrozenEmbeddingTable({'t{0}'.format(i): i for i in range(n_tokens)},
                                rng.standard_normal((n_tokens, dim)))


def _model_case(extended):
    def build(rng):
        cfg = tiny_model_config(extended)
        table = random_lm_table(rng, dim=cfg.lm_dim) if extended else None
        model = MixerTTS(cfg, lm_table=table, seed=int(rng.integers(1 << 30)))
        batch = random_batch(rng, cfg.n_mels, cfg.vocab_size,
                             lm_lengths=(4, 2) if extended else None)

        def fn():
            out = model.forward_train(batch, training=False)
            return model.total_loss(out, batch)[0]
        return fn, list(model.params.values())
    return build


MODEL_CASES = [
    GradCase('mixer_block', _build_mixer_block),
    GradCase('variance_predictor', _build_predictor),
    GradCase('embed_pitch', _build_pitch_embedding),
    GradCase('length_regulate_batch', _build_length_regulator),
    GradCase('attend_lm', _build_attend_lm),
    GradCase('model_basic', _model_case(extended=False)),
    GradCase('model_extended', _model_case(extended=True)),
]

CASES = OrderedDict([('numerics', NUMERICS_CASES), ('aligner', ALIGNER_CASES),
                     ('model', MODEL_CASES)])


def run_suite(suite, n_instances=20, seed=0, max_coords=6, tolerance=TOLERANCE):
    """
    runs ``n_instances`` seeded random instances of every case of ``suite``
    (``numerics``, ``aligner`` or ``model``).

    :rtype: ``list`` of ``CheckResult``
    """
    if suite not in CASES:
        raise InputError("unknown gradcheck suite '{0}', use one of {1}".format(
            suite, list(CASES)))
    results = []
    with default_dtype(np.float64):
        for case in CASES[suite]:
            worst = 0.0
            for instance in range(n_instances):
                rng = np.random.default_rng([seed, instance, len(results)])
                fn, inputs = case.build(rng)
                worst = max(worst, gradcheck(fn, inputs, rng, max_coords))
            logger.debug("%s: max relative error %.3g", case.name, worst)
            results.append(CheckResult(case.name, worst, n_instances, worst <= tolerance))
    return results


def run_gradcheck(suites=SUITES, n_instances=20, seed=0):
    results = []
    for suite in suites:
        results.extend(run_suite(suite, n_instances, seed))
    return results


def format_report(results):
    lines = ['{0:<24} {1:>12} {2:>6}  {3}'.format('operation', 'max rel err', 'runs', 'ok')]
    for res in results:
        lines.append('{0:<24} {1:>12.3e} {2:>6}  {3}'.format(
            res.name, res.max_rel_error, res.n_instances, 'yes' if res.passed else 'FAILED'))
    return '\n'.join(lines)


# brute-force alignment oracles

def enumerate_paths(n_frames, n_tokens):
    """
    every monotonic path from token 0 to token N-1 over T frames, as token
    index lists. A path is fixed by the N-1 frames at which it advances.
    """
    for starts in itertools.combinations(range(1, n_frames), n_tokens - 1):
        path, token = [], 0
        boundaries = set(starts)
        for t in range(n_frames):
            if t in boundaries:
                token += 1
            path.append(token)
        yield path


def brute_force_log_total(log_probs):
    """log of the summed probability of all monotonic paths"""
    T, N = log_probs.shape
    scores = [sum(log_probs[t, n] for t, n in enumerate(path))
              for path in enumerate_paths(T, N)]
    return float(logsumexp(scores))


def brute_force_best_path(log_probs):
    T, N = log_probs.shape
    best, best_score = None, -math.inf
    for path in enumerate_paths(T, N):
        score = sum(log_probs[t, n] for t, n in enumerate(path))
        if score > best_score:
            best, best_score = path, score
    return best, best_score


AlignmentOracleResult = namedtuple('AlignmentOracleResult',
                                   ['n_lattices', 'max_abs_error', 'viterbi_mismatches'])


def alignment_oracle(n_per_shape=100, max_tokens=4, max_frames=8, seed=0):
    """
    compares the forward-sum loss and Viterbi decoding with exhaustive path
    enumeration on random lattices of every shape N <= max_tokens,
    N <= T <= max_frames.
    """
    rng = np.random.default_rng(seed)
    n_lattices, worst, mismatches = 0, 0.0, 0
    with default_dtype(np.float64):
        for n_tokens in range(1, max_tokens + 1):
            for n_frames in range(n_tokens, max_frames + 1):
                for _ in range(n_per_shape):
                    logits = rng.standard_normal((n_frames, n_tokens)) * 2.0
                    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
                    lattice = AlignmentLattice(Tensor(log_probs))
                    fast = -forward_sum_loss(lattice).item()
                    worst = max(worst, abs(fast - brute_force_log_total(log_probs)))
                    path, _ = viterbi_path(log_probs)
                    best, _ = brute_force_best_path(log_probs)
                    if path.durations(n_tokens) != np.bincount(best, minlength=n_tokens).tolist():
                        mismatches += 1
                    n_lattices += 1
    return AlignmentOracleResult(n_lattices, worst, mismatches)
