#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``aligner`` module learns which mel frames belong to which text token,
without any external alignments.

Text and mel-spectrogram are encoded with small convolutional stacks into a
common space. The "soft" alignment of frame ``t`` is a softmax over the
negated L2 distances between the frame's encoding and every token encoding.
The aligner is trained with a forward-sum loss: the negative log of the
summed probability of every monotonic path that starts at the first token,
ends at the last one and never skips a token. Viterbi decoding of the same
lattice yields the single best path; counting how many frames each token
occupies on that path gives the "ground truth" durations the rest of the
model is trained with.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import betabinom

from .errors import AlignmentError, ConfigError, DimensionError
from .numerics import (Module, ParamSpec, Tensor, apply_sequence_mask, conv1d,
                       log_softmax, make_op, pairwise_distance, relu)

logger = logging.getLogger(__name__)


@dataclass
class AlignerConfig:
    """
    text_dim : int
        channels of the text features fed to the aligner
    n_mels : int
        mel bins of the spectrogram
    attn_dim : int
        dimension of the shared space
    kernel_size : int
        kernel of the encoder convolutions
    use_prior : bool
        add a static beta-binomial prior to the distance logits
    prior_scaling : float
        sharpness of the prior (larger means flatter)
    """
    text_dim: int = 384
    n_mels: int = 80
    attn_dim: int = 384
    kernel_size: int = 3
    use_prior: bool = False
    prior_scaling: float = 1.0

    def __post_init__(self):
        if min(self.text_dim, self.n_mels, self.attn_dim) <= 0:
            raise ConfigError("aligner dimensions must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("aligner kernel_size must be odd, got {0}".format(
                self.kernel_size))
        if self.prior_scaling <= 0:
            raise ConfigError("prior_scaling must be positive")


@dataclass
class AlignmentLattice:
    """
    per-(frame, token) log-probabilities ``log p(token n | frame t)``, shape
    [T, N]. Every row is a log-distribution over the tokens.
    """
    log_probs: Tensor

    def __post_init__(self):
        if self.log_probs.ndim != 2:
            raise DimensionError("a lattice is a [T, N] matrix, got {0}".format(
                self.log_probs.shape))

    @property
    def n_frames(self):
        return self.log_probs.shape[0]

    @property
    def n_tokens(self):
        return self.log_probs.shape[1]

    def check_feasible(self):
        if self.n_tokens > self.n_frames:
            raise AlignmentError(
                "can't align {0} tokens to {1} frames: every token needs at "
                "least one frame".format(self.n_tokens, self.n_frames))
        if self.n_tokens == 0:
            raise AlignmentError("can't align an empty token sequence")


@dataclass
class MonotonicPath:
    """
    the token index assigned to each of the T frames. The path starts at
    token 0, ends at token N-1 and advances by at most one token per frame.
    """
    assignment: list = field(default_factory=list)

    def durations(self, n_tokens):
        counts = np.bincount(np.asarray(self.assignment, dtype=np.int64),
                             minlength=n_tokens)
        return [int(c) for c in counts]

    def is_valid(self, n_tokens):
        path = self.assignment
        if not path or path[0] != 0 or path[-1] != n_tokens - 1:
            return False
        return all(b - a in (0, 1) for a, b in zip(path, path[1:]))

    def as_matrix(self, n_tokens):
        """the hard alignment as a [T, N] 0/1 matrix"""
        matrix = np.zeros((len(self.assignment), n_tokens), dtype=np.int64)
        matrix[np.arange(len(self.assignment)), self.assignment] = 1
        return matrix


class AlignmentEncoder(Module):
    """
    two small convolutional stacks projecting text features and mel frames
    into a shared ``attn_dim``-dimensional space.
    """
    def __init__(self, cfg):
        self.cfg = cfg

    def param_specs(self):
        K, D = self.cfg.kernel_size, self.cfg.attn_dim
        specs = OrderedDict()
        for branch, in_dim in (('text', self.cfg.text_dim), ('mel', self.cfg.n_mels)):
            specs[branch + '.conv1.weight'] = ParamSpec((K, in_dim, D), 'uniform', K * in_dim)
            specs[branch + '.conv1.bias'] = ParamSpec((D,), 'uniform', K * in_dim)
            specs[branch + '.conv2.weight'] = ParamSpec((K, D, D), 'uniform', K * D)
            specs[branch + '.conv2.bias'] = ParamSpec((D,), 'uniform', K * D)
        return specs


def _encode_branch(x, lengths, params, branch):
    h = conv1d(x, params[branch + '.conv1.weight'], params[branch + '.conv1.bias'])
    h = relu(apply_sequence_mask(h, lengths))
    h = conv1d(h, params[branch + '.conv2.weight'], params[branch + '.conv2.bias'])
    return apply_sequence_mask(h, lengths)


def encode_for_alignment(text_emb, mel, params, text_lengths=None, mel_lengths=None):
    """
    encodes text features and mel frames into the shared alignment space.

    Parameters
    ----------
    text_emb : Tensor
        [N, C] or a padded batch [B, N, C]
    mel : Tensor or numpy.ndarray
        [T, M] or a padded batch [B, T, M]
    params : dict
        the ``AlignmentEncoder`` parameters
    text_lengths, mel_lengths : list of int or None
        valid lengths for batched inputs

    Returns
    -------
    text_enc, mel_enc : Tensor, Tensor
        [(B,) N, D] and [(B,) T, D]
    """
    mel = mel if isinstance(mel, Tensor) else Tensor(mel, dtype=text_emb.dtype)
    unbatched = text_emb.ndim == 2
    if unbatched:
        text_emb = text_emb.reshape((1,) + text_emb.shape)
        mel = mel.reshape((1,) + mel.shape)
    if text_lengths is None:
        text_lengths = [text_emb.shape[1]] * text_emb.shape[0]
    if mel_lengths is None:
        mel_lengths = [mel.shape[1]] * mel.shape[0]
    text_enc = _encode_branch(text_emb, text_lengths, params, 'text')
    mel_enc = _encode_branch(mel, mel_lengths, params, 'mel')
    if unbatched:
        return text_enc[0], mel_enc[0]
    return text_enc, mel_enc


def beta_binomial_prior(n_tokens, n_frames, scaling=1.0):
    """
    a static prior that favours alignments near the diagonal: frame ``t``
    gets a beta-binomial distribution over the tokens whose mode moves from
    the first to the last token as ``t`` grows. Returned as [T, N] log
    probabilities.
    """
    tokens = np.arange(n_tokens)
    prior = np.empty((n_frames, n_tokens))
    for t in range(n_frames):
        a, b = scaling * (t + 1), scaling * (n_frames - t)
        prior[t] = betabinom(n_tokens - 1, a, b).pmf(tokens)
    return np.log(np.maximum(prior, 1e-8))


def soft_alignment(text_enc, mel_enc, prior=None):
    """
    builds the soft alignment lattice of one utterance.

    :type text_enc: ``Tensor`` of shape [N, D]
    :type mel_enc: ``Tensor`` of shape [T, D]
    :param prior: optional [T, N] log-prior added to the logits
    :rtype: ``AlignmentLattice``
    """
    logits = -pairwise_distance(text_enc, mel_enc)
    if prior is not None:
        logits = logits + np.asarray(prior, dtype=logits.dtype)
    return AlignmentLattice(log_softmax(logits, axis=1))


def _forward_recursion(lp):
    """log-domain forward variables; alpha[t, n] includes lp[t, n]"""
    T, N = lp.shape
    alpha = np.full((T, N), -np.inf)
    alpha[0, 0] = lp[0, 0]
    for t in range(1, T):
        moved = np.concatenate(([-np.inf], alpha[t - 1, :-1]))
        alpha[t] = lp[t] + np.logaddexp(alpha[t - 1], moved)
    return alpha


def _backward_recursion(lp):
    """beta[t, n]: log-sum over path completions after (t, n), excluding lp[t, n]"""
    T, N = lp.shape
    beta = np.full((T, N), -np.inf)
    beta[T - 1, N - 1] = 0.0
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1] + lp[t + 1]
        moved = np.concatenate((stay[1:], [-np.inf]))
        beta[t] = np.logaddexp(stay, moved)
    return beta


def forward_sum_loss(lattice):
    """
    negative log of the total probability of all monotonic paths through the
    lattice, computed with the forward recursion
    ``alpha(t,n) = lp[t,n] + logaddexp(alpha(t-1,n), alpha(t-1,n-1))``.
    The gradient w.r.t. ``lp[t, n]`` is minus the posterior probability that
    a path visits token ``n`` at frame ``t``.

    Raises
    ------
    AlignmentError
        if the lattice has more tokens than frames
    """
    lattice.check_feasible()
    log_probs = lattice.log_probs
    lp = log_probs.data.astype(np.float64)
    alpha = _forward_recursion(lp)
    log_total = alpha[-1, -1]

    def grad_fn(g):
        beta = _backward_recursion(lp)
        posterior = np.exp(alpha + beta - log_total)
        return ((-g * posterior).astype(log_probs.dtype),)
    return make_op(np.asarray(-log_total, dtype=log_probs.dtype), (log_probs,),
                   grad_fn, 'forward_sum_loss')


def viterbi_path(log_probs):
    """
    best monotonic path through a [T, N] array of log-probabilities and its
    score. Ties prefer staying on the current token.
    """
    T, N = log_probs.shape
    delta = np.full((T, N), -np.inf)
    moved_from_prev = np.zeros((T, N), dtype=bool)
    delta[0, 0] = log_probs[0, 0]
    for t in range(1, T):
        moved = np.concatenate(([-np.inf], delta[t - 1, :-1]))
        take_move = moved > delta[t - 1]
        moved_from_prev[t] = take_move
        delta[t] = log_probs[t] + np.where(take_move, moved, delta[t - 1])
    path = [N - 1] * T
    n = N - 1
    for t in range(T - 1, 0, -1):
        path[t] = n
        if moved_from_prev[t, n]:
            n -= 1
    path[0] = n
    return MonotonicPath(path), float(delta[-1, -1])


def viterbi_durations(lattice):
    """
    binarizes the lattice: returns the most likely monotonic path and the
    number of frames it assigns to every token (all positive, summing to T).
    """
    lattice.check_feasible()
    path, _ = viterbi_path(lattice.log_probs.data.astype(np.float64))
    return path, path.durations(lattice.n_tokens)
