#!/usr/bin/env python
# -*- coding: utf-8 -*-

import numpy as np
import pytest
from scipy.special import logsumexp

from mixertts.aligner import (AlignerConfig, AlignmentEncoder, AlignmentLattice,
                              MonotonicPath, beta_binomial_prior, encode_for_alignment,
                              forward_sum_loss, soft_alignment, viterbi_durations,
                              viterbi_path)
from mixertts.debug import brute_force_best_path, brute_force_log_total, enumerate_paths
from mixertts.errors import AlignmentError, ConfigError, DimensionError
from mixertts.numerics import Tensor, backward, default_dtype


def random_lattice(rng, n_frames, n_tokens, requires_grad=False):
    logits = rng.standard_normal((n_frames, n_tokens)) * 2.0
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return AlignmentLattice(Tensor(log_probs, requires_grad=requires_grad,
                                   dtype=np.float64))


@pytest.mark.parametrize('n_frames,n_tokens', [(1, 1), (4, 1), (5, 2), (6, 3), (7, 7), (8, 4)])
def test_forward_sum_matches_enumeration(rng, n_frames, n_tokens):
    lattice = random_lattice(rng, n_frames, n_tokens)
    expected = brute_force_log_total(lattice.log_probs.data)
    assert -forward_sum_loss(lattice).item() == pytest.approx(expected, abs=1e-9)


def test_forward_sum_gradient_is_minus_the_posterior(rng):
    lattice = random_lattice(rng, 7, 3, requires_grad=True)
    backward(forward_sum_loss(lattice))
    grad = lattice.log_probs.grad
    # every frame sits on exactly one token of every path
    np.testing.assert_allclose(grad.sum(axis=1), -1.0, atol=1e-10)
    assert grad[0, 0] == pytest.approx(-1.0)
    assert grad[-1, -1] == pytest.approx(-1.0)
    assert np.all(grad <= 1e-12)


def test_infeasible_lattices(rng):
    with pytest.raises(AlignmentError):
        forward_sum_loss(random_lattice(rng, 3, 4))
    with pytest.raises(AlignmentError):
        viterbi_durations(random_lattice(rng, 2, 5))
    with pytest.raises(DimensionError):
        AlignmentLattice(Tensor(np.zeros(4)))


def test_single_path_cases(rng):
    path, durations = viterbi_durations(random_lattice(rng, 5, 5))
    assert durations == [1, 1, 1, 1, 1]
    assert path.assignment == [0, 1, 2, 3, 4]
    _, durations = viterbi_durations(random_lattice(rng, 6, 1))
    assert durations == [6]


@pytest.mark.parametrize('n_frames,n_tokens', [(5, 2), (7, 3), (8, 4)])
def test_viterbi_matches_brute_force(rng, n_frames, n_tokens):
    for _ in range(20):
        lattice = random_lattice(rng, n_frames, n_tokens)
        path, durations = viterbi_durations(lattice)
        best, _ = brute_force_best_path(lattice.log_probs.data)
        assert path.assignment == best
        assert sum(durations) == n_frames
        assert min(durations) >= 1
        assert path.is_valid(n_tokens)


def test_viterbi_score_is_the_path_score(rng):
    log_probs = random_lattice(rng, 6, 3).log_probs.data
    path, score = viterbi_path(log_probs)
    assert score == pytest.approx(sum(log_probs[t, n] for t, n in enumerate(path.assignment)))


def test_enumerate_paths_counts():
    # N-1 advance frames out of T-1 candidates
    assert len(list(enumerate_paths(6, 3))) == 10
    assert list(enumerate_paths(3, 3)) == [[0, 1, 2]]


def test_monotonic_path():
    path = MonotonicPath([0, 0, 1, 2, 2])
    assert path.is_valid(3)
    assert not path.is_valid(4)
    assert not MonotonicPath([0, 2, 2]).is_valid(3)
    assert path.durations(3) == [2, 1, 2]
    matrix = path.as_matrix(3)
    assert matrix.shape == (5, 3)
    np.testing.assert_array_equal(matrix.sum(axis=1), 1)
    np.testing.assert_array_equal(matrix.sum(axis=0), [2, 1, 2])


def test_beta_binomial_prior():
    prior = beta_binomial_prior(4, 10)
    assert prior.shape == (10, 4)
    np.testing.assert_allclose(np.exp(prior).sum(axis=1), 1.0, atol=1e-6)
    assert np.argmax(prior[0]) == 0
    assert np.argmax(prior[-1]) == 3
    modes = np.argmax(prior, axis=1)
    assert np.all(np.diff(modes) >= 0)


def test_soft_alignment_rows_are_distributions(rng):
    with default_dtype(np.float64):
        lattice = soft_alignment(Tensor(rng.standard_normal((3, 4))),
                                 Tensor(rng.standard_normal((6, 4))),
                                 beta_binomial_prior(3, 6))
    assert (lattice.n_frames, lattice.n_tokens) == (6, 3)
    np.testing.assert_allclose(logsumexp(lattice.log_probs.data, axis=1), 0.0, atol=1e-10)


def test_closest_token_gets_the_highest_probability():
    text_enc = Tensor(np.array([[0.0, 0.0], [5.0, 5.0]]), dtype=np.float64)
    mel_enc = Tensor(np.array([[0.1, 0.0], [4.9, 5.0], [5.1, 5.0]]), dtype=np.float64)
    path, durations = viterbi_durations(soft_alignment(text_enc, mel_enc))
    assert durations == [1, 2]


def test_encode_for_alignment(rng):
    cfg = AlignerConfig(text_dim=4, n_mels=5, attn_dim=3)
    params = AlignmentEncoder(cfg).init_parameters(rng)
    text_enc, mel_enc = encode_for_alignment(Tensor(rng.standard_normal((2, 3, 4))),
                                             rng.standard_normal((2, 6, 5)), params,
                                             [3, 2], [6, 4])
    assert text_enc.shape == (2, 3, 3)
    assert mel_enc.shape == (2, 6, 3)
    assert np.all(text_enc.data[1, 2:] == 0)
    assert np.all(mel_enc.data[1, 4:] == 0)
    single_text, single_mel = encode_for_alignment(Tensor(rng.standard_normal((3, 4))),
                                                   rng.standard_normal((6, 5)), params)
    assert single_text.shape == (3, 3)
    assert single_mel.shape == (6, 3)


def test_aligner_parameter_count():
    # text: 3*384*384+384, 3*384*384+384; mel: 3*80*384+384, 3*384*384+384
    assert AlignmentEncoder(AlignerConfig()).count_parameters() == 1420800


@pytest.mark.parametrize('kwargs', [dict(kernel_size=2), dict(attn_dim=0),
                                    dict(prior_scaling=0.0)])
def test_aligner_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AlignerConfig(**kwargs)
