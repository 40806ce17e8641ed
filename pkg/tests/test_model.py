#!/usr/bin/env python
# -*- coding: utf-8 -*-

from dataclasses import replace

import numpy as np
import pytest

from mixertts.adaptors import PitchContour
from mixertts.audio_text import (Dataset, Example, MelSpectrogram, SymbolSequence,
                                 SymbolVocab, collate, load_manifest, tokenize)
from mixertts.errors import AlignmentError, ConfigError, DimensionError, InputError
from mixertts.lm_cond import load_demo_table
from mixertts.model import (LossWeights, MixerTTS, ModelConfig, count_parameters,
                            model_param_specs, parameter_breakdown)
from mixertts.numerics import backward, default_dtype, initialize


@pytest.fixture
def tone_batch(tone_manifest, mel_cfg):
    dataset = Dataset.from_utterances(load_manifest(tone_manifest), SymbolVocab(), mel_cfg,
                                      lm_table=load_demo_table())
    return dataset.batch([0, 1, 2])


def test_full_size_parameter_counts():
    assert count_parameters(ModelConfig.full()) == 20449362
    assert count_parameters(ModelConfig.full(extended=True)) == 22466514


def parameter_formula(cfg):
    C, M = cfg.feature_dim, cfg.n_mels

    def block(kernel):
        # two depth-wise convs, a C -> 4C -> C MLP, two layer norms
        return 2 * (C * kernel + C) + (C * 4 * C + 4 * C) + (4 * C * C + C) + 4 * C

    def predictor(p):
        first = p.kernel * C * p.hidden + 3 * p.hidden
        rest = (p.n_layers - 1) * (p.kernel * p.hidden * p.hidden + 3 * p.hidden)
        return first + rest + p.hidden + 1

    K, D = cfg.aligner_kernel, cfg.aligner_dim
    aligner = (K * C * D + D) + (K * M * D + D) + 2 * (K * D * D + D)
    total = (cfg.vocab_size * C
             + sum(block(k) for k in cfg.encoder.kernels + cfg.decoder.kernels)
             + aligner + predictor(cfg.duration_predictor) + predictor(cfg.pitch_predictor)
             + cfg.pitch_kernel * C + C + C * M + M)
    if cfg.extended:
        P, L = cfg.max_positions, cfg.lm_dim
        total += 2 * P * C + (L * C + C) + 2 * (3 * C * C + C) + 2 * (C * C + C)
    return total


@pytest.mark.parametrize('cfg', [ModelConfig.toy(), ModelConfig.toy(extended=True),
                                 ModelConfig.desk(), ModelConfig.full(extended=True)])
def test_parameter_count_matches_the_formula(cfg):
    assert count_parameters(cfg) == parameter_formula(cfg)


def test_toy_parameter_count():
    # embedding 1568, blocks 35200, aligner 6976, predictors 4834, pitch 128, proj 2640
    assert count_parameters(ModelConfig.toy()) == 51346


def test_parameter_breakdown():
    breakdown = parameter_breakdown(ModelConfig.full())
    assert list(breakdown) == ['embedding', 'encoder', 'aligner', 'duration_predictor',
                               'pitch_predictor', 'pitch_embedding', 'decoder', 'proj']
    assert breakdown['embedding'] == 18816
    assert breakdown['encoder'] == 7176960
    assert breakdown['decoder'] == 10813824
    assert breakdown['aligner'] == 1420800
    assert breakdown['duration_predictor'] == breakdown['pitch_predictor'] == 493313
    assert breakdown['pitch_embedding'] == 1536
    assert breakdown['proj'] == 30800
    extended = parameter_breakdown(ModelConfig.full(extended=True))
    assert list(extended)[2] == 'lm'
    assert extended['lm'] == 2017152


def test_presets():
    assert ModelConfig.preset('full') == ModelConfig.full()
    desk = ModelConfig.preset('desk', extended=True)
    assert desk.extended and desk.feature_dim == 192
    assert desk.duration_predictor.in_dim == 192
    with pytest.raises(ConfigError):
        ModelConfig.preset('huge')


@pytest.mark.parametrize('kwargs', [dict(vocab_size=1), dict(pitch_kernel=2),
                                    dict(loss_weights=LossWeights(durs=-1.0)),
                                    dict(aligner_kernel=4)])
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_lm_table_must_fit_lm_dim():
    cfg = replace(ModelConfig.toy(extended=True), lm_dim=16)
    with pytest.raises(ConfigError):
        MixerTTS(cfg)


def test_existing_parameters_are_checked(toy_cfg):
    params = MixerTTS(toy_cfg).params
    del params['proj.bias']
    with pytest.raises(ConfigError):
        MixerTTS(toy_cfg, params=params)
    params = initialize(model_param_specs(toy_cfg), np.random.default_rng(0))
    params['proj.bias'] = params['proj.weight']
    with pytest.raises(DimensionError):
        MixerTTS(toy_cfg, params=params)


def test_forward_train_shapes(toy_cfg, tone_batch):
    model = MixerTTS(toy_cfg)
    out = model.forward_train(tone_batch, rng=np.random.default_rng(0))
    assert out.mel.shape == tone_batch.mels.shape
    assert out.log_durations.shape == out.pitch.shape == tone_batch.symbols.shape
    for durations, n_tokens, n_frames in zip(out.durations, tone_batch.text_lengths,
                                             tone_batch.mel_lengths):
        assert len(durations) == n_tokens
        assert durations.sum() == n_frames
        assert durations.min() >= 1
    assert np.all(out.pitch_target[0, 3:] == 0)
    assert np.all(out.mel.data[0, 18:] == 0)


def test_total_loss(toy_cfg, tone_batch):
    model = MixerTTS(toy_cfg)
    out = model.forward_train(tone_batch, training=False)
    loss, components = model.total_loss(out, tone_batch)
    assert list(components) == ['l_mel', 'l_aligner', 'l_durs', 'l_pitch']
    assert all(value >= 0 for value in components.values())
    expected = (components['l_mel'] + components['l_aligner']
                + 0.1 * components['l_durs'] + 0.1 * components['l_pitch'])
    assert loss.item() == pytest.approx(expected, rel=1e-5)


def test_total_loss_reaches_every_parameter(toy_cfg, tone_batch):
    model = MixerTTS(toy_cfg)
    out = model.forward_train(tone_batch, rng=np.random.default_rng(1))
    backward(model.total_loss(out, tone_batch)[0])
    missing = [name for name, p in model.params.items() if p.grad is None]
    assert missing == []


def test_predictor_losses_stop_at_the_encoder(toy_cfg, tone_batch):
    model = MixerTTS(toy_cfg)
    out = model.forward_train(tone_batch, training=False)
    backward(out.log_durations.sum() + out.pitch.sum())
    assert all(p.grad is None for name, p in model.params.items()
               if name.startswith(('encoder.', 'embedding.')))
    assert all(p.grad is not None for name, p in model.params.items()
               if name.startswith(('duration_predictor.', 'pitch_predictor.')))


def test_more_symbols_than_frames(toy_cfg):
    example = Example('u', SymbolSequence([3, 4, 5, 6, 7]),
                      MelSpectrogram(np.zeros((3, 80))), PitchContour(np.zeros(3)))
    with pytest.raises(AlignmentError):
        MixerTTS(toy_cfg).forward_train(collate([example]), training=False)


def test_inference_output(toy_cfg):
    model = MixerTTS(toy_cfg)
    result = model.forward_infer(tokenize(u'hello', SymbolVocab()))
    assert result.mel.shape == (result.durations.sum(), 80)
    assert result.n_frames >= 1
    assert result.pitch.shape == (5,)


def test_batched_inference_matches_single_inference(deterministic_cfg):
    vocab = SymbolVocab()
    sequences = [tokenize(u'mixer', vocab), tokenize(u'ok', vocab)]
    with default_dtype(np.float64):
        model = MixerTTS(deterministic_cfg, seed=3)
        batched = model.infer_batch(sequences)
        singles = [model.forward_infer(seq) for seq in sequences]
    for single, result in zip(singles, batched):
        np.testing.assert_array_equal(result.durations, single.durations)
        np.testing.assert_allclose(result.mel, single.mel, atol=1e-10)


def test_pace_scales_the_output_length(toy_cfg):
    model = MixerTTS(toy_cfg)
    model.params['duration_predictor.proj.weight'].data[:] = 0.0
    model.params['duration_predictor.proj.bias'].data[:] = np.log1p(3.0)
    seq = tokenize(u'abcd', SymbolVocab())
    assert model.forward_infer(seq).n_frames == 12
    assert model.forward_infer(seq, pace=2.0).n_frames == 24


def test_extended_model_with_a_silent_lm_branch_is_the_basic_model(deterministic_cfg,
                                                                   deterministic_ext_cfg):
    seq = tokenize(u'hello world', SymbolVocab())
    with default_dtype(np.float64):
        basic = MixerTTS(deterministic_cfg, seed=5)
        extended = MixerTTS(deterministic_ext_cfg, seed=6)
        for name, param in basic.params.items():
            extended.params[name] = param
        extended.params['lm.out.weight'].data[:] = 0.0
        extended.params['lm.out.bias'].data[:] = 0.0
        expected = basic.forward_infer(seq)
        result = extended.forward_infer(seq, lm_ids=[2, 3])
    np.testing.assert_array_equal(result.durations, expected.durations)
    np.testing.assert_allclose(result.mel, expected.mel, atol=1e-12)


def test_extended_model_tokenizes_the_text():
    model = MixerTTS(ModelConfig.toy(extended=True))
    result = model.forward_infer(tokenize(u'Hello, world.', SymbolVocab()))
    assert result.n_frames >= 1
    with pytest.raises(InputError):
        model.forward_infer(SymbolSequence([3, 4]))


def test_inference_input_errors(toy_cfg):
    model = MixerTTS(toy_cfg)
    with pytest.raises(InputError):
        model.infer_batch([])
    with pytest.raises(InputError):
        model.forward_infer(SymbolSequence([3, 49]))
    with pytest.raises(InputError):
        model.forward_infer(tokenize(u'a', SymbolVocab()), pace=0.0)


def test_align(toy_cfg, rng):
    model = MixerTTS(toy_cfg)
    path, durations = model.align(SymbolSequence([10, 11, 12]), rng.standard_normal((18, 80)))
    assert len(durations) == 3
    assert sum(durations) == 18
    assert path.is_valid(3)
    with pytest.raises(DimensionError):
        model.align(SymbolSequence([10]), np.zeros((4, 79)))
    with pytest.raises(AlignmentError):
        model.align(SymbolSequence([10, 11, 12]), np.zeros((2, 80)))
