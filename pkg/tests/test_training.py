#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import struct
from collections import OrderedDict
from dataclasses import asdict

import numpy as np
import pytest

from mixertts.audio_text import Dataset, MelConfig, SymbolVocab, load_manifest
from mixertts.errors import CheckpointError, ConfigError, InputError
from mixertts.model import MixerTTS, ModelConfig
from mixertts.numerics import Tensor, default_dtype
from mixertts.training import (METRICS_HEADER, OptimState, TrainConfig, Trainer,
                               clip_gradients, lamb_step, load_checkpoint,
                               model_from_checkpoint, noam_lr, save_checkpoint,
                               total_steps, train)
from mixertts.util import read_csv


def scalar_param(value):
    return OrderedDict([('w', Tensor(np.array([value]), requires_grad=True,
                                     dtype=np.float64))])


def test_noam_schedule():
    assert noam_lr(1, 0.1, 1000) == pytest.approx(1e-4)
    assert noam_lr(1000, 0.1, 1000) == 0.1
    assert noam_lr(4000, 0.1, 1000) == pytest.approx(0.05)
    assert noam_lr(500, 0.1, 1000) < noam_lr(1000, 0.1, 1000) > noam_lr(1500, 0.1, 1000)
    with pytest.raises(InputError):
        noam_lr(0)


def test_lamb_first_step_moves_by_the_learning_rate():
    params = scalar_param(1.0)
    state = OptimState.create(params, weight_decay=0.0)
    lamb_step(params, {'w': np.array([0.3])}, state, lr=0.01)
    assert params['w'].data[0] == pytest.approx(0.99)
    assert state.step == 1


def test_without_trust_ratio_lamb_is_adam():
    params = scalar_param(5.0)
    state = OptimState.create(params, weight_decay=0.0, trust_ratio=False)
    lamb_step(params, {'w': np.array([-2.0])}, state, lr=0.1)
    # the first bias-corrected Adam update is sign(g)
    assert params['w'].data[0] == pytest.approx(5.1)


def vector_params(**arrays):
    return OrderedDict((name, Tensor(np.array(values, dtype=np.float64), requires_grad=True,
                                     dtype=np.float64))
                       for name, values in arrays.items())


def adam_reference(w, grads, lr, beta1=0.9, beta2=0.98, eps=1e-8):
    m, v = np.zeros_like(w), np.zeros_like(w)
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        w = w - lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    return w


def test_lamb_step_matches_a_hand_computed_update():
    params = vector_params(w=[3.0, 4.0])
    state = OptimState.create(params, weight_decay=0.0)
    lamb_step(params, {'w': np.array([0.5, -0.5])}, state, lr=0.01)
    # Adam direction (1, -1), rescaled to the weight norm 5
    step = 0.01 * 5.0 / np.sqrt(2.0)
    np.testing.assert_allclose(params['w'].data, [3.0 - step, 4.0 + step], rtol=0, atol=1e-10)


def test_trust_ratio_scales_the_update_with_the_weights(rng):
    w, g = rng.standard_normal(6), rng.standard_normal(6)
    params = vector_params(small=w, large=10.0 * w)
    state = OptimState.create(params, weight_decay=0.0)
    lamb_step(params, {'small': g, 'large': g}, state, lr=0.01)
    np.testing.assert_allclose(params['large'].data - 10.0 * w,
                               10.0 * (params['small'].data - w), rtol=1e-9)

    params = vector_params(small=w, large=10.0 * w)
    state = OptimState.create(params, weight_decay=0.0, trust_ratio=False)
    lamb_step(params, {'small': g, 'large': g}, state, lr=0.01)
    np.testing.assert_allclose(params['large'].data - 10.0 * w, params['small'].data - w,
                               rtol=1e-9)


def test_without_trust_ratio_lamb_follows_adam(rng):
    w = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(6)]
    params = vector_params(w=w)
    state = OptimState.create(params, weight_decay=0.0, trust_ratio=False)
    for g in grads:
        lamb_step(params, {'w': g}, state, lr=0.05)
    np.testing.assert_allclose(params['w'].data, adam_reference(w, grads, 0.05),
                               rtol=0, atol=1e-7)


def test_missing_gradients_count_as_zero():
    params = scalar_param(2.0)
    state = OptimState.create(params, weight_decay=0.0)
    lamb_step(params, {'w': None}, state, lr=0.1)
    lamb_step(params, {}, state, lr=0.1)
    assert params['w'].data[0] == 2.0


def test_weight_decay_shrinks_weights():
    params = scalar_param(2.0)
    state = OptimState.create(params, weight_decay=0.1, trust_ratio=False)
    lamb_step(params, {}, state, lr=0.1)
    assert params['w'].data[0] == pytest.approx(2.0 - 0.1 * 0.1 * 2.0)


def test_clip_gradients():
    params = OrderedDict([('a', Tensor(np.zeros(2), dtype=np.float64)),
                          ('b', Tensor(np.zeros(1), dtype=np.float64))])
    params['a'].grad = np.array([3.0, 0.0])
    params['b'].grad = np.array([4.0])
    assert clip_gradients(params, 10.0) == 1.0
    assert clip_gradients(params, 1.0) == pytest.approx(0.2)
    np.testing.assert_allclose(params['a'].grad, [0.6, 0.0])
    np.testing.assert_allclose(params['b'].grad, [0.8])


@pytest.mark.parametrize('kwargs', [dict(batch_size=0), dict(accum=0), dict(warmup=0),
                                    dict(base_lr=0.0), dict(beta1=1.0),
                                    dict(max_grad_norm=0.0), dict(steps=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_total_steps():
    assert total_steps(TrainConfig(steps=7), 100) == 7
    assert total_steps(TrainConfig(epochs=3, batch_size=2, accum=2), 5) == 5


def test_checkpoint_round_trip(tmp_path, rng):
    params = OrderedDict([('a.weight', Tensor(rng.standard_normal((2, 3)))),
                          ('a.bias', Tensor(rng.standard_normal(3)))])
    state = OptimState.create(params)
    state.step = 7
    state.exp_avg['a.bias'][:] = 0.5
    path = str(tmp_path / 'x.mtck')
    save_checkpoint(path, params, 42, {'note': u'hi'}, state)
    checkpoint = load_checkpoint(path)
    assert checkpoint.step == 42
    assert checkpoint.meta['note'] == u'hi'
    assert checkpoint.meta['optimizer']['step'] == 7
    assert list(checkpoint.params) == ['a.weight', 'a.bias']
    np.testing.assert_array_equal(checkpoint.params['a.weight'], params['a.weight'].data)
    assert sorted(checkpoint.moments) == ['opt/m/a.bias', 'opt/m/a.weight',
                                          'opt/v/a.bias', 'opt/v/a.weight']
    np.testing.assert_array_equal(checkpoint.moments['opt/m/a.bias'], 0.5)


def test_corrupt_checkpoints(tmp_path):
    path = str(tmp_path / 'x.mtck')
    save_checkpoint(path, {'w': np.ones(4, dtype=np.float32)}, 1)
    with open(path, 'rb') as ckpt_file:
        blob = ckpt_file.read()
    variants = [b'XTCK' + blob[4:], blob[:4] + struct.pack('<I', 9) + blob[8:],
                blob[:-3], blob + b'\x00']
    for i, variant in enumerate(variants):
        bad = str(tmp_path / 'bad{0}.mtck'.format(i))
        with open(bad, 'wb') as ckpt_file:
            ckpt_file.write(variant)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
    with pytest.raises(InputError):
        load_checkpoint(str(tmp_path / 'missing.mtck'))


def test_model_from_checkpoint(tmp_path, toy_cfg):
    model = MixerTTS(toy_cfg, seed=4)
    path = str(tmp_path / 'm.mtck')
    save_checkpoint(path, model.params, 3, {'model': asdict(toy_cfg)})
    restored = model_from_checkpoint(load_checkpoint(path))
    assert restored.cfg == toy_cfg
    for name, param in model.params.items():
        np.testing.assert_array_equal(restored.params[name].data, param.data)


def test_gradient_accumulation_matches_the_full_batch(tone_manifest_4, mel_cfg,
                                                       deterministic_cfg):
    dataset = Dataset.from_utterances(load_manifest(tone_manifest_4), SymbolVocab(), mel_cfg)
    results = []
    with default_dtype(np.float64):
        for batch_size, accum in ((4, 1), (2, 2)):
            cfg = TrainConfig(batch_size=batch_size, accum=accum, max_grad_norm=1e12)
            trainer = Trainer(MixerTTS(deterministic_cfg, seed=2), dataset, cfg)
            record = trainer.train_step()
            grads = OrderedDict((name, p.grad.copy())
                                for name, p in trainer.model.params.items())
            results.append((record, grads))
    (full, full_grads), (accumulated, accumulated_grads) = results
    assert accumulated.loss == pytest.approx(full.loss, rel=1e-9)
    for key in full.components:
        assert accumulated.components[key] == pytest.approx(full.components[key], rel=1e-9)
    for name, grad in full_grads.items():
        np.testing.assert_allclose(accumulated_grads[name], grad, rtol=1e-7, atol=1e-12)
    assert full.durations == accumulated.durations


def test_training_writes_metrics_and_checkpoints(tmp_path, tone_manifest, toy_cfg):
    cfg = TrainConfig(batch_size=2, accum=1, steps=3, warmup=10, checkpoint_every=2,
                      workers=1)
    out_dir = str(tmp_path / 'run')
    result = train(toy_cfg, cfg, tone_manifest, out_dir, progress=False)
    assert [r.step for r in result.records] == [1, 2, 3]
    assert [os.path.basename(p) for p in result.checkpoints] == ['step_000002.mtck',
                                                                 'step_000003.mtck']
    rows = read_csv(os.path.join(out_dir, 'metrics.csv'))
    assert [row['step'] for row in rows] == ['1', '2', '3']
    assert list(rows[0]) == list(METRICS_HEADER)
    assert float(rows[-1]['loss']) == result.records[-1].loss
    checkpoint = load_checkpoint(result.checkpoints[-1])
    assert checkpoint.step == 3
    assert checkpoint.train_config() == cfg
    assert checkpoint.model_config() == toy_cfg


def test_resumed_training_is_bit_exact(tmp_path, tone_manifest_4, toy_cfg):
    cfg = TrainConfig(batch_size=2, accum=1, steps=4, warmup=10, checkpoint_every=2,
                      workers=1, seed=11)
    full = train(toy_cfg, cfg, tone_manifest_4, str(tmp_path / 'full'), progress=False)
    resumed = train(toy_cfg, cfg, tone_manifest_4, str(tmp_path / 'resumed'),
                    resume=full.checkpoints[0], progress=False)
    assert [r.step for r in resumed.records] == [3, 4]
    assert [r.loss for r in resumed.records] == [r.loss for r in full.records[2:]]
    for name, param in full.trainer.model.params.items():
        np.testing.assert_array_equal(resumed.trainer.model.params[name].data, param.data)
    for name, moment in full.trainer.state.exp_avg_sq.items():
        np.testing.assert_array_equal(resumed.trainer.state.exp_avg_sq[name], moment)


def test_restore_rejects_other_models(tmp_path, tone_manifest, mel_cfg, toy_cfg):
    cfg = TrainConfig(batch_size=3, accum=1, steps=1, workers=1)
    result = train(toy_cfg, cfg, tone_manifest, str(tmp_path / 'a'), progress=False)
    dataset = Dataset.from_utterances(load_manifest(tone_manifest), SymbolVocab(), mel_cfg)
    other = Trainer(MixerTTS(ModelConfig.toy(extended=True)),
                    dataset, cfg)
    with pytest.raises(CheckpointError):
        other.restore(load_checkpoint(result.checkpoints[0]))


def test_mel_bins_must_match(tmp_path, tone_manifest, toy_cfg):
    with pytest.raises(ConfigError):
        train(toy_cfg, TrainConfig(), tone_manifest, str(tmp_path / 'x'),
              mel_cfg=MelConfig(n_mels=40))


@pytest.mark.slow
def test_overfits_the_tone_corpus(tmp_path, tone_manifest, deterministic_cfg):
    cfg = TrainConfig(batch_size=3, accum=1, steps=500, base_lr=0.02, warmup=50,
                      checkpoint_every=0, workers=1)
    result = train(deterministic_cfg, cfg, tone_manifest, str(tmp_path / 'fit'),
                   progress=False)
    records = result.records
    assert [r.step for r in records[9::100]] == [10, 110, 210, 310, 410]
    l_mel = [r.components['l_mel'] for r in records]
    assert l_mel[-1] <= 0.1 * l_mel[9]

    last = records[-50:]
    final = last[-1].durations
    assert sorted(final) == ['utt0', 'utt1', 'utt2']
    n_tokens = sum(len(durations) for durations in final.values())
    stable = sum(all(r.durations[uid][j] == final[uid][j] for r in last)
                 for uid in final for j in range(len(final[uid])))
    assert stable >= 0.95 * n_tokens
