#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
from types import SimpleNamespace

import pytest
import threadpoolctl
import yaml

from mixertts.audio_text import read_mel
from mixertts.cli import BENCH_HEADER, benchmark, main
from mixertts.model import MixerTTS, ModelConfig
from mixertts.util import read_csv

TOY_TRAINING = ['--set', 'model.preset=toy', '--set', 'train.batch_size=3',
                '--set', 'train.accum=1', '--set', 'train.workers=1',
                '--set', 'train.warmup=10']


@pytest.fixture
def checkpoint(tmp_path, capsys):
    """a toy model trained for two steps through the command line"""
    fixture_dir = str(tmp_path / 'tones')
    assert main(['make-fixture', '--out-dir', fixture_dir]) == 0
    manifest = capsys.readouterr().out.strip()
    assert manifest == os.path.join(fixture_dir, 'manifest.txt')
    run_dir = str(tmp_path / 'run')
    assert main(['train', '--manifest', manifest, '--out-dir', run_dir,
                 '--steps', '2'] + TOY_TRAINING) == 0
    out = capsys.readouterr().out
    assert out.startswith('step 2: loss ')
    path = os.path.join(run_dir, 'step_000002.mtck')
    assert path in out
    return path


def test_params(capsys):
    assert main(['params']) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].split() == ['total', '20,449,362']
    assert main(['params', '--set', 'model.extended=true']) == 0
    assert '22,466,514' in capsys.readouterr().out


def test_dump_config(capsys):
    assert main(['--dump-config', '--set', 'train.steps=7']) == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped['train']['steps'] == 7
    assert dumped['model']['feature_dim'] == 384
    assert main(['params', '--seed', '9', '--dump-config']) == 0
    assert yaml.safe_load(capsys.readouterr().out)['train']['seed'] == 9


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(['params', '--set', 'model.channels=3']) == 2
    assert 'error: unknown config key' in capsys.readouterr().err
    assert main(['bench', '--lengths', 'a,b']) == 2


def test_gradcheck_numerics(capsys):
    assert main(['gradcheck', '--module', 'numerics', '--instances', '2']) == 0
    out = capsys.readouterr().out
    assert 'gelu' in out
    assert 'FAILED' not in out


def test_synthesize(checkpoint, tmp_path, capsys):
    out_path = str(tmp_path / 'hi.mel')
    assert main(['synthesize', '--checkpoint', checkpoint, '--text', 'Hi.',
                 '--out', out_path]) == 0
    out = capsys.readouterr().out
    mel = read_mel(out_path)
    assert mel.n_mels == 80
    assert out.startswith('T={0} N=3 '.format(mel.n_frames))


def synthesized_frames(capsys):
    return int(capsys.readouterr().out.split()[0][len('T='):])


def test_synthesize_pace(checkpoint, tmp_path, capsys):
    args = ['--checkpoint', checkpoint, '--text', 'a cab', '--out', str(tmp_path / 'x.mel')]
    assert main(['synthesize'] + args) == 0
    normal = synthesized_frames(capsys)
    assert main(['synthesize', '--pace', '2.0'] + args) == 0
    slow = synthesized_frames(capsys)
    # all-zero predictions fall back to a single frame
    assert abs(slow - 2 * normal) <= 5


def test_synthesize_from_phoneme_ids(checkpoint, tmp_path):
    ids = tmp_path / 'ids.txt'
    ids.write_text(u'20 21 22\n')
    assert main(['synthesize', '--checkpoint', checkpoint, '--phonemes', str(ids),
                 '--out', str(tmp_path / 'x.mel'), '--pace', '2.0']) == 0
    ids.write_text(u'20 99\n')
    assert main(['synthesize', '--checkpoint', checkpoint, '--phonemes', str(ids),
                 '--out', str(tmp_path / 'y.mel')]) == 3
    assert main(['synthesize', '--checkpoint', checkpoint,
                 '--out', str(tmp_path / 'z.mel')]) == 2


def test_align(checkpoint, tmp_path):
    audio = str(tmp_path / 'tones' / 'utt0.wav')
    prefix = str(tmp_path / 'utt0')
    assert main(['align', '--checkpoint', checkpoint, '--audio', audio, '--text', 'hi.',
                 '--out', prefix]) == 0
    with open(prefix + '.durations.txt') as durations_file:
        durations = [int(line) for line in durations_file]
    assert len(durations) == 3
    assert sum(durations) == 18
    with open(prefix + '.matrix.txt') as matrix_file:
        rows = [line.split() for line in matrix_file]
    assert len(rows) == 18
    assert all(row.count('1') == 1 and len(row) == 3 for row in rows)
    assert main(['align', '--checkpoint', checkpoint, '--audio', audio, '--text', 'h',
                 '--out', prefix]) == 0
    with open(prefix + '.durations.txt') as durations_file:
        assert durations_file.read() == '18\n'


def test_training_is_deterministic(tmp_path, capsys):
    fixture_dir = str(tmp_path / 'tones')
    main(['make-fixture', '--out-dir', fixture_dir])
    manifest = capsys.readouterr().out.strip()
    metrics = []
    for run in ('a', 'b'):
        run_dir = str(tmp_path / run)
        assert main(['train', '--manifest', manifest, '--out-dir', run_dir, '--steps', '2',
                     '--seed', '5'] + TOY_TRAINING) == 0
        with open(os.path.join(run_dir, 'metrics.csv'), 'rb') as metrics_file:
            metrics.append(metrics_file.read())
    assert metrics[0] == metrics[1]


def test_missing_manifest(tmp_path, capsys):
    missing = str(tmp_path / 'nope.txt')
    assert main(['train', '--manifest', missing, '--out-dir', str(tmp_path / 'run')]
                + TOY_TRAINING) == 2
    assert missing in capsys.readouterr().err


def test_exit_codes(checkpoint, tmp_path, capsys):
    audio = str(tmp_path / 'tones' / 'utt0.wav')
    out = str(tmp_path / 'x')
    assert main(['synthesize', '--checkpoint', str(tmp_path / 'missing.mtck'),
                 '--text', 'a', '--out', out]) == 2
    broken = tmp_path / 'broken.mtck'
    broken.write_bytes(b'MTCK\x01')
    assert main(['synthesize', '--checkpoint', str(broken), '--text', 'a', '--out', out]) == 3
    # 26 symbols can't be aligned to 18 frames
    assert main(['align', '--checkpoint', checkpoint, '--audio', audio,
                 '--text', 'abcdefghijklmnopqrstuvwxyz', '--out', out]) == 4
    assert 'error:' in capsys.readouterr().err


def test_bench_writes_csv(tmp_path):
    out = str(tmp_path / 'bench.csv')
    assert main(['bench', '--set', 'model.preset=toy', '--lengths', '8,16', '--runs', '1',
                 '--warmup', '0', '--out', out]) == 0
    rows = read_csv(out)
    assert [row['length'] for row in rows] == ['8', '16']
    assert list(rows[0]) == list(BENCH_HEADER)
    assert all(float(row['rtf']) > 0 for row in rows)


class CountingModel(object):
    """stands in for a model; records the BLAS thread count of every call"""

    def __init__(self):
        self.calls = 0
        self.threads = []

    def forward_infer(self, symbols):
        self.calls += 1
        self.threads.extend(info['num_threads'] for info in threadpoolctl.threadpool_info())
        return SimpleNamespace(n_frames=3 * len(symbols))


def test_bench_excludes_warmup_runs():
    model = CountingModel()
    rows = benchmark(model, [4, 8], runs=4, warmup=2)
    assert model.calls == 2 * (2 + 4)
    assert [row.runs for row in rows] == [4, 4]
    assert [row.frames for row in rows] == [12, 24]
    assert all(row.rtf > 0 for row in rows)


def test_bench_limits_blas_threads():
    model = CountingModel()
    benchmark(model, [4], runs=2, warmup=1)
    assert all(n == 1 for n in model.threads)


@pytest.mark.slow
def test_bench_time_grows_about_linearly():
    model = MixerTTS(ModelConfig.full())
    short, long_ = benchmark(model, [128, 256], runs=10, warmup=3)
    assert short.runs == long_.runs == 10
    assert long_.median_seconds <= 2.5 * short.median_seconds
