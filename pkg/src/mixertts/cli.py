#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``cli`` module is the command line interface of mixertts::

    mixertts train --manifest data/manifest.txt --out-dir runs/desk --steps 500
    mixertts synthesize --checkpoint runs/desk/step_000500.mtck --text "hello." --out hello.mel
    mixertts align --checkpoint ... --audio utt0.wav --text "hi." --out utt0
    mixertts gradcheck --module all
    mixertts bench --config desk.yaml --lengths 128,256,512,1024
    mixertts params --config desk.yaml
    mixertts make-fixture --out-dir data/tones

Every command accepts ``--config FILE``, ``--set section.key=value``,
``--seed`` and ``--dump-config``. Errors are reported on stderr; the exit
code is 0 on success, 2 for usage and input errors, 3 for malformed data
files and 4 for numerical failures.
"""

import argparse
import logging
import sys
import time
from collections import namedtuple

import numpy as np
from threadpoolctl import threadpool_limits

from .audio_text import (SymbolVocab, mel_spectrogram, read_phoneme_ids, read_wav, tokenize,
                         write_mel, write_tone_corpus)
from .config import dump_config, load_config
from .debug import SUITES, alignment_oracle, format_report, run_gradcheck
from .errors import GradientError, InputError, MixerTTSError
from .model import MixerTTS, count_parameters, parameter_breakdown
from .training import load_checkpoint, model_from_checkpoint, train
from .util import ensure_dir, format_float, write_csv, write_to_file

logger = logging.getLogger(__name__)

BENCH_HEADER = ('length', 'runs', 'mean_seconds', 'median_seconds', 'frames',
                'audio_seconds', 'rtf')
BenchRow = namedtuple('BenchRow', BENCH_HEADER)


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='FILE', default=argparse.SUPPRESS,
                        help='YAML config file (sections model, train, mel)')
    common.add_argument('--set', metavar='SECTION.KEY=VALUE', action='append',
                        dest='overrides', default=argparse.SUPPRESS,
                        help='override a config value (repeatable)')
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS)
    common.add_argument('--dump-config', action='store_true', default=argparse.SUPPRESS,
                        help='print the effective configuration as YAML and exit')
    common.add_argument('-v', '--verbose', action='store_true', default=argparse.SUPPRESS)
    common.add_argument('-q', '--quiet', action='store_true', default=argparse.SUPPRESS)
    return common


def build_parser():
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog='mixertts', parents=[common],
        description='train and run Mixer-TTS text-to-mel-spectrogram models')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')

    cmd = commands.add_parser('train', parents=[common], help='train a model')
    cmd.add_argument('--manifest', required=True)
    cmd.add_argument('--out-dir', required=True)
    cmd.add_argument('--steps', type=int)
    cmd.add_argument('--resume', metavar='CHECKPOINT')
    cmd.add_argument('--valid-manifest')
    cmd.set_defaults(func=cmd_train)

    cmd = commands.add_parser('synthesize', parents=[common],
                              help='write the mel-spectrogram of a text')
    cmd.add_argument('--checkpoint', required=True)
    cmd.add_argument('--text')
    cmd.add_argument('--phonemes', metavar='ID_FILE', help='pre-tokenized symbol ids')
    cmd.add_argument('--out', required=True, help='MELF output file')
    cmd.add_argument('--pace', type=float, default=1.0)
    cmd.set_defaults(func=cmd_synthesize)

    cmd = commands.add_parser('align', parents=[common],
                              help='align a text to a recording')
    cmd.add_argument('--checkpoint', required=True)
    cmd.add_argument('--audio', required=True)
    cmd.add_argument('--text')
    cmd.add_argument('--phonemes', metavar='ID_FILE')
    cmd.add_argument('--out', required=True,
                     help='output prefix (.durations.txt and .matrix.txt)')
    cmd.set_defaults(func=cmd_align)

    cmd = commands.add_parser('gradcheck', parents=[common],
                              help='finite-difference gradient checks')
    cmd.add_argument('--module', choices=('all',) + SUITES, default='all')
    cmd.add_argument('--instances', type=int, default=20)
    cmd.set_defaults(func=cmd_gradcheck)

    cmd = commands.add_parser('bench', parents=[common], help='inference speed benchmark')
    cmd.add_argument('--checkpoint')
    cmd.add_argument('--lengths', default='128,256,512,1024')
    cmd.add_argument('--runs', type=int, default=10)
    cmd.add_argument('--warmup', type=int, default=3)
    cmd.add_argument('--threads', type=int, default=1,
                     help='BLAS/OpenMP threads while timing')
    cmd.add_argument('--out', help='CSV output file (default: stdout)')
    cmd.set_defaults(func=cmd_bench)

    cmd = commands.add_parser('params', parents=[common], help='count model parameters')
    cmd.set_defaults(func=cmd_params)

    cmd = commands.add_parser('make-fixture', parents=[common],
                              help='write a tiny synthetic tone corpus')
    cmd.add_argument('--out-dir', required=True)
    cmd.set_defaults(func=cmd_make_fixture)
    return parser


def _config(args):
    config = load_config(getattr(args, 'config', None), getattr(args, 'overrides', None) or ())
    seed = getattr(args, 'seed', None)
    if seed is not None:
        config.train.seed = seed
    return config


def _symbols(args, vocab, vocab_size):
    if args.phonemes:
        symbols = read_phoneme_ids(args.phonemes, vocab_size)
        symbols.text = args.text
        return symbols
    if not args.text:
        raise InputError("give a --text or a --phonemes file")
    return tokenize(args.text, vocab)


def cmd_train(args, config):
    if args.steps is not None:
        config.train.steps = args.steps
        config.train.epochs = None
    result = train(config.model, config.train, args.manifest, args.out_dir, config.mel,
                   resume=args.resume, valid_manifest=args.valid_manifest)
    last = result.records[-1] if result.records else None
    if last is not None:
        print("step {0}: loss {1:.5f}".format(last.step, last.loss))
    for path in result.checkpoints:
        print(path)
    return 0


def cmd_synthesize(args, config):
    checkpoint = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(checkpoint)
    symbols = _symbols(args, SymbolVocab(), model.cfg.vocab_size)
    started = time.perf_counter()
    out = model.forward_infer(symbols, pace=args.pace)
    elapsed = time.perf_counter() - started
    write_mel(args.out, out.mel)
    print("T={0} N={1} seconds={2:.3f}".format(out.n_frames, len(symbols), elapsed))
    return 0


def cmd_align(args, config):
    checkpoint = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(checkpoint)
    mel_cfg = checkpoint.mel_config()
    symbols = _symbols(args, SymbolVocab(), model.cfg.vocab_size)
    mel = mel_spectrogram(read_wav(args.audio, mel_cfg.sample_rate), mel_cfg)
    path, durations = model.align(symbols, mel.frames)
    write_to_file(u''.join(u'{0}\n'.format(d) for d in durations), args.out + '.durations.txt')
    matrix = path.as_matrix(len(symbols))
    write_to_file(u''.join(u' '.join(str(v) for v in row) + u'\n' for row in matrix),
                  args.out + '.matrix.txt')
    print("T={0} N={1}".format(mel.n_frames, len(symbols)))
    return 0


def cmd_gradcheck(args, config):
    suites = SUITES if args.module == 'all' else (args.module,)
    seed = getattr(args, 'seed', 0)
    results = run_gradcheck(suites, n_instances=args.instances, seed=seed)
    print(format_report(results))
    failed = [res.name for res in results if not res.passed]
    if 'aligner' in suites:
        oracle = alignment_oracle(seed=seed)
        print("alignment oracle: {0} lattices, max abs error {1:.3e}, {2} Viterbi "
              "mismatches".format(*oracle))
        if oracle.max_abs_error > 1e-9 or oracle.viterbi_mismatches:
            failed.append('alignment oracle')
    if failed:
        raise GradientError("gradient check failed for: {0}".format(', '.join(failed)))
    return 0


def benchmark(model, lengths, runs=10, warmup=3, seed=0, mel_cfg=None, threads=1):
    """
    times single-utterance inference on random symbol sequences of each
    length. Warmup runs are excluded from the statistics. The BLAS/OpenMP
    pools are limited to ``threads`` threads while timing.

    :rtype: ``list`` of ``BenchRow``
    """
    if runs < 1 or warmup < 0:
        raise InputError("need at least one timed run and a non-negative warmup")
    mel_cfg = mel_cfg or load_config().mel
    vocab = SymbolVocab()
    letters = [sym for sym in vocab.symbols if sym.isalpha()]
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        text = u''.join(rng.choice(letters, size=length))
        symbols = tokenize(text, vocab)
        timings, frames = [], 0
        with threadpool_limits(limits=threads):
            for run in range(warmup + runs):
                started = time.perf_counter()
                out = model.forward_infer(symbols)
                elapsed = time.perf_counter() - started
                if run >= warmup:
                    timings.append(elapsed)
                    frames = out.n_frames
        mean = float(np.mean(timings))
        audio_seconds = mel_cfg.frames_to_seconds(frames)
        rows.append(BenchRow(length, len(timings), mean, float(np.median(timings)), frames,
                             audio_seconds, audio_seconds / mean))
        logger.info("length %d: %.4f s per run, RTF %.1f", length, mean, audio_seconds / mean)
    return rows


def cmd_bench(args, config):
    try:
        lengths = [int(v) for v in args.lengths.split(',') if v.strip()]
    except ValueError:
        raise InputError("--lengths takes comma separated integers, got '{0}'".format(
            args.lengths))
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        model, mel_cfg = model_from_checkpoint(checkpoint), checkpoint.mel_config()
    else:
        model = MixerTTS(config.model, seed=config.train.seed)
        mel_cfg = config.mel
    rows = benchmark(model, lengths, args.runs, args.warmup, config.train.seed, mel_cfg,
                     args.threads)
    formatted = [[row.length, row.runs, format_float(row.mean_seconds),
                  format_float(row.median_seconds), row.frames,
                  format_float(row.audio_seconds), format_float(row.rtf)] for row in rows]
    if args.out:
        write_csv(args.out, BENCH_HEADER, formatted)
    else:
        print(','.join(BENCH_HEADER))
        for row in formatted:
            print(','.join(str(v) for v in row))
    return 0


def cmd_params(args, config):
    for name, count in parameter_breakdown(config.model).items():
        print("{0:<20} {1:>12,}".format(name, count))
    print("{0:<20} {1:>12,}".format('total', count_parameters(config.model)))
    return 0


def cmd_make_fixture(args, config):
    ensure_dir(args.out_dir)
    print(write_tone_corpus(args.out_dir, config.mel, seed=config.train.seed))
    return 0


def _setup_logging(args):
    level = logging.INFO
    if getattr(args, 'verbose', False):
        level = logging.DEBUG
    elif getattr(args, 'quiet', False):
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')


def main(argv=None):
    """
    runs a mixertts command and returns its exit code.

    :type argv: ``list`` of ``str`` or None (defaults to ``sys.argv[1:]``)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        config = _config(args)
        if getattr(args, 'dump_config', False):
            sys.stdout.write(dump_config(config))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        return args.func(args, config)
    except MixerTTSError as err:
        sys.stderr.write("error: {0}\n".format(err))
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
