#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``audio_text`` module is the data frontend of mixertts. It turns text
into symbol ids, audio into log-mel-spectrograms and pitch contours, and a
manifest file into batches the model can be trained on.

A manifest has one utterance per line::

    id|audio_path|transcript[|pitch_path][|phoneme_path]

Relative paths are resolved against the manifest's directory. Audio must be
16-bit mono PCM WAV at the configured sample rate; there is no resampling.
"""

import io
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import librosa
import numpy as np
from scipy.io import wavfile

from .adaptors import PitchContour, pitch_statistics
from .errors import ConfigError, DataFormatError, InputError
from .lm_cond import lm_tokenize

logger = logging.getLogger(__name__)

PAD_SYMBOL = '_'
PUNCTUATION = '!\'(),-.:;?"'
DEFAULT_SYMBOLS = ([PAD_SYMBOL, ' '] + list(PUNCTUATION)
                   + list('0123456789') + list('abcdefghijklmnopqrstuvwxyz'))

MELF_MAGIC = b'MELF'
MELF_HEADER = struct.Struct('<4sIII')

F0_MIN = 65.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-4
F0_METHODS = ('autocorr', 'pyin')


class SymbolVocab(object):
    """
    maps text symbols to contiguous integer ids. The padding symbol always
    gets id 0.
    """
    def __init__(self, symbols=None):
        symbols = list(DEFAULT_SYMBOLS if symbols is None else symbols)
        if not symbols or symbols[0] != PAD_SYMBOL:
            raise ConfigError("the first symbol of a vocabulary must be the pad "
                              "symbol '{0}'".format(PAD_SYMBOL))
        if len(set(symbols)) != len(symbols):
            raise ConfigError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.symbol2id = {sym: i for i, sym in enumerate(symbols)}

    @property
    def pad_id(self):
        return 0

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self.symbol2id


@dataclass
class SymbolSequence:
    """tokenized text, the encoder input"""
    ids: np.ndarray
    text: str = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.ids)


@dataclass
class MelConfig:
    """
    STFT and mel filterbank settings. The defaults are a 50 ms Hann window
    and a 275 sample (about 12.5 ms) hop at 22050 Hz.
    """
    sample_rate: int = 22050
    win_length: int = 1102
    hop_length: int = 275
    n_fft: int = 2048
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop_length <= 0 or self.hop_length >= self.win_length:
            raise ConfigError("hop_length must be positive and smaller than "
                              "win_length ({0} vs {1})".format(self.hop_length, self.win_length))
        if self.n_fft < self.win_length:
            raise ConfigError("n_fft ({0}) must be >= win_length ({1})".format(
                self.n_fft, self.win_length))
        if self.n_mels <= 0 or self.log_floor <= 0:
            raise ConfigError("n_mels and log_floor must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2.0:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")

    def n_frames(self, n_samples):
        """number of mel frames of ``n_samples`` samples: ``ceil(n / hop)``, at least 1"""
        return max(1, int(math.ceil(n_samples / float(self.hop_length))))

    def frames_to_seconds(self, n_frames):
        return n_frames * self.hop_length / float(self.sample_rate)


@dataclass
class MelSpectrogram:
    """log-magnitude mel frames, shape [T, n_mels]"""
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise DataFormatError("a mel-spectrogram is a [T, M] matrix, got shape {0}".format(
                self.frames.shape))

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_mels(self):
        return self.frames.shape[1]


@dataclass
class Utterance:
    id: str
    transcript: str
    audio_path: str = None
    samples: np.ndarray = None
    pitch_path: str = None
    phoneme_path: str = None

    def __post_init__(self):
        if not self.transcript or not self.transcript.strip():
            raise InputError("utterance '{0}' has an empty transcript".format(self.id))
        if self.audio_path is None and self.samples is None:
            raise InputError("utterance '{0}' has neither audio samples nor an audio "
                             "path".format(self.id))


# text

def tokenize(text, vocab):
    """
    lowercases ``text`` and maps every character to its id. Punctuation is
    kept, runs of spaces are not collapsed, unknown characters are dropped
    (their number is logged).

    :rtype: ``SymbolSequence``
    """
    if not text:
        raise InputError("can't tokenize empty text")
    ids = []
    dropped = 0
    for char in text.lower():
        if char in vocab and char != PAD_SYMBOL:
            ids.append(vocab.symbol2id[char])
        else:
            dropped += 1
    if dropped:
        logger.warning("dropped %d symbol(s) not in the vocabulary from %r", dropped, text)
    if not ids:
        raise InputError("no known symbols left in {0!r}".format(text))
    return SymbolSequence(ids, text)


def detokenize(sequence, vocab):
    return u''.join(vocab.symbols[i] for i in sequence.ids)


def read_phoneme_ids(path, vocab_size=None):
    """reads a pre-tokenized id file (whitespace separated integers)"""
    try:
        with io.open(path, encoding='utf-8') as id_file:
            tokens = id_file.read().split()
    except IOError as err:
        raise InputError("can't read phoneme id file {0}: {1}".format(path, err))
    try:
        ids = [int(token) for token in tokens]
    except ValueError:
        raise DataFormatError("{0}: phoneme id files contain integers only".format(path))
    if not ids:
        raise InputError("{0}: empty phoneme id file".format(path))
    if min(ids) < 1 or (vocab_size is not None and max(ids) >= vocab_size):
        raise DataFormatError("{0}: ids must be in [1, {1})".format(path, vocab_size))
    return SymbolSequence(ids)


# audio

def read_wav(path, sample_rate):
    """reads a 16-bit mono PCM WAV file as float samples in [-1, 1)"""
    try:
        rate, data = wavfile.read(path)
    except (IOError, OSError) as err:
        raise InputError("can't read audio file {0}: {1}".format(path, err))
    except ValueError as err:
        raise DataFormatError("{0}: not a readable WAV file ({1})".format(path, err))
    if rate != sample_rate:
        raise InputError("{0} has a sample rate of {1} Hz, expected {2} Hz (no "
                         "resampling is done)".format(path, rate, sample_rate))
    if data.dtype != np.int16 or data.ndim != 1:
        raise DataFormatError("{0}: expected 16-bit mono PCM".format(path))
    return data.astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate):
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    wavfile.write(path, sample_rate, np.round(samples * 32768.0).astype(np.int16))


def _centered_frames(samples, cfg, frame_length):
    """
    cuts the (center-padded) signal into the F0 analysis windows:
    ``cfg.n_frames(len(samples))`` frames of ``frame_length`` samples, frame
    ``t`` centered on sample ``t * hop`` like the mel frames.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise InputError("can't extract features from empty audio")
    pad = cfg.n_fft // 2
    mode = 'reflect' if samples.size >= 2 else 'constant'
    padded = np.pad(samples, (pad, pad), mode=mode)
    n_frames = cfg.n_frames(samples.size)
    offset = (cfg.n_fft - frame_length) // 2
    view = np.lib.stride_tricks.sliding_window_view(padded[offset:], frame_length)
    return view[::cfg.hop_length][:n_frames]


def mel_filterbank(cfg):
    """[n_mels, n_fft // 2 + 1] mel filter matrix (librosa, slaney norm)"""
    return librosa.filters.mel(sr=cfg.sample_rate, n_fft=cfg.n_fft, n_mels=cfg.n_mels,
                               fmin=cfg.fmin, fmax=cfg.fmax)


def mel_spectrogram(samples, cfg, sample_rate=None):
    """
    computes a log-mel-spectrogram.

    Parameters
    ----------
    samples : numpy.ndarray
        mono audio samples
    cfg : MelConfig
    sample_rate : int or None
        rate of ``samples``; must equal ``cfg.sample_rate`` if given

    Returns
    -------
    MelSpectrogram
        ``ceil(len(samples) / hop)`` frames of ``log(max(mel, floor))``
    """
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise InputError("audio at {0} Hz, the mel config expects {1} Hz".format(
            sample_rate, cfg.sample_rate))
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise InputError("can't extract features from empty audio")
    spectrum = librosa.stft(samples, n_fft=cfg.n_fft, hop_length=cfg.hop_length,
                            win_length=cfg.win_length, window='hann', center=True,
                            pad_mode='reflect' if samples.size >= 2 else 'constant')
    magnitudes = np.abs(spectrum[:, :cfg.n_frames(samples.size)]).T
    mel = np.matmul(magnitudes, mel_filterbank(cfg).T)
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)))


def _frame_f0(frame, sample_rate, min_lag, max_lag):
    frame = frame - frame.mean()
    n = frame.size
    energy = np.dot(frame, frame)
    if math.sqrt(energy / n) < SILENCE_RMS:
        return 0.0
    spectrum = np.fft.rfft(frame, n=2 * n)
    acf = np.fft.irfft(spectrum * np.conj(spectrum))[:n]
    # energy of the overlapping head and tail of the frame for every lag
    cum = np.concatenate(([0.0], np.cumsum(frame * frame)))
    lags = np.arange(n)
    head = cum[n - lags]
    tail = cum[n] - cum[lags]
    nccf = acf / np.sqrt(np.maximum(head * tail, 1e-12))

    lo, hi = max(min_lag, 2), min(max_lag, n - 2)
    if hi <= lo:
        return 0.0
    region = nccf[lo - 1:hi + 2]
    inner = region[1:-1]
    peaks = np.where((inner >= region[:-2]) & (inner > region[2:]))[0]
    if peaks.size == 0:
        return 0.0
    best = inner[peaks].max()
    if best < VOICING_THRESHOLD:
        return 0.0
    peak = peaks[np.argmax(inner[peaks] >= 0.9 * best)]
    lag = lo + peak
    left, mid, right = nccf[lag - 1], nccf[lag], nccf[lag + 1]
    denom = left - 2.0 * mid + right
    shift = 0.5 * (left - right) / denom if denom < 0 else 0.0
    return sample_rate / (lag + shift)


def estimate_f0(samples, cfg, method='autocorr', fmin=F0_MIN, fmax=F0_MAX):
    """
    estimates one F0 value (Hz, 0 when unvoiced) per mel frame.

    ``autocorr`` picks, for every window, the shortest lag within
    ``[fmin, fmax]`` whose normalized autocorrelation comes within 90% of the
    best peak, refined by parabolic interpolation. Windows whose best peak
    stays below the voicing threshold, and silent windows, are unvoiced.
    ``pyin`` delegates to ``librosa.pyin``.

    :rtype: ``PitchContour`` with exactly ``cfg.n_frames(len(samples))`` frames
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    n_frames = cfg.n_frames(samples.size)
    if method == 'autocorr':
        min_lag = int(math.floor(cfg.sample_rate / fmax))
        max_lag = int(math.ceil(cfg.sample_rate / fmin))
        frames = _centered_frames(samples, cfg, cfg.win_length)
        f0 = np.array([_frame_f0(frame, cfg.sample_rate, min_lag, max_lag)
                       for frame in frames])
    elif method == 'pyin':
        f0, _, _ = librosa.pyin(samples, fmin=fmin, fmax=fmax, sr=cfg.sample_rate,
                                frame_length=cfg.n_fft, hop_length=cfg.hop_length,
                                center=True)
        f0 = np.nan_to_num(f0[:n_frames], nan=0.0)
        f0 = np.concatenate((f0, np.zeros(n_frames - f0.size)))
    else:
        raise ConfigError("unknown F0 method '{0}', use one of {1}".format(method, F0_METHODS))
    return PitchContour(f0)


# files

def load_manifest(path):
    """
    parses a manifest file into ``Utterance``s. Blank lines and lines
    starting with ``#`` are skipped.
    """
    if not os.path.isfile(path):
        raise InputError("manifest not found: {0}".format(path))
    base = os.path.dirname(os.path.abspath(path))

    def resolve(fname):
        if not fname:
            return None
        return fname if os.path.isabs(fname) else os.path.join(base, fname)

    utterances = []
    with io.open(path, encoding='utf-8') as manifest:
        for lineno, line in enumerate(manifest, 1):
            line = line.rstrip('\n')
            if not line.strip() or line.startswith('#'):
                continue
            fields = line.split('|')
            if not 3 <= len(fields) <= 5:
                raise DataFormatError("{0}, line {1}: expected 3 to 5 '|'-separated "
                                      "fields, got {2}".format(path, lineno, len(fields)))
            fields += [''] * (5 - len(fields))
            utt_id, audio, transcript, pitch, phonemes = fields
            if not utt_id or not audio or not transcript.strip():
                raise DataFormatError("{0}, line {1}: id, audio path and transcript are "
                                      "required".format(path, lineno))
            utterances.append(Utterance(utt_id, transcript, audio_path=resolve(audio),
                                        pitch_path=resolve(pitch),
                                        phoneme_path=resolve(phonemes)))
    return utterances


def write_mel(path, mel):
    """writes a ``MELF`` file: 16 byte header, then T*M little-endian f32"""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    n_frames, n_mels = frames.shape
    with open(path, 'wb') as mel_file:
        mel_file.write(MELF_HEADER.pack(MELF_MAGIC, n_frames, n_mels, 0))
        mel_file.write(np.ascontiguousarray(frames, dtype='<f4').tobytes())


def read_mel(path):
    try:
        with open(path, 'rb') as mel_file:
            blob = mel_file.read()
    except IOError as err:
        raise InputError("can't read mel file {0}: {1}".format(path, err))
    if len(blob) < MELF_HEADER.size:
        raise DataFormatError("{0}: truncated mel file".format(path))
    magic, n_frames, n_mels, _ = MELF_HEADER.unpack_from(blob)
    if magic != MELF_MAGIC:
        raise DataFormatError("{0}: bad mel file magic {1!r}".format(path, magic))
    payload = blob[MELF_HEADER.size:]
    if len(payload) != 4 * n_frames * n_mels:
        raise DataFormatError("{0}: header announces {1}x{2} values, payload has {3} "
                              "bytes".format(path, n_frames, n_mels, len(payload)))
    return MelSpectrogram(np.frombuffer(payload, dtype='<f4').reshape(n_frames, n_mels))


def read_pitch_file(path):
    """one F0 value in Hz per line"""
    try:
        values = np.loadtxt(path, dtype=np.float64, ndmin=1)
    except ValueError as err:
        raise DataFormatError("{0}: malformed pitch file ({1})".format(path, err))
    return PitchContour(values)


def write_pitch_file(path, contour):
    np.savetxt(path, contour.frame_f0, fmt='%.4f')


# dataset

@dataclass
class Example:
    """the extracted features of one utterance"""
    id: str
    symbols: SymbolSequence
    mel: MelSpectrogram
    pitch: PitchContour
    lm_ids: list = None


@dataclass
class Batch:
    """
    a zero-padded batch. ``pitch`` holds per-frame contours in Hz;
    ``pitch_mean``/``pitch_std`` are the dataset statistics.
    """
    ids: list
    symbols: np.ndarray
    text_lengths: list
    mels: np.ndarray
    mel_lengths: list
    pitch: list
    pitch_mean: float = 0.0
    pitch_std: float = 1.0
    lm_ids: np.ndarray = None
    lm_lengths: list = None

    def __len__(self):
        return len(self.ids)


def extract_features(utterance, vocab, mel_cfg, f0_method='autocorr', lm_table=None,
                     vocab_size=None):
    """turns an ``Utterance`` into an ``Example``"""
    if utterance.phoneme_path:
        symbols = read_phoneme_ids(utterance.phoneme_path, vocab_size or len(vocab))
    else:
        symbols = tokenize(utterance.transcript, vocab)
    if utterance.samples is not None:
        samples = np.asarray(utterance.samples, dtype=np.float64)
    else:
        samples = read_wav(utterance.audio_path, mel_cfg.sample_rate)
    mel = mel_spectrogram(samples, mel_cfg)
    if utterance.pitch_path:
        pitch = read_pitch_file(utterance.pitch_path)
        if len(pitch) != mel.n_frames:
            raise DataFormatError("{0}: {1} pitch values for {2} mel frames".format(
                utterance.pitch_path, len(pitch), mel.n_frames))
    else:
        pitch = estimate_f0(samples, mel_cfg, method=f0_method)
    lm_ids = lm_tokenize(utterance.transcript, lm_table).ids if lm_table is not None else None
    return Example(utterance.id, symbols, mel, pitch, lm_ids)


def collate(examples, pitch_mean=0.0, pitch_std=1.0):
    """pads a list of ``Example``s into a ``Batch``"""
    if not examples:
        raise InputError("can't build an empty batch")
    text_lengths = [len(ex.symbols) for ex in examples]
    mel_lengths = [ex.mel.n_frames for ex in examples]
    n_mels = examples[0].mel.n_mels
    symbols = np.zeros((len(examples), max(text_lengths)), dtype=np.int64)
    mels = np.zeros((len(examples), max(mel_lengths), n_mels), dtype=np.float32)
    for b, ex in enumerate(examples):
        symbols[b, :text_lengths[b]] = ex.symbols.ids
        mels[b, :mel_lengths[b]] = ex.mel.frames
    lm_ids = lm_lengths = None
    if all(ex.lm_ids is not None for ex in examples):
        lm_lengths = [len(ex.lm_ids) for ex in examples]
        lm_ids = np.zeros((len(examples), max(lm_lengths)), dtype=np.int64)
        for b, ex in enumerate(examples):
            lm_ids[b, :lm_lengths[b]] = ex.lm_ids
    return Batch([ex.id for ex in examples], symbols, text_lengths, mels, mel_lengths,
                 [ex.pitch for ex in examples], pitch_mean, pitch_std, lm_ids, lm_lengths)


@dataclass
class Dataset:
    """
    a list of extracted ``Example``s plus the dataset pitch statistics.
    Features are extracted concurrently by ``workers`` threads; the result
    keeps manifest order.
    """
    examples: list = field(default_factory=list)
    pitch_mean: float = 0.0
    pitch_std: float = 1.0

    @classmethod
    def from_utterances(cls, utterances, vocab, mel_cfg, f0_method='autocorr',
                        lm_table=None, workers=1, vocab_size=None, pitch_stats=None):
        if not utterances:
            raise InputError("the dataset is empty")

        def extract(utterance):
            return extract_features(utterance, vocab, mel_cfg, f0_method, lm_table,
                                    vocab_size)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            examples = list(pool.map(extract, utterances))
        if pitch_stats is None:
            pitch_stats = pitch_statistics([ex.pitch for ex in examples])
        logger.info("extracted features of %d utterances (pitch mean %.1f Hz, std %.1f Hz)",
                    len(examples), pitch_stats[0], pitch_stats[1])
        return cls(examples, pitch_stats[0], pitch_stats[1])

    def __len__(self):
        return len(self.examples)

    def batch_indices(self, batch_size, epoch, seed, bucket=False):
        """
        splits a seeded permutation of the dataset into batches. With
        ``bucket``, windows of ``4 * batch_size`` examples are sorted by mel
        length first and the resulting batches are shuffled again, so
        batches hold utterances of similar length. The order only depends
        on ``seed`` and ``epoch``.
        """
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(self.examples))
        if bucket:
            window = 4 * batch_size
            lengths = np.array([ex.mel.n_frames for ex in self.examples])
            order = np.concatenate([
                chunk[np.argsort(lengths[chunk], kind='stable')]
                for chunk in np.array_split(order, max(1, int(math.ceil(len(order) / window))))])
        batches = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
        if bucket:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        return batches

    def batch(self, indices):
        return collate([self.examples[i] for i in indices], self.pitch_mean, self.pitch_std)


def write_tone_corpus(out_dir, mel_cfg=None, transcripts=('hi.', 'a cab', 'mixer'),
                      frames_per_symbol=6, seed=0):
    """
    writes a tiny synthetic corpus: every character becomes a short tone
    whose frequency depends on the character (spaces are near-silent
    noise), plus a ``manifest.txt``. Returns the manifest path.
    """
    mel_cfg = mel_cfg or MelConfig()
    rng = np.random.default_rng(seed)
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    segment = frames_per_symbol * mel_cfg.hop_length
    t = np.arange(segment) / float(mel_cfg.sample_rate)
    lines = []
    for i, transcript in enumerate(transcripts):
        pieces = []
        for char in transcript:
            if char == ' ':
                pieces.append(0.001 * rng.standard_normal(segment))
            else:
                freq = 110.0 + 7.0 * (ord(char) % 40)
                pieces.append(0.4 * np.sin(2 * np.pi * freq * t))
        fname = 'utt{0}.wav'.format(i)
        write_wav(os.path.join(out_dir, fname), np.concatenate(pieces), mel_cfg.sample_rate)
        lines.append(u'utt{0}|{1}|{2}'.format(i, fname, transcript))
    manifest = os.path.join(out_dir, 'manifest.txt')
    with io.open(manifest, 'w', encoding='utf-8') as manifest_file:
        manifest_file.write(u'\n'.join(lines) + u'\n')
    return manifest
