#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``training`` module contains the optimizer (LAMB), the learning rate
schedule (Noam annealing), gradient clipping and accumulation, the training
loop and the checkpoint format.

All randomness is derived from ``(seed, step)`` pairs: dropout masks of
micro-batch ``i`` in optimizer step ``s`` come from
``default_rng([seed, s, i])`` and the batch order of an epoch from
``default_rng([seed, epoch])``. A run resumed from a checkpoint therefore
takes exactly the same steps as an uninterrupted one.

Checkpoint files (``.mtck``)::

    b'MTCK' | u32 version | u64 step | u32 n | n bytes of YAML metadata
    u32 number of tensors, then per tensor:
    u32 n | n bytes UTF-8 name | u32 rank | rank * u32 dims | little-endian f32

Optimizer moments are stored as tensors named ``opt/m/<param>`` and
``opt/v/<param>``.
"""

import logging
import math
import os
import struct
import sys
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml
from tqdm import tqdm

from .audio_text import Dataset, MelConfig, SymbolVocab, load_manifest
from .errors import CheckpointError, ConfigError, DimensionError, InputError, NumericalError
from .model import LossNormalizers, MixerTTS, ModelConfig
from .numerics import Tensor, backward, zero_grad
from .util import ensure_dir, format_float, merge_dataclass, write_bytes_atomic, write_csv

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'MTCK'
CHECKPOINT_VERSION = 1
METRICS_HEADER = ('step', 'lr', 'loss', 'l_mel', 'l_aligner', 'l_durs', 'l_pitch')
MOMENT_PREFIXES = ('opt/m/', 'opt/v/')


@dataclass
class TrainConfig:
    """
    optimizer, schedule and loop settings. The defaults are desk scale
    (batch 8, 2 accumulated micro-batches); the optimizer settings are those
    of the full-size model.
    """
    batch_size: int = 8
    accum: int = 2
    steps: int = 1000
    epochs: int = None
    base_lr: float = 0.1
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-6
    trust_ratio: bool = True
    max_grad_norm: float = 1000.0
    checkpoint_every: int = 250
    validate_every: int = 0
    seed: int = 0
    bucket: bool = False
    workers: int = 2
    f0_method: str = 'autocorr'

    def __post_init__(self):
        if self.batch_size < 1 or self.accum < 1:
            raise ConfigError("batch_size and accum must be >= 1")
        if self.steps < 1 and not self.epochs:
            raise ConfigError("train for at least one step")
        if self.base_lr <= 0 or self.warmup < 1:
            raise ConfigError("base_lr must be positive and warmup >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.max_grad_norm <= 0:
            raise ConfigError("eps and max_grad_norm must be positive, weight_decay >= 0")
        if self.checkpoint_every < 0 or self.validate_every < 0:
            raise ConfigError("checkpoint_every and validate_every must be >= 0")


def noam_lr(step, base_lr=0.1, warmup=1000):
    """
    linear warmup to ``base_lr`` at ``step == warmup``, inverse square root
    decay afterwards: ``base_lr * min(step / warmup, sqrt(warmup / step))``
    """
    if step < 1:
        raise InputError("learning rate steps start at 1, got {0}".format(step))
    return base_lr * min(step / float(warmup), math.sqrt(warmup / float(step)))


def global_grad_norm(params):
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float(np.sum(np.square(param.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params, max_norm=1000.0):
    """
    scales all gradients by ``max_norm / norm`` if their global L2 norm
    exceeds ``max_norm``; returns the applied scale (1.0 if none)
    """
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    logger.debug("clipping gradients: norm %.3f > %.3f", norm, max_norm)
    for param in params.values():
        if param.grad is not None:
            param.grad = (param.grad * scale).astype(param.dtype)
    return scale


@dataclass
class OptimState:
    """LAMB state: per-parameter moments (in the parameter dtype) and the step"""
    exp_avg: OrderedDict
    exp_avg_sq: OrderedDict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-6
    trust_ratio: bool = True

    @classmethod
    def create(cls, params, **hyper):
        return cls(OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items()),
                   OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items()),
                   **hyper)

    @classmethod
    def from_train_config(cls, params, cfg):
        return cls.create(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                          weight_decay=cfg.weight_decay, trust_ratio=cfg.trust_ratio)


def lamb_step(params, grads, state, lr):
    """
    one LAMB update of every parameter tensor.

    Parameters
    ----------
    params : dict of Tensor
        updated in place
    grads : dict of numpy.ndarray
        gradient per parameter name; a missing or None gradient counts as 0
    state : OptimState
    lr : float

    Returns
    -------
    params : dict of Tensor
    """
    if list(state.exp_avg) != list(params):
        raise DimensionError("optimizer state and parameters disagree on the tensor names")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if m.shape != param.shape:
            raise DimensionError("moment of {0} has shape {1}, parameter {2}".format(
                name, m.shape, param.shape))
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        update = update + state.weight_decay * param.data
        ratio = 1.0
        if state.trust_ratio:
            w_norm = float(np.linalg.norm(param.data))
            u_norm = float(np.linalg.norm(update))
            if w_norm > 0 and u_norm > 0:
                ratio = w_norm / u_norm
        param.data = (param.data - lr * ratio * update).astype(param.dtype)
    return params


# checkpoints

@dataclass
class Checkpoint:
    params: OrderedDict
    step: int = 0
    meta: dict = field(default_factory=dict)
    moments: OrderedDict = field(default_factory=OrderedDict)

    def model_config(self):
        return merge_dataclass(ModelConfig(), self.meta.get('model', {}), 'model')

    def train_config(self):
        return merge_dataclass(TrainConfig(), self.meta.get('train', {}), 'train')

    def mel_config(self):
        return merge_dataclass(MelConfig(), self.meta.get('mel', {}), 'mel')


def _pack_tensor(name, array):
    encoded = name.encode('utf-8')
    array = np.ascontiguousarray(array, dtype='<f4')
    return b''.join([struct.pack('<I', len(encoded)), encoded,
                     struct.pack('<I', array.ndim),
                     struct.pack('<{0}I'.format(array.ndim), *array.shape),
                     array.tobytes()])


def save_checkpoint(path, params, step, meta=None, state=None):
    """
    writes parameters (and optionally the optimizer state) to ``path``.

    :type params: ``dict`` of ``Tensor`` or ``numpy.ndarray``
    """
    meta = dict(meta or {})
    tensors = [(name, p.data if isinstance(p, Tensor) else p) for name, p in params.items()]
    if state is not None:
        meta['optimizer'] = {'step': state.step, 'beta1': state.beta1, 'beta2': state.beta2,
                             'eps': state.eps, 'weight_decay': state.weight_decay,
                             'trust_ratio': state.trust_ratio}
        tensors += [(MOMENT_PREFIXES[0] + name, m) for name, m in state.exp_avg.items()]
        tensors += [(MOMENT_PREFIXES[1] + name, v) for name, v in state.exp_avg_sq.items()]
    meta_blob = yaml.safe_dump(meta, default_flow_style=False).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<IQI', CHECKPOINT_VERSION, step, len(meta_blob)),
             meta_blob, struct.pack('<I', len(tensors))]
    parts.extend(_pack_tensor(name, array) for name, array in tensors)
    write_bytes_atomic(b''.join(parts), path)


class _Reader(object):
    def __init__(self, blob, path):
        self.blob, self.path, self.pos = blob, path, 0

    def take(self, n_bytes):
        if self.pos + n_bytes > len(self.blob):
            raise CheckpointError("{0}: truncated checkpoint".format(self.path))
        chunk = self.blob[self.pos:self.pos + n_bytes]
        self.pos += n_bytes
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """
    reads a checkpoint file.

    :rtype: ``Checkpoint`` (parameters and moments as float32 arrays)
    :raises CheckpointError: on a bad magic, unknown version or truncation
    """
    try:
        with open(path, 'rb') as ckpt_file:
            blob = ckpt_file.read()
    except IOError as err:
        raise InputError("can't read checkpoint {0}: {1}".format(path, err))
    reader = _Reader(blob, path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("{0}: bad checkpoint magic".format(path))
    version, step, meta_len = reader.unpack('<IQI')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("{0}: checkpoint version {1} is not supported".format(
            path, version))
    try:
        meta = yaml.safe_load(reader.take(meta_len).decode('utf-8')) or {}
    except (yaml.YAMLError, UnicodeDecodeError) as err:
        raise CheckpointError("{0}: unreadable checkpoint metadata ({1})".format(path, err))
    params, moments = OrderedDict(), OrderedDict()
    n_tensors, = reader.unpack('<I')
    for _ in range(n_tensors):
        name_len, = reader.unpack('<I')
        name = reader.take(name_len).decode('utf-8')
        rank, = reader.unpack('<I')
        shape = reader.unpack('<{0}I'.format(rank))
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape)
        target = moments if name.startswith(MOMENT_PREFIXES) else params
        target[name] = array.astype(np.float32)
    if reader.pos != len(blob):
        raise CheckpointError("{0}: trailing bytes after the last tensor".format(path))
    return Checkpoint(params, step, meta, moments)


def model_from_checkpoint(checkpoint, lm_table=None):
    """rebuilds the ``MixerTTS`` model stored in a checkpoint"""
    params = OrderedDict((name, Tensor(array, requires_grad=True, name=name))
                         for name, array in checkpoint.params.items())
    return MixerTTS(checkpoint.model_config(), lm_table=lm_table, params=params)


# the training loop

@dataclass
class StepRecord:
    """the scalars of one optimizer step"""
    step: int
    lr: float
    loss: float
    components: OrderedDict
    grad_scale: float = 1.0
    durations: dict = field(default_factory=dict)

    def csv_row(self):
        return [self.step, format_float(self.lr), format_float(self.loss)] + \
            [format_float(v) for v in self.components.values()]


class Trainer(object):
    """
    runs optimizer steps of a ``MixerTTS`` model on a ``Dataset``.

    Parameters
    ----------
    model : MixerTTS
    dataset : Dataset
    cfg : TrainConfig
    mel_cfg : MelConfig or None
        only stored in checkpoint metadata
    """
    def __init__(self, model, dataset, cfg, mel_cfg=None):
        if len(dataset) == 0:
            raise InputError("can't train on an empty dataset")
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.mel_cfg = mel_cfg or MelConfig()
        self.state = OptimState.from_train_config(model.params, cfg)
        self.step = 0
        self._epoch_batches = {}

    @property
    def batches_per_epoch(self):
        return int(math.ceil(len(self.dataset) / float(self.cfg.batch_size)))

    def _batch_indices(self, position):
        """the example indices of the ``position``-th micro-batch of the run"""
        epoch, index = divmod(position, self.batches_per_epoch)
        if epoch not in self._epoch_batches:
            self._epoch_batches = {epoch: self.dataset.batch_indices(
                self.cfg.batch_size, epoch, self.cfg.seed, self.cfg.bucket)}
        return self._epoch_batches[epoch][index]

    def train_step(self):
        """
        one optimizer step over ``accum`` micro-batches: forward, backward
        with accumulated gradients, clipping, LAMB with the Noam rate.

        :rtype: ``StepRecord``
        """
        cfg, model = self.cfg, self.model
        step = self.step + 1
        first = self.step * cfg.accum
        batches = [self.dataset.batch(self._batch_indices(first + i))
                   for i in range(cfg.accum)]
        normalizers = LossNormalizers.for_batches(batches, model.cfg.n_mels)
        zero_grad(model.params)
        total = 0.0
        components = OrderedDict((key, 0.0) for key in METRICS_HEADER[3:])
        durations = {}
        for i, batch in enumerate(batches):
            rng = np.random.default_rng([cfg.seed, step, i])
            try:
                out = model.forward_train(batch, training=True, rng=rng)
                loss, parts = model.total_loss(out, batch, normalizers)
                backward(loss, accumulate=i > 0)
            except NumericalError as err:
                raise NumericalError("training diverged at step {0}: {1}".format(step, err))
            total += loss.item()
            for key, value in parts.items():
                components[key] += value
            durations.update((uid, d.tolist()) for uid, d in zip(batch.ids, out.durations))
        if not math.isfinite(total):
            raise NumericalError("non-finite loss {0} at step {1}".format(total, step))

        lr = noam_lr(step, cfg.base_lr, cfg.warmup)
        scale = clip_gradients(model.params, cfg.max_grad_norm)
        grads = OrderedDict((name, p.grad) for name, p in model.params.items())
        lamb_step(model.params, grads, self.state, lr)
        self.step = step
        return StepRecord(step, lr, total, components, scale, durations)

    def evaluate(self, dataset):
        """mean loss components over ``dataset`` in eval mode"""
        indices = list(range(len(dataset)))
        batches = [dataset.batch(indices[i:i + self.cfg.batch_size])
                   for i in range(0, len(indices), self.cfg.batch_size)]
        normalizers = LossNormalizers.for_batches(batches, self.model.cfg.n_mels)
        total = 0.0
        components = OrderedDict((key, 0.0) for key in METRICS_HEADER[3:])
        for batch in batches:
            out = self.model.forward_train(batch, training=False)
            loss, parts = self.model.total_loss(out, batch, normalizers)
            total += loss.item()
            for key, value in parts.items():
                components[key] += value
        return total, components

    def checkpoint_meta(self):
        return {'model': asdict(self.model.cfg), 'train': asdict(self.cfg),
                'mel': asdict(self.mel_cfg), 'pitch_mean': float(self.dataset.pitch_mean),
                'pitch_std': float(self.dataset.pitch_std)}

    def save(self, path):
        save_checkpoint(path, self.model.params, self.step, self.checkpoint_meta(), self.state)
        logger.info("wrote checkpoint %s (step %d)", path, self.step)

    def restore(self, checkpoint):
        """continues from a ``Checkpoint`` written by ``save``"""
        params = self.model.params
        if set(checkpoint.params) != set(params):
            raise CheckpointError("the checkpoint's parameters don't fit the model")
        for name, param in params.items():
            if checkpoint.params[name].shape != param.shape:
                raise CheckpointError("parameter {0}: checkpoint shape {1}, model {2}".format(
                    name, checkpoint.params[name].shape, param.shape))
            param.data = checkpoint.params[name].astype(param.dtype)
            param.grad = None
            for prefix, moments in zip(MOMENT_PREFIXES,
                                       (self.state.exp_avg, self.state.exp_avg_sq)):
                if prefix + name not in checkpoint.moments:
                    raise CheckpointError("checkpoint has no optimizer state for " + name)
                moments[name] = checkpoint.moments[prefix + name].astype(param.dtype)
        self.state.step = int(checkpoint.meta.get('optimizer', {}).get('step', checkpoint.step))
        self.step = checkpoint.step


@dataclass
class TrainResult:
    trainer: Trainer
    records: list
    checkpoints: list


def total_steps(cfg, n_examples):
    if cfg.epochs:
        per_epoch = int(math.ceil(n_examples / float(cfg.batch_size)))
        return int(math.ceil(cfg.epochs * per_epoch / float(cfg.accum)))
    return cfg.steps


def train(model_cfg, train_cfg, manifest, out_dir, mel_cfg=None, resume=None,
          valid_manifest=None, lm_table=None, progress=None):
    """
    trains a model on the utterances of ``manifest``.

    Writes ``metrics.csv`` (one row per optimizer step) and checkpoints
    ``step_<n>.mtck`` every ``checkpoint_every`` steps and after the last
    step into ``out_dir``.

    Parameters
    ----------
    model_cfg : ModelConfig
    train_cfg : TrainConfig
    manifest : str
        path of the training manifest
    out_dir : str
    mel_cfg : MelConfig or None
    resume : str or None
        checkpoint to continue from
    valid_manifest : str or None
        held-out utterances; evaluated every ``validate_every`` steps into
        ``valid.csv``
    progress : bool or None
        show a progress bar; defaults to whether stderr is a terminal

    Returns
    -------
    TrainResult
    """
    mel_cfg = mel_cfg or MelConfig()
    if model_cfg.n_mels != mel_cfg.n_mels:
        raise ConfigError("the model predicts {0} mel bins, the features have {1}".format(
            model_cfg.n_mels, mel_cfg.n_mels))
    vocab = SymbolVocab()
    if len(vocab) > model_cfg.vocab_size:
        raise ConfigError("vocab_size {0} is smaller than the {1} symbols of the "
                          "vocabulary".format(model_cfg.vocab_size, len(vocab)))
    ensure_dir(out_dir)
    model = MixerTTS(model_cfg, lm_table=lm_table, seed=train_cfg.seed)
    dataset = Dataset.from_utterances(load_manifest(manifest), vocab, mel_cfg,
                                      train_cfg.f0_method, model.lm_table,
                                      train_cfg.workers, model_cfg.vocab_size)
    valid = None
    if valid_manifest:
        valid = Dataset.from_utterances(load_manifest(valid_manifest), vocab, mel_cfg,
                                        train_cfg.f0_method, model.lm_table,
                                        train_cfg.workers, model_cfg.vocab_size,
                                        pitch_stats=(dataset.pitch_mean, dataset.pitch_std))
    trainer = Trainer(model, dataset, train_cfg, mel_cfg)
    metrics_path = os.path.join(out_dir, 'metrics.csv')
    if resume:
        trainer.restore(load_checkpoint(resume))
        logger.info("resuming from %s at step %d", resume, trainer.step)
    else:
        write_csv(metrics_path, METRICS_HEADER, [])

    n_steps = total_steps(train_cfg, len(dataset))
    if progress is None:
        progress = sys.stderr.isatty()
    records, checkpoints = [], []
    started = time.time()
    for _ in tqdm(range(trainer.step, n_steps), desc='training', disable=not progress):
        record = trainer.train_step()
        records.append(record)
        write_csv(metrics_path, METRICS_HEADER, [record.csv_row()], append=True)
        logger.debug("step %d: loss %.5f (lr %.5f)", record.step, record.loss, record.lr)
        if valid is not None and train_cfg.validate_every and \
                record.step % train_cfg.validate_every == 0:
            loss, parts = trainer.evaluate(valid)
            write_csv(os.path.join(out_dir, 'valid.csv'), METRICS_HEADER,
                      [[record.step, format_float(record.lr), format_float(loss)]
                       + [format_float(v) for v in parts.values()]], append=True)
            logger.info("step %d: validation loss %.5f", record.step, loss)
        last = record.step == n_steps
        if last or (train_cfg.checkpoint_every and record.step % train_cfg.checkpoint_every == 0):
            path = os.path.join(out_dir, 'step_{0:06d}.mtck'.format(record.step))
            trainer.save(path)
            checkpoints.append(path)
    logger.info("trained %d steps in %.1f s", len(records), time.time() - started)
    return TrainResult(trainer, records, checkpoints)
