#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``lm_cond`` module implements the conditioning of the extended model on
frozen token embeddings of a pretrained language model.

The LM tokenizes text differently from the symbol tokenizer, so the two
sequences have different lengths (M LM tokens vs. N symbols). A single-head
attention block aligns them: queries come from the encoder output, keys and
values from the LM embeddings, and the attended LM features are projected
back and added to the encoder output, keeping its length N.

Embedding tables are plain text files::

    V D_lm
    token v_1 ... v_D_lm
    ...

A tiny deterministic demo table ships in ``data/demo_lm_table.txt``.
"""

import io
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from nltk.tokenize import wordpunct_tokenize

from .errors import ConfigError, DataFormatError, DimensionError, InputError
from .numerics import (Module, ParamSpec, Tensor, add, apply_sequence_mask,
                       as_tensor, conv1d, linear, matmul, sequence_mask, softmax,
                       transpose)

logger = logging.getLogger(__name__)

DEMO_TABLE_FILE = os.path.join(os.path.dirname(__file__), 'data', 'demo_lm_table.txt')
UNK_TOKEN = '[UNK]'
CONTINUATION_PREFIX = '##'
MASKED_SCORE = -1e9


@dataclass
class FrozenEmbeddingTable:
    """
    token embeddings of a pretrained LM. The matrix is never trained; the
    tensor handed to the model has ``requires_grad=False``.
    """
    vocab: dict
    matrix: np.ndarray
    unk_token: str = UNK_TOKEN

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataFormatError("an embedding table is a [V, D] matrix")
        if any(i < 0 or i >= self.matrix.shape[0] for i in self.vocab.values()):
            raise DataFormatError("vocabulary ids must be smaller than V={0}".format(
                self.matrix.shape[0]))

    @property
    def trainable(self):
        return False

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    @property
    def unk_id(self):
        return self.vocab.get(self.unk_token)

    def lookup(self, ids, dtype=None):
        """the embeddings of ``ids`` as a constant (frozen) tensor"""
        ids = np.asarray(ids, dtype=np.int64)
        return Tensor(self.matrix[ids], requires_grad=False, dtype=dtype)


@dataclass
class LmTokenSequence:
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def load_table(path):
    """reads an embedding table file (header ``V D_lm``, then one token per line)"""
    try:
        with io.open(path, encoding='utf-8') as table_file:
            lines = table_file.read().splitlines()
    except IOError as err:
        raise InputError("can't read embedding table {0}: {1}".format(path, err))
    if not lines:
        raise DataFormatError("{0}: empty embedding table".format(path))
    try:
        n_tokens, dim = [int(v) for v in lines[0].split()]
    except ValueError:
        raise DataFormatError("{0}: line 1 must be 'V D_lm'".format(path))
    vocab = {}
    matrix = np.zeros((n_tokens, dim))
    rows = [line for line in lines[1:] if line.strip()]
    if len(rows) != n_tokens:
        raise DataFormatError("{0}: header announces {1} tokens, found {2}".format(
            path, n_tokens, len(rows)))
    for i, line in enumerate(rows):
        fields = line.split(' ')
        if len(fields) != dim + 1:
            raise DataFormatError("{0}: line {1} has {2} values, expected {3}".format(
                path, i + 2, len(fields) - 1, dim))
        try:
            matrix[i] = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataFormatError("{0}: line {1} contains a non-number".format(path, i + 2))
        vocab[fields[0]] = i
    return FrozenEmbeddingTable(vocab, matrix)


def save_table(table, path):
    id2token = sorted(table.vocab.items(), key=lambda item: item[1])
    with io.open(path, 'w', encoding='utf-8') as table_file:
        table_file.write(u'{0} {1}\n'.format(table.size, table.dim))
        for token, i in id2token:
            values = ' '.join(repr(float(v)) for v in table.matrix[i])
            table_file.write(u'{0} {1}\n'.format(token, values))


def load_demo_table():
    """the bundled demo table (139 tokens, D_lm = 32)"""
    return load_table(DEMO_TABLE_FILE)


def _longest_match(word, start, table, continuation):
    for end in range(len(word), start, -1):
        piece = word[start:end]
        if continuation and CONTINUATION_PREFIX + piece in table.vocab:
            return end, table.vocab[CONTINUATION_PREFIX + piece]
        if piece in table.vocab:
            return end, table.vocab[piece]
    return None, None


def lm_tokenize(text, table):
    """
    lowercases ``text``, splits it into words and punctuation (nltk's
    ``wordpunct_tokenize``) and breaks every word into the longest vocabulary
    pieces, left to right. Pieces after the first may match either a
    ``##``-prefixed continuation entry or a plain entry. Characters no piece
    covers become the unknown token; without one in the table they are an
    ``InputError``.

    :rtype: ``LmTokenSequence``
    """
    if not text or not text.strip():
        raise InputError("can't LM-tokenize empty text")
    ids = []
    unknown = 0
    for word in wordpunct_tokenize(text.lower()):
        start = 0
        while start < len(word):
            end, token_id = _longest_match(word, start, table, continuation=start > 0)
            if end is None:
                if table.unk_id is None:
                    raise InputError("{0!r} is not covered by the LM vocabulary, which has "
                                     "no unknown token".format(word[start]))
                unknown += 1
                ids.append(table.unk_id)
                start += 1
            else:
                ids.append(token_id)
                start = end
    if unknown:
        logger.warning("%d character(s) not covered by the LM vocabulary", unknown)
    if not ids:
        raise InputError("no LM tokens left for {0!r}".format(text))
    return LmTokenSequence(ids)


@dataclass
class LmConditionerConfig:
    feature_dim: int = 384
    lm_dim: int = 128
    max_positions: int = 1024
    kernel_size: int = 3

    def __post_init__(self):
        if min(self.feature_dim, self.lm_dim, self.max_positions) <= 0:
            raise ConfigError("LM conditioner dimensions must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("LM conditioner kernel must be odd")


class LmConditioner(Module):
    """the single-head attention block of the extended model"""
    def __init__(self, cfg):
        self.cfg = cfg

    def param_specs(self):
        C, D, P, K = (self.cfg.feature_dim, self.cfg.lm_dim, self.cfg.max_positions,
                      self.cfg.kernel_size)
        return OrderedDict([
            ('text_pos.embedding', ParamSpec((P, C), 'normal', None, 0.1)),
            ('lm_pos.embedding', ParamSpec((P, C), 'normal', None, 0.1)),
            ('lm_proj.weight', ParamSpec((D, C), 'uniform', D)),
            ('lm_proj.bias', ParamSpec((C,), 'uniform', D)),
            ('query.weight', ParamSpec((K, C, C), 'uniform', K * C)),
            ('query.bias', ParamSpec((C,), 'uniform', K * C)),
            ('key.weight', ParamSpec((K, C, C), 'uniform', K * C)),
            ('key.bias', ParamSpec((C,), 'uniform', K * C)),
            ('value.weight', ParamSpec((C, C), 'uniform', C)),
            ('value.bias', ParamSpec((C,), 'uniform', C)),
            ('out.weight', ParamSpec((C, C), 'uniform', C)),
            ('out.bias', ParamSpec((C,), 'uniform', C)),
        ])


def attend_lm(t_e, lm_emb, params, text_lengths=None, lm_lengths=None,
              return_weights=False):
    """
    mixes LM token features into the encoder output.

    Parameters
    ----------
    t_e : Tensor
        encoder output, [N, C] or a padded batch [B, N, C]
    lm_emb : Tensor or numpy.ndarray
        frozen LM embeddings, [M, D_lm] or [B, M, D_lm]
    params : dict
        the ``LmConditioner`` parameters
    text_lengths, lm_lengths : list of int or None
        valid lengths of a padded batch
    return_weights : bool
        also return the [B, N, M] attention weights

    Returns
    -------
    Tensor
        ``t_e`` plus the projected attention output, same shape as ``t_e``
    """
    lm_emb = as_tensor(lm_emb, dtype=t_e.dtype)
    unbatched = t_e.ndim == 2
    if unbatched:
        t_e = t_e.reshape((1,) + t_e.shape)
        lm_emb = lm_emb.reshape((1,) + lm_emb.shape)
    B, N, C = t_e.shape
    M = lm_emb.shape[1]
    if M == 0:
        raise InputError("attend_lm needs at least one LM token")
    if lm_emb.shape[0] != B:
        raise DimensionError("batch sizes differ: {0} symbols vs {1} LM sequences".format(
            B, lm_emb.shape[0]))
    text_pos, lm_pos = params['text_pos.embedding'], params['lm_pos.embedding']
    if max(N, M) > text_pos.shape[0]:
        raise InputError("sequence of length {0} exceeds the {1} positional "
                         "embeddings".format(max(N, M), text_pos.shape[0]))
    if text_lengths is None:
        text_lengths = [N] * B
    if lm_lengths is None:
        lm_lengths = [M] * B

    lm = apply_sequence_mask(
        linear(lm_emb, params['lm_proj.weight'], params['lm_proj.bias']), lm_lengths)
    queries = apply_sequence_mask(add(t_e, text_pos[:N]), text_lengths)
    queries = apply_sequence_mask(
        conv1d(queries, params['query.weight'], params['query.bias']), text_lengths)
    keys = apply_sequence_mask(add(lm, lm_pos[:M]), lm_lengths)
    keys = apply_sequence_mask(conv1d(keys, params['key.weight'], params['key.bias']),
                               lm_lengths)
    values = linear(lm, params['value.weight'], params['value.bias'])

    scores = matmul(queries, transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(C))
    key_mask = sequence_mask(lm_lengths, M)[:, None, :]
    scores = scores + np.where(key_mask, 0.0, MASKED_SCORE).astype(scores.dtype)
    weights = softmax(scores, axis=-1)
    context = matmul(weights, values)
    out = t_e + linear(context, params['out.weight'], params['out.bias'])
    out = apply_sequence_mask(out, text_lengths)
    if unbatched:
        out, weights = out[0], weights[0]
    if return_weights:
        return out, weights
    return out
