#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``errors`` module contains the exceptions raised by mixertts. Every
exception carries the exit code the command line interface uses when it
reports the error: 2 for usage/input problems, 3 for malformed data files
and 4 for numerical failures.
"""


class MixerTTSError(Exception):
    """base class of all mixertts errors"""
    exit_code = 1


class ConfigError(MixerTTSError):
    """an invalid hyperparameter or config file entry"""
    exit_code = 2


class InputError(MixerTTSError):
    """user input that can't be processed (missing files, empty text ...)"""
    exit_code = 2


class DimensionError(MixerTTSError, ValueError):
    """tensor shapes that don't fit together"""
    exit_code = 2


class DataFormatError(MixerTTSError):
    """a malformed manifest, audio, pitch, mel or embedding table file"""
    exit_code = 3


class CheckpointError(DataFormatError):
    """a checkpoint file that can't be read"""
    exit_code = 3


class AlignmentError(MixerTTSError):
    """
    raised when no monotonic alignment exists, i.e. when a text has more
    tokens than its mel-spectrogram has frames
    """
    exit_code = 4


class NumericalError(MixerTTSError, ArithmeticError):
    """NaN or Inf showed up in a tensor"""
    exit_code = 4


class GradientError(MixerTTSError):
    """``backward`` was called on something it can't differentiate"""
    exit_code = 4
