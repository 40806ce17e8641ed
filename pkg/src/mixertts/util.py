#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
The ``util`` module contains a number of 'bread and butter' functions that
are needed to run mixertts, but are not particularly interesting (file
writers, CSV helpers, config record merging etc.).

There shouldn't be any code in this module that requires loading the model
modules of mixertts!
"""

import csv
import io
import os
import tempfile
from dataclasses import fields, is_dataclass

from .errors import ConfigError


def ensure_dir(path):
    """creates ``path`` (and its parents) unless it already exists"""
    if path and not os.path.isdir(path):
        os.makedirs(path)
    return path


def write_bytes_atomic(blob, file_path):
    """
    writes ``blob`` to a temporary file next to ``file_path`` and renames it,
    so readers never see a half-written file
    """
    directory = os.path.dirname(os.path.abspath(file_path))
    handle, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(handle, 'wb') as tmp_file:
            tmp_file.write(blob)
        os.replace(tmp_path, file_path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_to_file(string, file_path):
    """writes a (unicode) string to a UTF-8 encoded file"""
    with io.open(file_path, 'w', encoding='utf-8') as f_obj:
        f_obj.write(string)


def write_csv(file_path, header, rows, append=False):
    """
    writes ``rows`` (sequences of values) below ``header``. When appending
    to an existing file, the header is not repeated.
    """
    exists = append and os.path.isfile(file_path)
    with io.open(file_path, 'a' if append else 'w', encoding='utf-8', newline='') as csv_file:
        writer = csv.writer(csv_file, lineterminator='\n')
        if not exists:
            writer.writerow(header)
        writer.writerows(rows)


def read_csv(file_path):
    """returns the rows of a CSV file as dictionaries keyed by the header"""
    with io.open(file_path, encoding='utf-8', newline='') as csv_file:
        return list(csv.DictReader(csv_file))


def format_float(value):
    """shortest text form that reads back to the same float"""
    return repr(float(value))


def merge_dataclass(base, values, section):
    """
    returns a copy of the dataclass instance ``base`` with the entries of
    the dictionary ``values`` applied. Nested dataclass fields are merged
    recursively, so partial sections keep the remaining defaults.

    :type section: ``str``
    :param section: dotted name used in error messages, e.g. ``model.encoder``

    :raises ConfigError: on unknown keys or values the dataclass rejects
    """
    if not isinstance(values, dict):
        raise ConfigError("section '{0}' must be a mapping, got {1!r}".format(section, values))
    kwargs = {f.name: getattr(base, f.name) for f in fields(base)}
    for key, value in values.items():
        if key not in kwargs:
            raise ConfigError("unknown config key '{0}.{1}'".format(section, key))
        current = kwargs[key]
        if is_dataclass(current):
            value = merge_dataclass(current, value, section + '.' + key)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return type(base)(**kwargs)
    except TypeError as err:
        raise ConfigError("bad value in section '{0}': {1}".format(section, err))
