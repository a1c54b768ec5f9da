"""
Versioned checkpoint container.

A checkpoint is a single uncompressed .npz archive. The entry "header" holds a
JSON document (magic, version and any metadata the caller adds); every other
entry is a named numpy array. Arrays are stored with their own dtype, so a
load reproduces the saved values bit for bit.
"""

import json
import logging
import os
import zipfile

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger("acre.checkpoint")

MAGIC = "acre.checkpoint"
VERSION = 1
HEADER_KEY = "header"


def write_container(path, header, arrays):
    """
    Write a header dict and named arrays to path.

    Args:
        path (str): destination file; written as given, no suffix is added
        header (dict): JSON-serializable metadata
        arrays (dict): name -> numpy array

    Returns:
        str: the path written
    """
    if HEADER_KEY in arrays:
        raise CheckpointError(f"array name '{HEADER_KEY}' is reserved")
    document = {"magic": MAGIC, "version": VERSION, **header}
    payload = {HEADER_KEY: np.array(json.dumps(document, sort_keys=True))}
    payload.update({name: np.asarray(value) for name, value in arrays.items()})

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    logger.info(f"Saved checkpoint with {len(arrays)} arrays to {path}")
    return path


def read_container(path):
    """
    Read a container written by write_container.

    Returns:
        tuple: (header dict, dict of name -> numpy array)

    Raises:
        CheckpointError: if the file is missing, unreadable, or carries the
            wrong magic or an unsupported version
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None

    if HEADER_KEY not in arrays:
        raise CheckpointError(f"{path} has no header entry")
    try:
        header = json.loads(str(arrays.pop(HEADER_KEY)))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from None

    if header.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not an acre checkpoint (magic {header.get('magic')!r})")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {header.get('version')!r}")
    return header, arrays
