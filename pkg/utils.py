import logging
import os
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"


def stage_rng(seed, label):
    """
    Derive an independent random generator for one pipeline stage.

    Args:
        seed: Master seed of the run
        label: Fixed stage name, e.g. "split" or "train"

    Returns:
        numpy Generator that depends only on (seed, label)
    """
    label_key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), label_key]))


def child_seeds(rng, count):
    """Draw `count` integer seeds from a generator, for per-item generators."""
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=count)]


def write_rows_csv(rows, path, columns=None):
    """
    Write a list of dict rows as CSV with a fixed column order.

    Args:
        rows: List of dictionaries
        path: Output file path
        columns: Column order; defaults to the keys of the first row

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=columns)
    # repr-precision floats keep re-runs byte-identical
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def read_rows_csv(path):
    """Read a CSV written by write_rows_csv into a DataFrame."""
    return pd.read_csv(path)


@contextmanager
def output_lock(directory):
    """
    Hold an exclusive lock file in an output directory for the duration of a block.

    Args:
        directory: Output directory; created when missing

    Raises:
        RuntimeError: another process already holds the lock
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"Output directory {directory} is locked by another run ({lock_path})")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield directory
    finally:
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass
