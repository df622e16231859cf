"""
Versioned JSON envelope shared by every saved model.

Layout: {format_version, kind, ...body, checksum}. The checksum is the
SHA-256 of the canonical (sorted-key, compact) JSON of everything else.
Floats are written with repr precision, so arrays round-trip bit-exactly.
"""

import hashlib
import json
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np

from errors import ChecksumError, FormatVersionError, ModelFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _digest(document):
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def encode_arrays(arrays):
    """Named float arrays -> {name: {"shape": [...], "data": [row-major floats]}}."""
    return OrderedDict(
        (name, {"shape": list(np.shape(value)), "data": [float(v) for v in np.ravel(value)]})
        for name, value in arrays.items()
    )


def decode_arrays(payload):
    arrays = OrderedDict()
    for name, entry in payload.items():
        data = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ModelFormatError(f"Array '{name}' has {data.size} values but shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays


def write_envelope(path, kind, body):
    """
    Write a model file.

    Args:
        path: Destination file
        kind: Model kind tag ("gnn", "id3", "random_forest", "mlp")
        body: JSON-serializable payload

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format_version": FORMAT_VERSION, "kind": kind}
    document.update(body)
    document["checksum"] = _digest(document)
    with open(path, "w") as f:
        json.dump(document, f)
    logger.info("Saved %s model to %s", kind, path)
    return path


def read_envelope(path, expected_kind=None):
    """
    Read and verify a model file.

    Raises:
        FormatVersionError: the file was written with another format version
        ChecksumError: the file is truncated or its content was altered
        ModelFormatError: the file holds a different model kind
    """
    with open(path, "r") as f:
        text = f.read()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ChecksumError(f"Model file {path} is truncated or corrupted: {e}")
    if not isinstance(document, dict):
        raise ChecksumError(f"Model file {path} does not hold a JSON object")

    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"Model file {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    checksum = document.pop("checksum", None)
    if checksum != _digest(document):
        raise ChecksumError(f"Checksum mismatch in model file {path}")
    kind = document.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ModelFormatError(f"Model file {path} holds a '{kind}' model, expected '{expected_kind}'")
    return document


def peek_kind(path):
    """Model kind of a verified file."""
    return read_envelope(path)["kind"]
