"""Text tensor files.

Layout::

    <MAGIC> v1 [<kind>] <spec-hash>\\n
    {"metadata": {...}, "tensors": [{"name": ..., "shape": [...], "values": [...]}, ...]}

Values are written with 17 significant digits, which round-trips every
float64 exactly.  The same container backs classifier weights
(``IMMUNEKIT-WEIGHTS``), attack weights (``IMMUNEKIT-ATTACK``) and IE archives
(``IMMUNEKIT-ARCHIVE``).
"""

import hashlib
import json

import numpy as np

from .errors import FormatError, ParseError

VERSION = "v1"


class SpecHashMismatch(FormatError):
    """The file was written for a different model specification."""


def spec_hash(obj):
    """Short stable hash of a JSON-serialisable description."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _render(values):
    return "[" + ",".join("%.17g" % v for v in values) + "]"


def dumps(magic, fields, tensors, metadata=None):
    """Render a tensor file to a string.  ``tensors`` is an ordered list of (name, array)."""
    for f in fields:
        if not f or any(c.isspace() for c in str(f)):
            raise ValueError(f"header field {f!r} must be a non-empty token")
    parts = []
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite entries")
        parts.append(
            '{"name":%s,"shape":%s,"values":%s}'
            % (json.dumps(name), json.dumps(list(arr.shape)), _render(arr.ravel()))
        )
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":"))
    header = " ".join([magic, VERSION, *map(str, fields)])
    return header + "\n" + '{"metadata":%s,"tensors":[%s]}\n' % (meta, ",".join(parts))


def write(path, magic, fields, tensors, metadata=None):
    text = dumps(magic, fields, tensors, metadata)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def loads(text, magic, n_fields):
    """Parse a tensor file; returns ``(fields, tensors, metadata)``.

    ``tensors`` is a list of (name, array) pairs in file order.
    """
    head, sep, body = text.partition("\n")
    tokens = head.split()
    if not tokens or tokens[0] != magic:
        raise ParseError(f"bad magic: expected {magic!r}, found {tokens[0] if tokens else head[:32]!r}")
    if len(tokens) < 2 or tokens[1] != VERSION:
        raise FormatError(f"unsupported version {tokens[1] if len(tokens) > 1 else None!r}")
    fields = tokens[2:]
    if len(fields) != n_fields:
        raise ParseError(f"expected {n_fields} header fields after the version, found {len(fields)}")
    if not sep:
        raise ParseError("file truncated after header")
    try:
        doc = json.loads(body)
        tensors = []
        for entry in doc["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            vals = np.array(entry["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ParseError(f"tensor {entry['name']!r}: {vals.size} values for shape {shape}")
            tensors.append((entry["name"], vals.reshape(shape)))
        metadata = doc.get("metadata", {})
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed tensor body: {exc}") from exc
    return fields, tensors, metadata


def read(path, magic, n_fields):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text tensor file") from exc
    return loads(text, magic, n_fields)
