"""Single-file model archives.

Layout (all integers little-endian)::

    b"DNDM" | u32 version | u32 section count
    section*: u16 name length | name | u8 kind | u64 payload length | payload | u32 crc32

``kind`` is ``t`` for UTF-8 text, ``f`` for float64 tensors and ``i`` for
int64 tensors.  Tensor payloads start with ``u32 ndim`` and ``ndim`` u32
dimensions followed by the row-major data.  The checksum covers name, kind
and payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DNDFError,
    InvariantError,
    LoadError,
    TruncationError,
    VersionError,
)
from .extractor import network_from_specs
from .forest import Forest, TreeTopology
from .model import DNDFModel
from .trainer import TrainConfig

MAGIC = b"DNDM"
VERSION = 1

_HEAD = struct.Struct("<4sII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DTYPES = {"f": "<f8", "i": "<i8"}


class SaveError(DNDFError, OSError):
    pass


def _text(value: str):
    return "t", value.encode("utf-8")


def _tensor(array, kind="f"):
    a = np.ascontiguousarray(array, dtype=_DTYPES[kind])
    head = _U32.pack(a.ndim) + b"".join(_U32.pack(d) for d in a.shape)
    return kind, head + a.tobytes()


def _sections(model: DNDFModel, config: TrainConfig):
    net = model.extractor
    shape = ",".join(str(s) for s in net.input_shape)
    yield "config", _text(config.to_text())
    yield "vocabulary", _text("".join(f"{v}\n" for v in model.vocabulary))
    yield "extractor", _text(f"input={shape}\n" + "".join(f"{s}\n" for s in net.specs()))
    for name, value in net.named_params().items():
        yield f"param:{name}", _tensor(value)
    for name, value in net.named_buffers().items():
        yield f"buffer:{name}", _tensor(value)
    yield "input_mean", _tensor(model.input_mean)
    yield "input_std", _tensor(model.input_std)
    yield "pi", _tensor(model.forest.pi)
    yield "assignment", _tensor(model.forest.assignment, "i")


def to_bytes(model: DNDFModel, config: TrainConfig) -> bytes:
    sections = list(_sections(model, config))
    out = [_HEAD.pack(MAGIC, VERSION, len(sections))]
    for name, (kind, payload) in sections:
        raw_name = name.encode("utf-8")
        body = raw_name + kind.encode("ascii") + payload
        out += [
            _U16.pack(len(raw_name)),
            raw_name,
            kind.encode("ascii"),
            _U64.pack(len(payload)),
            payload,
            _U32.pack(zlib.crc32(body)),
        ]
    return b"".join(out)


def save(model: DNDFModel, config: TrainConfig, path):
    """Write the archive atomically: a temp file in the target directory is
    renamed over ``path`` only once fully written."""
    data = to_bytes(model, config)
    path = Path(path)
    fd, tmp = None, None
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fd = None
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise SaveError(f"cannot write model archive {path}: {exc}") from exc
    finally:
        if fd is not None:
            os.close(fd)
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if n > len(self.data) - self.pos:
            raise TruncationError(f"archive truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_sections(data: bytes) -> dict:
    """Parse and checksum-verify every section; returns ``name -> (kind, payload, crc)``."""
    r = _Reader(data)
    magic, version, count = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if magic != MAGIC:
        raise BadMagicError(f"not a model archive (magic {magic!r})")
    if version != VERSION:
        raise VersionError(f"unsupported archive version {version} (expected {VERSION})")
    sections = {}
    previous = "header"
    for i in range(count):
        where = f"section {i + 1} of {count} (after {previous!r})"
        (nlen,) = _U16.unpack(r.take(_U16.size, where))
        raw_name = r.take(nlen, where)
        kind = r.take(1, where)
        (plen,) = _U64.unpack(r.take(_U64.size, where))
        payload = r.take(plen, where)
        (crc,) = _U32.unpack(r.take(_U32.size, where))
        if zlib.crc32(raw_name + kind + payload) != crc:
            raise ChecksumError(f"checksum mismatch in {where}")
        try:
            name = raw_name.decode("utf-8")
            kind = kind.decode("ascii")
        except UnicodeDecodeError as exc:
            raise LoadError(f"undecodable section name in {where}") from exc
        if name in sections:
            raise LoadError(f"duplicate section {name!r}")
        sections[name] = (kind, payload, crc)
        previous = name
    if r.pos != len(data):
        raise LoadError(f"{len(data) - r.pos} unexpected trailing bytes after last section")
    return sections


def section_checksums(path) -> dict:
    return {name: crc for name, (_, _, crc) in read_sections(Path(path).read_bytes()).items()}


def _decode_tensor(name, kind, payload):
    if kind not in _DTYPES:
        raise LoadError(f"section {name!r} has kind {kind!r}, expected a tensor")
    r = _Reader(payload)
    (ndim,) = _U32.unpack(r.take(4, name))
    if ndim > 8:
        raise LoadError(f"section {name!r}: implausible rank {ndim}")
    shape = tuple(_U32.unpack(r.take(4, name))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64))
    body = r.take(8 * count, name)
    if r.pos != len(payload):
        raise LoadError(f"section {name!r}: payload longer than its shape {shape}")
    return np.frombuffer(body, dtype=_DTYPES[kind]).reshape(shape).copy()


def from_bytes(data: bytes):
    """Rebuild ``(model, config)`` from archive bytes, validating every invariant."""
    sections = read_sections(data)

    def get(name, kind=None):
        if name not in sections:
            raise TruncationError(f"archive is missing section {name!r}")
        k, payload, _ = sections[name]
        if kind == "t":
            if k != "t":
                raise LoadError(f"section {name!r} is not text")
            try:
                return payload.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise LoadError(f"section {name!r} is not valid UTF-8") from exc
        return _decode_tensor(name, k, payload)

    try:
        config = TrainConfig.from_text(get("config", "t"))
    except (ConfigError, ValueError, TypeError) as exc:
        raise InvariantError(f"invalid config section: {exc}") from exc
    vocabulary = [v for v in get("vocabulary", "t").splitlines() if v]

    lines = get("extractor", "t").splitlines()
    try:
        if not lines or not lines[0].startswith("input="):
            raise ValueError("missing input shape")
        input_shape = tuple(int(s) for s in lines[0][len("input=") :].split(","))
        net = network_from_specs(lines[1:], input_shape)
    except (DNDFError, ValueError, KeyError) as exc:
        raise InvariantError(f"invalid extractor section: {exc}") from exc
    for prefix, table in (("param:", net.named_params()), ("buffer:", net.named_buffers())):
        for pname in table:
            value = get(prefix + pname)
            if value.shape != table[pname].shape or not np.all(np.isfinite(value)):
                raise InvariantError(f"{prefix}{pname}: bad shape {value.shape} or non-finite values")
            net.set_param(pname, value)
    known = {"config", "vocabulary", "extractor", "input_mean", "input_std", "pi", "assignment"}
    known |= {"param:" + p for p in net.named_params()} | {"buffer:" + b for b in net.named_buffers()}
    extra = set(sections) - known
    if extra:
        raise LoadError(f"unknown sections {sorted(extra)}")

    mean, std = get("input_mean"), get("input_std")
    pi = get("pi")
    assignment = get("assignment")
    topology = TreeTopology(config.tree_depth)
    if pi.shape != (config.tree_count, topology.leaf_count, len(vocabulary)):
        raise InvariantError(f"leaf table shape {pi.shape} disagrees with config and vocabulary")
    if not np.all(np.isfinite(pi)) or pi.min() < 0 or np.abs(pi.sum(axis=-1) - 1.0).max() > 1e-9:
        raise InvariantError("leaf distributions are not row-stochastic")
    if assignment.shape != (config.tree_count, topology.node_count):
        raise InvariantError(f"node assignment shape {assignment.shape} disagrees with config")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= net.width):
        raise InvariantError("node assignment refers outside the embedding")
    feat_dim = input_shape[-1]
    if mean.shape != (feat_dim,) or std.shape != (feat_dim,):
        raise InvariantError("input normalization does not match the input shape")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std)) and np.all(std > 0)):
        raise InvariantError("input normalization must be finite with positive scale")
    forest = Forest(topology, pi, assignment, config.loss_mode)
    return DNDFModel(net, forest, vocabulary, mean, std), config


def load(path):
    """Load ``(model, config)`` from an archive file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return from_bytes(data)
