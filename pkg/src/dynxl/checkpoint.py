"""Single-file checkpoint container.

Layout (little-endian throughout)::

    b"DTXL1"  u16 format version
    repeated: 4-byte tag, u64 payload length, payload

Sections, always in this order: ``CONF`` (model config as ``key = value``
text), ``VOCB`` (vocab fingerprint), ``PROV`` (seed and step), ``PARM``
(parameters), then ``STAT`` (gradient statistics) if present. Tensors are
stored as name, shape and float64 data in the model's parameter order, so
identical checkpoints always serialize to identical bytes.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import build_dataclass, dataclass_to_lines, parse_lines
from .dyneval import GradStats
from .errors import FingerprintError, FormatError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"DTXL1"
VERSION = 1
_SECTION = struct.Struct("<4sQ")


@dataclass
class Checkpoint:
    params: ModelParams
    vocab_fingerprint: str
    stats: GradStats | None = None
    seed: int = 0
    step: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC + struct.pack("<H", VERSION))
        conf = "\n".join(dataclass_to_lines(self.config)) + "\n"
        _section(out, b"CONF", conf.encode())
        _section(out, b"VOCB", self.vocab_fingerprint.encode("ascii"))
        _section(out, b"PROV", f"seed = {self.seed}\nstep = {self.step}\n".encode())
        _section(out, b"PARM", _tensors(self.params.tensors))
        if self.stats is not None:
            body = struct.pack("<Q", self.stats.segments) + _tensors(self.stats.rms)
            _section(out, b"STAT", body)
        return out.getvalue()

    def save(self, path) -> None:
        """Write atomically, so an interrupted save never clobbers a good file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def check_vocab(self, fingerprint: str) -> None:
        if fingerprint != self.vocab_fingerprint:
            raise FingerprintError(
                f"vocabulary fingerprint {fingerprint} does not match checkpoint {self.vocab_fingerprint}")


def _section(out, tag: bytes, payload: bytes) -> None:
    out.write(_SECTION.pack(tag, len(payload)))
    out.write(payload)


def _tensors(tensors) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def _read_tensors(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated tensor section")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError("trailing bytes in tensor section")
    return out


def from_bytes(data: bytes) -> Checkpoint:
    head = len(MAGIC) + 2
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", data[len(MAGIC) : head])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    pos = head
    while pos < len(data):
        if pos + _SECTION.size > len(data):
            raise FormatError("truncated section header")
        tag, length = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        if pos + length > len(data):
            raise FormatError(f"truncated {tag!r} section")
        sections[tag] = data[pos : pos + length]
        pos += length
    for tag in (b"CONF", b"VOCB", b"PROV", b"PARM"):
        if tag not in sections:
            raise FormatError(f"missing {tag.decode()} section")

    config = build_dataclass(ModelConfig, parse_lines(sections[b"CONF"].decode()), "model.")
    tensors = _read_tensors(sections[b"PARM"])
    expected = param_shapes(config)
    if list(tensors) != list(expected) or any(tensors[k].shape != s for k, s in expected.items()):
        raise FormatError("parameter tensors do not match the stored model config")
    prov = parse_lines(sections[b"PROV"].decode())
    stats = None
    if b"STAT" in sections:
        body = sections[b"STAT"]
        (segments,) = struct.unpack("<Q", body[:8])
        rms = _read_tensors(body[8:])
        if list(rms) != list(expected):
            raise FormatError("statistics do not cover the model parameters")
        stats = GradStats(rms, segments)
    return Checkpoint(ModelParams(config, tensors), sections[b"VOCB"].decode("ascii"), stats,
                      int(prov.get("seed", 0)), int(prov.get("step", 0)))


def load(path, vocab_fingerprint: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    ckpt = from_bytes(data)
    if vocab_fingerprint is not None:
        ckpt.check_vocab(vocab_fingerprint)
    return ckpt
