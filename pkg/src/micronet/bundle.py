"""Portable weight bundles.

Layout (all integers little-endian)::

    magic   4 bytes   b"MNWB"
    version u32
    hlen    u32       length of the JSON header in bytes
    header  hlen      UTF-8 JSON: version, arch text, full_rank flag, tensor
                      manifest [{name, shape, offset}], payload_bytes, meta
    payload           float32 little-endian tensors back to back

Offsets are byte offsets into the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .arch import MicroNet, build_arch, parse_arch

MAGIC = b"MNWB"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class FormatError(ValueError):
    """The bytes do not form a valid bundle."""


@dataclass
class WeightBundle:
    arch_text: str
    tensors: Dict[str, np.ndarray]
    full_rank: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MicroNet, meta: dict = None) -> "WeightBundle":
        return cls(model.arch.to_text(), dict(model.state_dict()), model.full_rank, meta or {})

    def to_bytes(self) -> bytes:
        manifest, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append(dict(name=name, shape=list(arr.shape), offset=offset))
            chunks.append(buf)
            offset += len(buf)
        header = json.dumps(dict(version=VERSION, arch=self.arch_text, full_rank=self.full_rank,
                                 tensors=manifest, payload_bytes=offset, meta=self.meta),
                            sort_keys=True).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)

    def save(self, path) -> None:
        """Write atomically so a failed write leaves no partial file."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".bundle-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightBundle":
        if len(data) < _PREFIX.size:
            raise FormatError("file too short for a bundle header")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported bundle version {version}")
        start = _PREFIX.size + hlen
        if len(data) < start:
            raise FormatError("truncated header")
        try:
            header = json.loads(data[_PREFIX.size:start].decode())
            manifest = header["tensors"]
            payload_bytes = int(header["payload_bytes"])
            arch_text = header["arch"]
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt header: {exc}") from None
        payload = data[start:]
        if len(payload) != payload_bytes:
            raise FormatError(f"payload has {len(payload)} bytes, header declares {payload_bytes}")
        tensors, expect = {}, 0
        for entry in manifest:
            try:
                name, shape, off = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"corrupt manifest entry: {exc}") from None
            n = int(np.prod(shape, dtype=np.int64)) * 4
            if off != expect:
                raise FormatError(f"tensor {name!r} at offset {off}, expected {expect}")
            expect = off + n
            if expect > len(payload):
                raise FormatError(f"tensor {name!r} runs past the payload")
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=n // 4,
                                          offset=off).reshape(shape).astype(np.float32)
        if expect != len(payload):
            raise FormatError("payload length does not match the tensor manifest")
        return cls(arch_text, tensors, bool(header.get("full_rank", False)), header.get("meta", {}))

    @classmethod
    def load(cls, path) -> "WeightBundle":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from None
        return cls.from_bytes(data)

    def to_model(self) -> MicroNet:
        spec = parse_arch(self.arch_text)
        net = build_arch(spec, full_rank=self.full_rank)
        try:
            net.load_state_dict(self.tensors)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bundle does not match its architecture: {exc}") from None
        return net.eval()
