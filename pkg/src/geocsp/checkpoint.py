"""Deterministic binary checkpoints for encoders, projection heads and classifiers.

Layout::

    GEOCSP-CKPT v1\\n
    {"arrays": [[name, [shape...]], ...], "meta": {...}}\\n
    <float64 little-endian bytes of every array, in the listed order>

The metadata line is JSON with sorted keys and no whitespace, so equal
contents always produce identical bytes.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Linear
from .errors import (
    DimensionMismatchError,
    FileFormatError,
    MalformedHeaderError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .location import LocationEncoder

CHECKPOINT_VERSION = 1
_MAGIC = re.compile(rb"^GEOCSP-CKPT v(\d+)$")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    """Everything a pipeline stage may persist.

    ``projection`` is the image projection (contrastive objectives) or the
    feature regressor (MSE objective); ``class_embedding`` and ``classifier``
    appear after fine-tuning.
    """

    encoder: LocationEncoder | None = None
    projection: Linear | None = None
    class_embedding: np.ndarray | None = None
    classifier: Linear | None = None
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if self.encoder is not None:
            out.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        for name, layer in (("projection", self.projection), ("classifier", self.classifier)):
            if layer is not None:
                out[f"{name}.weight"] = layer.weight.data
                out[f"{name}.bias"] = layer.bias.data
        if self.class_embedding is not None:
            out["class_embedding"] = np.asarray(self.class_embedding)
        return out

    def sections(self) -> dict:
        doc = {"meta": self.meta}
        if self.encoder is not None:
            doc["encoder"] = self.encoder.config_dict()
        return doc


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.arrays()
    doc = ckpt.sections()
    doc["arrays"] = [[name, list(arr.shape)] for name, arr in arrays.items()]
    header = f"GEOCSP-CKPT v{CHECKPOINT_VERSION}\n".encode()
    meta = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in arrays.values())
    return header + meta + body


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def from_bytes(raw: bytes) -> Checkpoint:
    first, sep, rest = raw.partition(b"\n")
    match = _MAGIC.match(first)
    if not sep or match is None:
        raise MalformedHeaderError(f"not a checkpoint header: {first[:40]!r}")
    if int(match.group(1)) != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {match.group(1)} is not supported")
    meta_line, sep, body = rest.partition(b"\n")
    if not sep:
        raise TruncatedFileError("checkpoint ends inside the metadata line")
    try:
        doc = json.loads(meta_line)
        listing = [(str(name), tuple(int(s) for s in shape)) for name, shape in doc["arrays"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable checkpoint metadata: {exc}") from None

    arrays, offset = {}, 0
    for name, shape in listing:
        n_bytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + n_bytes > len(body):
            raise TruncatedFileError(f"checkpoint data ends inside array {name!r}")
        arrays[name] = np.frombuffer(body, dtype=_DTYPE, count=n_bytes // 8, offset=offset).reshape(shape).copy()
        offset += n_bytes
    if offset != len(body):
        raise DimensionMismatchError(f"{len(body) - offset} unexpected trailing bytes in checkpoint")

    ckpt = Checkpoint(meta=doc.get("meta", {}))
    if "encoder" in doc:
        enc = {k[len("encoder.") :]: v for k, v in arrays.items() if k.startswith("encoder.")}
        try:
            ckpt.encoder = LocationEncoder.from_state(doc["encoder"], enc)
        except KeyError as exc:
            raise FileFormatError(f"checkpoint is missing encoder entry {exc}") from None
    for name in ("projection", "classifier"):
        if f"{name}.weight" in arrays:
            setattr(ckpt, name, Linear(arrays[f"{name}.weight"], arrays[f"{name}.bias"]))
    ckpt.class_embedding = arrays.get("class_embedding")
    return ckpt


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
