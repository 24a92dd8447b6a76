"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RDPM"                  magic
    uint32                   format version
    uint32                   header length H
    H bytes                  UTF-8 JSON header (sorted keys, compact separators):
                               kind, netspec, schedule, metadata
    uint64                   weight blob length N (bytes)
    N bytes                  float64 LE weights

Weights follow ``NetSpec.param_shapes()`` order: for each conv layer i,
``conv{i}.weight`` (out, in, 3, 3) then ``conv{i}.bias`` (out,); then
``time.weight`` (embed_dim, channels[1]) and ``time.bias`` when the net is
time-conditioned. Every array is C-order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numcore import Net, NetSpec
from ..schedule import make_schedule
from .imageio import atomic_write_bytes

MAGIC = b"RDPM"
VERSION = 1
KINDS = ("ddpm", "theta", "baseline")


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    code = "version-mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class KindMismatchError(CheckpointError):
    code = "kind-mismatch"


@dataclass
class Checkpoint:
    kind: str
    net: Net
    schedule: dict | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"checkpoint kind must be one of {KINDS}, got {self.kind!r}")

    def make_schedule(self):
        if self.schedule is None:
            raise CheckpointError(f"{self.kind} checkpoint carries no schedule")
        return make_schedule(self.schedule["T"], self.schedule["beta_start"], self.schedule["beta_end"])


def _header(ckpt):
    spec = ckpt.net.spec
    return {
        "kind": ckpt.kind,
        "netspec": {"channels": list(spec.channels), "time_embed_dim": spec.time_embed_dim,
                    "residual": spec.residual},
        "schedule": ckpt.schedule,
        "metadata": ckpt.metadata,
    }


def encode_checkpoint(ckpt):
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    blob = ckpt.net.flat().astype("<f8").tobytes()
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<Q", len(blob)), blob])


def decode_checkpoint(data, expect_kind=None):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(data) < 12:
        raise TruncatedError("file ends inside the fixed header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    pos = 12
    if len(data) < pos + hlen + 8:
        raise TruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    pos += hlen
    (blen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    blob = data[pos:]
    if len(blob) < blen:
        raise TruncatedError(f"weight blob has {len(blob)} of {blen} bytes")
    if len(blob) > blen:
        raise CheckpointError(f"{len(blob) - blen} trailing bytes after the weight blob")
    ns = header["netspec"]
    spec = NetSpec(tuple(ns["channels"]), ns["time_embed_dim"], ns["residual"])
    if blen != spec.n_params() * 8:
        raise CheckpointError(f"blob holds {blen // 8} values, net spec needs {spec.n_params()}")
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise KindMismatchError(f"expected a {expect_kind} checkpoint, found {kind}")
    net = Net.from_flat(spec, np.frombuffer(blob, dtype="<f8"))
    return Checkpoint(kind, net, header["schedule"], header["metadata"])


def save_checkpoint(path, ckpt):
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expect_kind=None):
    return decode_checkpoint(Path(path).read_bytes(), expect_kind)
