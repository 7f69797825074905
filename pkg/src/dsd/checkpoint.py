"""Binary checkpoint container (little-endian).

Layout::

    b"DSDC"  u32 version  u32 layer_count
    per layer:
        u16 name_len, name (UTF-8)
        u8 kind (0 fully_connected, 1 dropout)
        u8 rank, rank x u32 dims
        weights  f64 x prod(dims), row-major
        biases   f64 x dims[-1]
        u8 mask_present, then ceil(prod(dims)/8) bytes of mask bits
           (row-major, most significant bit first) when present
    u8 resume_present
    resume block when present:
        u32 phase_index  u32 epochs_done_in_phase  u32 next_epoch
        f64 best_val_loss  u32 bad_epochs
        per parameter (W then b for each fully connected layer):
            u8 velocity_present, f64 x size when present

Dropout layers carry rank 0 and no values.  The resume block is what makes
a mid-phase restart reproduce an uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import DROPOUT, FULLY_CONNECTED, Network
from .pruning import PruneMask

MAGIC = b"DSDC"
VERSION = 1
_KIND_CODES = {FULLY_CONNECTED: 0, DROPOUT: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class ResumeState:
    phase_index: int
    epochs_done: int
    next_epoch: int
    best_val_loss: float
    bad_epochs: int
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class LayerRecord:
    name: str
    kind: str
    shape: tuple[int, ...]
    weights: np.ndarray | None
    biases: np.ndarray | None
    mask: np.ndarray | None


@dataclass
class Checkpoint:
    layers: list[LayerRecord]
    resume: ResumeState | None = None

    def layer(self, name: str) -> LayerRecord:
        for rec in self.layers:
            if rec.name == name:
                return rec
        raise KeyError(name)


def _f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(network: Network, path, resume: ResumeState | None = None) -> None:
    """Write ``network`` (and optionally mid-phase resume state) to ``path``.

    Written to a temporary sibling first, then renamed into place.
    """
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(network.layers))
    for layer in network.layers:
        name = layer.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", _KIND_CODES[layer.kind])
        if layer.kind == DROPOUT:
            out += struct.pack("<B", 0)
            out += struct.pack("<B", 0)
            continue
        w = network.weights[layer.name].data
        b = network.biases[layer.name].data
        out += struct.pack("<B", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape)
        out += _f64(w) + _f64(b)
        mask = network.masks.get(layer.name)
        if mask is None:
            out += struct.pack("<B", 0)
        else:
            out += struct.pack("<B", 1) + np.packbits(mask.bits.reshape(-1)).tobytes()

    if resume is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack(
            "<IIIdI",
            resume.phase_index,
            resume.epochs_done,
            resume.next_epoch,
            resume.best_val_loss,
            resume.bad_epochs,
        )
        for key, t in network.parameters():
            v = resume.velocity.get(key)
            if v is None:
                out += struct.pack("<B", 0)
            else:
                if v.shape != t.shape:
                    raise CheckpointError(f"velocity for {key} has shape {v.shape}, expected {t.shape}")
                out += struct.pack("<B", 1) + _f64(v)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file without reference to any architecture."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a DSD checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    layers = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "layer name length")
        try:
            name = r.take(name_len, "layer name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: layer name is not UTF-8") from e
        (code,) = r.unpack("<B", f"kind of {name}")
        if code not in _KIND_NAMES:
            raise CheckpointError(f"{path}: unknown layer kind code {code} for {name}")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        if _KIND_NAMES[code] == DROPOUT:
            if rank:
                raise CheckpointError(f"{path}: dropout layer {name} has rank {rank}")
            r.unpack("<B", f"mask flag of {name}")
            layers.append(LayerRecord(name, DROPOUT, (), None, None, None))
            continue
        n = math.prod(shape)
        w = r.f64(n, f"weights of {name}").reshape(shape)
        b = r.f64(shape[-1], f"biases of {name}")
        (has_mask,) = r.unpack("<B", f"mask flag of {name}")
        mask = None
        if has_mask:
            packed = np.frombuffer(r.take((n + 7) // 8, f"mask of {name}"), dtype=np.uint8)
            mask = np.unpackbits(packed, count=n).astype(bool).reshape(shape)
        layers.append(LayerRecord(name, FULLY_CONNECTED, tuple(shape), w, b, mask))

    (has_resume,) = r.unpack("<B", "resume flag")
    resume = None
    if has_resume:
        phase_index, done, next_epoch, best, bad = r.unpack("<IIIdI", "resume header")
        velocity = {}
        for rec in layers:
            if rec.kind != FULLY_CONNECTED:
                continue
            for key, shape in ((f"{rec.name}.W", rec.shape), (f"{rec.name}.b", (rec.shape[-1],))):
                (present,) = r.unpack("<B", f"velocity flag of {key}")
                if present:
                    velocity[key] = r.f64(math.prod(shape), f"velocity of {key}").reshape(shape)
        resume = ResumeState(phase_index, done, next_epoch, best, bad, velocity)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(layers, resume)


def restore(network: Network, ckpt: Checkpoint) -> Network:
    """Copy checkpoint values into ``network``, checking names and shapes."""
    if len(ckpt.layers) != len(network.layers):
        raise CheckpointError(
            f"checkpoint has {len(ckpt.layers)} layers, network has {len(network.layers)}"
        )
    masks = {}
    for layer, rec in zip(network.layers, ckpt.layers):
        if (layer.name, layer.kind) != (rec.name, rec.kind):
            raise CheckpointError(
                f"layer mismatch: checkpoint has {rec.kind} {rec.name!r}, "
                f"network expects {layer.kind} {layer.name!r}"
            )
        if layer.kind != FULLY_CONNECTED:
            continue
        expected = network.weights[layer.name].shape
        if rec.shape != expected:
            raise CheckpointError(
                f"shape mismatch for {layer.name!r}: checkpoint {rec.shape}, network {expected}"
            )
        network.weights[layer.name].data = rec.weights.copy()
        network.biases[layer.name].data = rec.biases.copy()
        if rec.mask is not None:
            masks[layer.name] = PruneMask(rec.mask.copy(), int(rec.mask.sum()), layer.name)
    network.masks = masks
    return network


def load_checkpoint(path, network: Network) -> Network:
    """Load ``path`` into ``network`` (which supplies the architecture)."""
    return restore(network, read_checkpoint(path))
