"""Named parameter tensors, their binary checkpoint format, and MLP helpers.

Checkpoint layout (all integers little-endian)::

    bytes 0-3    magic b"UMPS"
    bytes 4-7    uint32 format version (1)
    bytes 8-15   uint64 manifest length L
    next L bytes UTF-8 JSON manifest:
                 {"tensors": [{"name": str, "shape": [int, ...]}, ...],
                  "meta": {...}}
    remainder    float64 little-endian values of every tensor, row-major,
                 concatenated in manifest order
"""
from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad

MAGIC = b"UMPS"
FORMAT_VERSION = 1
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


class ParamSet(Mapping):
    """Ordered mapping of parameter name to float64 array."""

    def __init__(self, tensors: Optional[Mapping[str, np.ndarray]] = None):
        self._tensors: Dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self._tensors[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, value):
        self._tensors[name] = np.array(value, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParamSet({shapes})"

    @property
    def flat_length(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._tensors.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.flat_length,):
            raise ValueError(f"expected flat vector of length {self.flat_length}, got {flat.shape}")
        out, pos = {}, 0
        for name, v in self._tensors.items():
            out[name] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamSet(out)

    def copy(self) -> "ParamSet":
        return ParamSet(self._tensors)

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._tensors.items()})

    def on_tape(self, tape: ad.Tape, prefix: str = "", trainable: bool = True) -> Dict[str, ad.Node]:
        """Place every tensor on ``tape``; trainable ones are named ``prefix + name``."""
        if trainable:
            return {k: tape.variable(v, name=prefix + k) for k, v in self._tensors.items()}
        return {k: tape.constant(v) for k, v in self._tensors.items()}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self._tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equals(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self)

    def save(self, path, meta: Optional[dict] = None) -> None:
        manifest = {
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self._tensors.items()],
            "meta": meta or {},
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(self.flatten().astype("<f8").tobytes())

    @classmethod
    def load(cls, path, with_meta: bool = False):
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic)")
        version, mlen = struct.unpack("<IQ", raw[4:16])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        data = np.frombuffer(raw[16 + mlen:], dtype="<f8").astype(np.float64)
        tensors, pos = {}, 0
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape, dtype=np.int64))
            tensors[entry["name"]] = data[pos:pos + size].reshape(shape)
            pos += size
        if pos != data.size:
            raise ValueError(f"{path}: manifest describes {pos} values, file holds {data.size}")
        params = cls(tensors)
        return (params, manifest.get("meta", {})) if with_meta else params


def init_mlp(arch: Sequence[int], rng: np.random.Generator, leading: tuple = (),
             final_scale: float = 1.0) -> ParamSet:
    """Glorot-uniform weights and zero biases for an affine stack.

    ``leading`` prepends batch axes (e.g. ``(B,)`` for an ensemble stored as
    one stacked tensor per layer); biases then get a singleton row axis so they
    broadcast against ``(B, n, width)`` activations.
    """
    params = {}
    n_layers = len(arch) - 1
    for l in range(n_layers):
        fan_in, fan_out = arch[l], arch[l + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        if l == n_layers - 1:
            lim *= final_scale
        params[f"W{l}"] = rng.uniform(-lim, lim, size=leading + (fan_in, fan_out))
        bshape = leading + (1, fan_out) if leading else (fan_out,)
        params[f"b{l}"] = np.zeros(bshape)
    return ParamSet(params)


def check_arch(params: Mapping, arch: Sequence[int]) -> None:
    n_layers = len(arch) - 1
    if len(params) != 2 * n_layers:
        raise ValueError(f"arch {list(arch)} needs {2 * n_layers} tensors, params hold {len(params)}")
    for l in range(n_layers):
        W = params.get(f"W{l}")
        b = params.get(f"b{l}")
        if W is None or b is None:
            raise ValueError(f"arch {list(arch)}: missing W{l}/b{l}")
        wshape = ad.value_of(W).shape
        if wshape[-2:] != (arch[l], arch[l + 1]):
            raise ValueError(
                f"layer {l}: weight shape {wshape} does not match arch {arch[l]}->{arch[l + 1]}")
        if ad.value_of(b).shape[-1] != arch[l + 1]:
            raise ValueError(f"layer {l}: bias shape {ad.value_of(b).shape} does not match width {arch[l + 1]}")


def mlp_forward(params: Mapping, x, arch: Sequence[int], activation: str = "tanh",
                squash: bool = False, check: bool = True):
    """Affine+activation stack with an affine output layer.

    ``params`` values may be arrays or tape nodes; with ``squash`` the output
    goes through ``tanh``.
    """
    if check:
        check_arch(params, arch)
        if ad.value_of(x).shape[-1] != arch[0]:
            raise ValueError(f"input width {ad.value_of(x).shape[-1]} != arch input {arch[0]}")
    act = ACTIVATIONS[activation]
    h = x
    n_layers = len(arch) - 1
    for l in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"W{l}"]), params[f"b{l}"])
        if l < n_layers - 1:
            h = act(h)
    if squash:
        h = ad.tanh(h)
    return h
