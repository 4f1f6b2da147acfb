"""Model handles, the architecture pool, loss/prediction helpers and PHYG model files."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .architecture import ArchitectureSpec, Conv, Dense, MaxPool, SoftmaxHead
from .autodiff import Tensor, forward, log_softmax, unpack_params

PROVENANCE = ("clean", "infected", "patched")

MAGIC = b"PHYG"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class ModelHandle:
    spec: ArchitectureSpec
    params: np.ndarray  # flat float32, read-only
    name: str = ""
    seed: int = 0
    provenance: str = "clean"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float32, copy=True)
        if params.ndim != 1 or params.size != self.spec.param_count:
            raise ValueError(
                f"{self.spec.param_count} parameters expected, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("model parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance tag {self.provenance!r}")

    @cached_property
    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        ws = unpack_params(self.spec, self.params)
        for w, b in ws:
            w.setflags(write=False)
            b.setflags(write=False)
        return ws

    def with_params(self, params: np.ndarray, **changes) -> "ModelHandle":
        return replace(self, params=params, **changes)

    def same_parameters(self, other: "ModelHandle") -> bool:
        return (self.spec.to_text() == other.spec.to_text()
                and np.array_equal(self.params, other.params))


def build_model(spec: ArchitectureSpec, init_seed: int, name: str = "") -> ModelHandle:
    """Fresh model with He-uniform weights (limit sqrt(6/fan_in)) and zero biases."""
    rng = np.random.default_rng(init_seed)
    chunks = []
    for wshape, bshape in spec.param_shapes():
        fan_in = int(np.prod(wshape[:-1]))
        limit = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-limit, limit, size=int(np.prod(wshape))))
        chunks.append(np.zeros(bshape[0]))
    params = np.concatenate(chunks).astype(np.float32)
    return ModelHandle(spec, params, name=name or spec.name, seed=init_seed)


def cross_entropy(logits: Tensor, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("cross_entropy takes a single logit vector")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(max(-log_softmax(logits)[label], 0.0))


def softmax(logits: Tensor) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict(model: ModelHandle, input: Tensor) -> tuple[int, float]:
    """(label, confidence); ties go to the lowest class index."""
    probs = softmax(forward(model, input))
    if probs.ndim != 1:
        raise ValueError("predict takes a single image; use predict_batch")
    label = int(np.argmax(probs))
    return label, float(probs[label])


def predict_batch(model: ModelHandle, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    images = np.asarray(images)
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        out[start:start + batch_size] = forward(model, images[start:start + batch_size]).argmax(axis=1)
    return out


# -- architecture pool ----------------------------------------------------------------
# Scaled-down counterparts of the six appendix models; all accept 16x16x1 by
# default and differ in kernel size, width and dense depth.

def _pool_layers(name: str, classes: int) -> tuple:
    table = {
        "model_i": (Conv(3, 3, 8), Conv(3, 3, 8), MaxPool(2, 2), Dense(64), Dense(64)),
        "model_ii": (Conv(3, 3, 8), MaxPool(2, 2), Conv(3, 3, 16), MaxPool(2, 2), Dense(48), Dense(48)),
        "model_iii": (Conv(5, 5, 6), MaxPool(2, 2), Conv(3, 3, 12), Dense(96)),
        "model_iv": (Conv(3, 3, 12), MaxPool(2, 2), Conv(3, 3, 24), MaxPool(2, 2), Dense(96), Dense(48)),
        "model_v": (Conv(3, 3, 6), MaxPool(2, 2), Dense(96), Dense(48), Dense(48)),
        "model_vi": (Conv(5, 5, 10), MaxPool(2, 2), Dense(128)),
        "small_cnn": (Conv(3, 3, 6), MaxPool(2, 2), Dense(48)),
        "mlp": (Dense(64),),
    }
    if name not in table:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(table)}")
    return table[name] + (SoftmaxHead(classes),)


ARCHITECTURES = ("model_i", "model_ii", "model_iii", "model_iv", "model_v", "model_vi",
                 "small_cnn", "mlp")


def architecture(name: str, input_shape=(16, 16, 1), classes: int = 10) -> ArchitectureSpec:
    return ArchitectureSpec(tuple(input_shape), _pool_layers(name, classes), name=name)


# -- PHYG files ----------------------------------------------------------------------
# magic "PHYG" | u16 version | u32 length + UTF-8 descriptor | u64 count |
# float32 LE params | u32 CRC32 of everything before it.  Little-endian throughout.

def _descriptor(model: ModelHandle) -> str:
    meta = [f"model_name={model.name}", f"seed={model.seed}", f"provenance={model.provenance}"]
    return model.spec.to_text() + "\n" + ";".join(meta)


def model_bytes(model: ModelHandle) -> bytes:
    desc = _descriptor(model).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<H", FORMAT_VERSION)
    body += struct.pack("<I", len(desc)) + desc
    body += struct.pack("<Q", model.params.size)
    body += model.params.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_model(model: ModelHandle, path) -> Path:
    path = Path(path)
    path.write_bytes(model_bytes(model))
    return path


def parse_model_bytes(raw: bytes) -> ModelHandle:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("not a PHYG model file")
    if len(raw) < 10:
        raise TruncatedFileError("file ends inside the header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    (dlen,) = struct.unpack_from("<I", raw, 6)
    pos = 10 + dlen
    if len(raw) < pos + 8:
        raise TruncatedFileError("file ends inside the descriptor")
    desc = raw[10:pos].decode("utf-8")
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    end = pos + 4 * count
    if len(raw) < end + 4:
        raise TruncatedFileError(f"expected {count} parameters")
    if len(raw) > end + 4:
        raise ModelFormatError("trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", raw, end)
    if zlib.crc32(raw[:end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    params = np.frombuffer(raw[pos:end], dtype="<f4").astype(np.float32)
    spec_text, _, meta_text = desc.partition("\n")
    meta = dict(item.split("=", 1) for item in meta_text.split(";") if "=" in item)
    spec = ArchitectureSpec.from_text(spec_text)
    if count != spec.param_count:
        raise ModelFormatError(f"descriptor needs {spec.param_count} parameters, file has {count}")
    return ModelHandle(spec, params, name=meta.get("model_name", ""),
                       seed=int(meta.get("seed", 0)), provenance=meta.get("provenance", "clean"))


def load_model(path) -> ModelHandle:
    return parse_model_bytes(Path(path).read_bytes())
