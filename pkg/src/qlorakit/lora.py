"""Low-rank adapters: init, delta, merge, the quantized-base linear layer,
trainable-parameter accounting, and the adapter checkpoint format.

Conventions, fixed across the package:
  - an adapter for a d_in x d_out base matrix holds b_factor (d_in x r,
    applied to the input first) and a_factor (r x d_out, applied second)
  - the weight update is delta = (alpha / r) * b_factor @ a_factor;
    some write-ups print the factor letters in the opposite order, but
    the declared shapes only compose this way
  - b_factor is drawn from Gaussian(0, 0.02^2); a_factor starts at zero,
    so the adapted function equals the base function at initialization

Checkpoint layout (little-endian):
  magic b"LAD1" | u32 version | u32 n_adapters | u32 meta_len |
  meta JSON utf-8 | then per adapter, sorted by name:
    u32 name_len | name utf-8 | u32 d_in | u32 d_out | u32 rank |
    f64 alpha | f64 b_factor (d_in*r row-major) | f64 a_factor (r*d_out)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .matrix import Matrix, as_matrix
from .quant import Q4BlockMatrix, dequantize_4bit

LORA_MAGIC = b"LAD1"
LORA_VERSION = 1
INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """Trainable factor pair for one frozen base matrix."""

    b_factor: np.ndarray
    a_factor: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self):
        self.b_factor = as_matrix(self.b_factor, "b_factor")
        self.a_factor = as_matrix(self.a_factor, "a_factor")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not np.isfinite(self.alpha):
            raise ConfigError(f"alpha must be finite, got {self.alpha}")
        d_in, r_b = self.b_factor.shape
        r_a, d_out = self.a_factor.shape
        if r_b != self.rank or r_a != self.rank:
            raise ShapeError(
                f"factor shapes {self.b_factor.shape} and {self.a_factor.shape} "
                f"do not carry rank {self.rank}"
            )
        if self.rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {self.rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}"
            )

    @property
    def d_in(self) -> int:
        return self.b_factor.shape[0]

    @property
    def d_out(self) -> int:
        return self.a_factor.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def lora_init(d_in: int, d_out: int, r: int, alpha: float, seed: int) -> LoraAdapter:
    """Seeded adapter init; the delta is exactly zero until training moves a_factor."""
    if r < 1 or r > min(d_in, d_out):
        raise ConfigError(
            f"rank {r} must satisfy 1 <= r <= min({d_in}, {d_out})"
        )
    rng = np.random.default_rng(seed)
    b = rng.normal(0.0, INIT_STD, size=(d_in, r))
    a = np.zeros((r, d_out), dtype=np.float64)
    return LoraAdapter(b_factor=b, a_factor=a, rank=r, alpha=alpha)


def lora_delta(adapter: LoraAdapter) -> Matrix:
    return adapter.scaling * (adapter.b_factor @ adapter.a_factor)


def merge(w: Matrix, adapter: LoraAdapter) -> Matrix:
    """W' = W + delta; W itself is left untouched."""
    w = as_matrix(w, "base weight")
    if w.shape != (adapter.d_in, adapter.d_out):
        raise ShapeError(
            f"base {w.shape[0]}x{w.shape[1]} does not match adapter "
            f"{adapter.d_in}x{adapter.d_out}"
        )
    return w + lora_delta(adapter)


@dataclass(frozen=True)
class QLoraLinear:
    """Frozen 4-bit base plus a full-precision trainable adapter."""

    base: Q4BlockMatrix
    adapter: LoraAdapter

    def __post_init__(self):
        if (self.base.rows, self.base.cols) != (self.adapter.d_in, self.adapter.d_out):
            raise ShapeError(
                f"quantized base {self.base.rows}x{self.base.cols} does not match "
                f"adapter {self.adapter.d_in}x{self.adapter.d_out}"
            )


def qlora_forward(x: Matrix, layer: QLoraLinear) -> Matrix:
    """y = x @ dequant(base) + scaling * (x @ B) @ A.

    The low-rank branch stays factor-wise; the d_in x d_out delta is
    never materialized.
    """
    x = as_matrix(x, "input")
    if x.shape[1] != layer.adapter.d_in:
        raise ShapeError(
            f"input {x.shape[0]}x{x.shape[1]} does not feed a "
            f"{layer.adapter.d_in}x{layer.adapter.d_out} layer"
        )
    y = x @ dequantize_4bit(layer.base)
    ad = layer.adapter
    return y + ad.scaling * ((x @ ad.b_factor) @ ad.a_factor)


@dataclass(frozen=True)
class TrainableParamCount:
    trainable: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0


def count_trainable_params(spec, r: int) -> TrainableParamCount:
    """Adapter parameter count: sum over adapted matrices of r*(d_in + d_out).

    `spec` is a ToyModelSpec (duck-typed here to keep this module free of
    model-graph imports).
    """
    if not spec.adapter_targets:
        raise ConfigError("adapter_targets must be non-empty")
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    trainable = 0
    for _layer in range(spec.n_layers):
        for role in spec.adapter_targets:
            d_in, d_out = spec.role_shape(role)
            trainable += r * (d_in + d_out)
    return TrainableParamCount(trainable=trainable, total=spec.total_params())


# ---- checkpoint io ----

def save_adapters(path, adapters: Mapping[str, LoraAdapter], meta: dict | None = None) -> None:
    if not adapters:
        raise InputError("no adapters to save")
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [
        LORA_MAGIC,
        struct.pack("<III", LORA_VERSION, len(adapters), len(meta_blob)),
        meta_blob,
    ]
    for name in sorted(adapters):
        ad = adapters[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<IIId", ad.d_in, ad.d_out, ad.rank, ad.alpha))
        parts.append(np.ascontiguousarray(ad.b_factor, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ad.a_factor, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_adapters(path) -> tuple[dict[str, LoraAdapter], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16 or buf[:4] != LORA_MAGIC:
        raise InputError(f"{path}: not an adapter checkpoint")
    version, count, meta_len = struct.unpack("<III", buf[4:16])
    if version != LORA_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    adapters: dict[str, LoraAdapter] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        d_in, d_out, rank, alpha = struct.unpack_from("<IIId", buf, off)
        off += struct.calcsize("<IIId")
        nb = d_in * rank
        na = rank * d_out
        b = np.frombuffer(buf, dtype="<f8", count=nb, offset=off).reshape(d_in, rank)
        off += 8 * nb
        a = np.frombuffer(buf, dtype="<f8", count=na, offset=off).reshape(rank, d_out)
        off += 8 * na
        adapters[name] = LoraAdapter(b_factor=b.copy(), a_factor=a.copy(),
                                     rank=rank, alpha=alpha)
    if off != len(buf):
        raise InputError(f"{path}: {len(buf) - off} trailing bytes")
    return adapters, meta
