"""Parameters, SGD with momentum + weight decay, and checkpoint IO."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FRPN"
CHECKPOINT_VERSION = 1


@dataclass
class SgdConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


class Param:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.ascontiguousarray(value, dtype=np.float32),
                            requires_grad=True)
        self.velocity = np.zeros_like(self.value.data)


class GradientError(RuntimeError):
    pass


def sgd_step(params: list[Param], cfg: SgdConfig):
    """v <- m*v + g + wd*value; value <- value - lr*v; grads zeroed."""
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter '{p.name}'")
        p.velocity *= cfg.momentum
        p.velocity += g + cfg.weight_decay * p.value.data
        p.value.data -= cfg.lr * p.velocity
        p.value.grad = None


def gaussian_init(shape, stddev: float, rng: Rng) -> np.ndarray:
    n = int(np.prod(shape))
    return (stddev * rng.normal(n)).astype(np.float32).reshape(shape)


def save_checkpoint(params: list[Param], path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            data = np.ascontiguousarray(p.value.data, dtype="<f4")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.astype(np.float32)
        return out


def restore_params(params: list[Param], state: dict[str, np.ndarray]):
    for p in params:
        if p.name not in state:
            raise KeyError(f"checkpoint missing parameter '{p.name}'")
        if state[p.name].shape != p.value.data.shape:
            raise ValueError(f"shape mismatch for '{p.name}'")
        p.value.data[...] = state[p.name]
        p.velocity[...] = 0
