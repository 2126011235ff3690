"""MLP parameters, the Adam optimizer, and bit-exact parameter checkpoints.

Networks here are deliberately small: fully connected layers with relu,
tanh, or identity activations, float64 throughout so gradient checks stay
sharp.  Parameters are replaced wholesale by optimizer steps; forward and
backward never mutate them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import DimensionError, Tensor, add, matmul, relu, tanh

ACTIVATIONS = ("relu", "tanh", "identity")


class TrainingError(RuntimeError):
    """Raised on non-finite gradients or unusable training inputs."""


@dataclass
class Mlp:
    """A stack of affine layers with a fixed hidden activation.

    ``weights[i]`` has shape (out, in); consecutive layers must chain.  The
    final layer is always identity so heads can emit raw logits or values.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i in range(len(self.weights) - 1):
            if self.weights[i].data.shape[0] != self.weights[i + 1].data.shape[1]:
                raise DimensionError(
                    f"layer {i} out-dim {self.weights[i].data.shape[0]} != "
                    f"layer {i + 1} in-dim {self.weights[i + 1].data.shape[1]}"
                )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.data.shape[0] != b.data.shape[0]:
                raise DimensionError(f"layer {i}: bias shape {b.data.shape} != out-dim {w.data.shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].data.shape[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: Tensor) -> Tensor:
        """Apply all layers; hidden activations between layers, identity last."""
        if x.data.ndim != 2:
            raise DimensionError(f"forward expects 2-D input, got shape {x.data.shape}")
        if x.data.shape[1] != self.in_dim:
            raise DimensionError(
                f"layer 0 expects in-dim {self.in_dim}, got input shape {x.data.shape}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, transpose_of(w)), b)
            if i < last:
                h = relu(h) if self.activation == "relu" else tanh(h) if self.activation == "tanh" else h
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def transpose_of(w: Tensor) -> Tensor:
    """Matmul against W^T without materializing a separate parameter."""
    from .autograd import _make  # local import to keep the public surface tidy

    def backward(g):
        if w._tracked:
            w._accumulate(g.T)

    return _make(w.data.T, (w,), backward, "transpose")


def init_mlp(dims: list[int], activation: str = "relu", rng: np.random.Generator | None = None) -> Mlp:
    """He/Xavier-initialized MLP with zero biases, seeded by ``rng``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(1.0 / fan_in)
        w = rng.normal(0.0, std, size=(fan_out, fan_in))
        weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{i}"))
    return Mlp(weights, biases, activation)


class Adam:
    """Standard Adam with bias correction over a flat list of parameters."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """One update; validates gradient finiteness before touching any state."""
        grads = []
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                name = p.name or f"param{i}"
                raise TrainingError(f"non-finite gradient in {name}")
            grads.append(g)
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container, bit-exact round trips.
# Layout: magic | u32 header length | JSON header | float64 payload | sha256.

_MAGIC = b"SCPD"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named float64 arrays plus a JSON metadata blob."""
    names = sorted(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype=np.float64).tobytes() for n in names)
    digest = hashlib.sha256(hbytes + payload).digest()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(digest)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    hbytes = blob[8 : 8 + hlen]
    digest = blob[-32:]
    payload = blob[8 + hlen : -32]
    if hashlib.sha256(hbytes + payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(hbytes)
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header['version']}")
    arrays = {}
    off = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(payload, dtype=np.float64, count=n, offset=off).reshape(shape).copy()
        off += n * 8
    return arrays, header["meta"]


def mlp_to_arrays(mlp: Mlp, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.w{i}"] = w.data
        out[f"{prefix}.b{i}"] = b.data
    return out


def mlp_from_arrays(arrays: dict[str, np.ndarray], prefix: str, activation: str) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in arrays:
        weights.append(Tensor(arrays[f"{prefix}.w{i}"], requires_grad=True, name=f"{prefix}.w{i}"))
        biases.append(Tensor(arrays[f"{prefix}.b{i}"], requires_grad=True, name=f"{prefix}.b{i}"))
        i += 1
    if not weights:
        raise CheckpointError(f"no arrays found under prefix {prefix!r}")
    return Mlp(weights, biases, activation)


def sinusoidal_embedding(k: int, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal position features for a diffusion timestep index."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    ang = k * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
