"""Dense ReLU networks with hand-written backprop, momentum SGD and checkpoints.

Everything runs in float64. A network is a stack of affine layers with ReLU
between them and an optional row-wise L2 normalisation on the output.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import make_rng
from .errors import (
    ArchitectureMismatchError,
    CheckpointError,
    DegenerateEmbeddingError,
    ShapeError,
)

NORM_EPS = 1e-12
OUTPUT_TRANSFORMS = ("linear", "l2_normalized")


@dataclass
class Mlp:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)
    output_transform: str = "linear"

    def __post_init__(self):
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output_transform {self.output_transform!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} emits {self.weights[k - 1].shape[0]}"
                )

    @property
    def dims(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def params(self):
        """Parameters in canonical order ``W0, b0, W1, b1, ...`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]  # affine outputs per layer
    post: list[np.ndarray]  # activations fed into each layer (post[0] = inputs)
    norms: np.ndarray | None  # row norms before L2 normalisation
    outputs: np.ndarray


def init_mlp(layer_dims, output_transform="linear", seed=0, stream=0):
    """He-initialised network (std ``sqrt(2 / fan_in)``, zero biases).

    ``stream`` separates heads that share a seed, e.g. the CT and EHR heads.
    """
    dims = [int(v) for v in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"layer_dims must hold >= 2 positive widths, got {layer_dims}")
    rng = make_rng(seed, "init", stream)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, output_transform)


def l2_normalize(v, eps=NORM_EPS):
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateEmbeddingError("cannot normalise a (near-)zero vector")
    return v / norms


def l2_normalize_backward(outputs, norms, grad):
    """Chain ``grad`` (w.r.t. unit rows ``outputs``) back to the unnormalised rows."""
    return (grad - outputs * np.sum(outputs * grad, axis=1, keepdims=True)) / norms


def forward(mlp, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != mlp.in_dim:
        raise ShapeError(f"input width {x.shape[1]} does not match network input {mlp.in_dim}")
    pre, post = [], [x]
    h = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if k < last else a
        if k < last:
            post.append(h)
    norms = None
    if mlp.output_transform == "l2_normalized":
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        if np.any(norms <= NORM_EPS):
            raise DegenerateEmbeddingError("network output has (near-)zero norm; cannot L2-normalise")
        h = h / norms
    return h, ForwardCache(x, pre, post, norms, h)


def backward(mlp, cache, output_grad):
    """Reverse-mode gradients for one forward pass.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    :meth:`Mlp.params`.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.outputs.shape:
        raise ShapeError(f"output_grad shape {g.shape} does not match outputs {cache.outputs.shape}")
    if len(cache.pre) != len(mlp.weights):
        raise ShapeError("cache was produced by a network with a different depth")
    if cache.norms is not None:
        g = l2_normalize_backward(cache.outputs, cache.norms, g)
    grads = [None] * (2 * len(mlp.weights))
    for k in range(len(mlp.weights) - 1, -1, -1):
        grads[2 * k] = g.T @ cache.post[k]
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ mlp.weights[k]
        if k > 0:
            g = g * (cache.pre[k - 1] > 0)
    return grads, g


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    momentum: float = 0.9
    current_lr: float = 0.1

    @classmethod
    def for_params(cls, params, momentum=0.9, lr=0.1):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        return cls([np.zeros_like(p) for p in params], momentum, lr)


def sgd_step(params, grads, state):
    """``v <- momentum * v + g``; ``p <- p - lr * v``, updating arrays in place."""
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError("params, grads and velocity buffers differ in count")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g
        p -= state.current_lr * v
    return params, state


def step_lr(epoch, base_lr, step_size, gamma=0.1):
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    return base_lr * gamma ** (epoch // step_size)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   b"PECK", u8 version, u32 epoch, f64 val_loss, u32 n_blocks
#   per block: u8 output_transform, u32 n_widths, u32 widths[n_widths]
#   then, per block and layer: weights (row-major f64), bias (f64)
# A classifier is stored as two blocks (projection head, output unit).

CHECKPOINT_MAGIC = b"PECK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    mlps: list[Mlp]
    epoch: int = 0
    val_loss: float = float("nan")

    @property
    def mlp(self):
        return self.mlps[0]


def save_checkpoint(mlps, path, epoch=0, val_loss=float("nan")):
    if isinstance(mlps, Mlp):
        mlps = [mlps]
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<BIdI", CHECKPOINT_VERSION, epoch, val_loss, len(mlps)),
    ]
    for m in mlps:
        dims = m.dims
        parts.append(struct.pack("<BI", OUTPUT_TRANSFORMS.index(m.output_transform), len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for m in mlps:
        for p in m.params():
            parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        off = 4
        version, epoch, val_loss, n_blocks = struct.unpack_from("<BIdI", data, off)
        off += struct.calcsize("<BIdI")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        arch = []
        for _ in range(n_blocks):
            transform, n = struct.unpack_from("<BI", data, off)
            off += struct.calcsize("<BI")
            dims = struct.unpack_from(f"<{n}I", data, off)
            off += 4 * n
            if transform >= len(OUTPUT_TRANSFORMS) or n < 2:
                raise CheckpointError(f"{path}: invalid architecture descriptor")
            arch.append((OUTPUT_TRANSFORMS[transform], dims))
        mlps = []
        for transform, dims in arch:
            weights, biases = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                w = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_out, fan_in)
                off += 8 * w.size
                b = np.frombuffer(data, "<f8", fan_out, off)
                off += 8 * b.size
                weights.append(w.astype(np.float64))
                biases.append(b.astype(np.float64))
            mlps.append(Mlp(weights, biases, transform))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return Checkpoint(mlps, epoch, val_loss)


def load_into(mlp, path, block=0):
    """Copy parameters from a checkpoint block into ``mlp`` after checking architecture."""
    ckpt = load_checkpoint(path)
    src = ckpt.mlps[block]
    if src.dims != mlp.dims or src.output_transform != mlp.output_transform:
        raise ArchitectureMismatchError(
            f"checkpoint has {src.dims} ({src.output_transform}), slot expects"
            f" {mlp.dims} ({mlp.output_transform})"
        )
    for dst, val in zip(mlp.params(), src.params()):
        dst[...] = val
    return mlp
