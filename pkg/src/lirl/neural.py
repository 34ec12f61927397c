"""Small dense networks with hand-written reverse mode and Adam.

Inputs are batched row-wise: ``x`` has shape ``(batch, n_in)``.  Weights are
stored as ``(n_in, n_out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"LIRLMLP"
CHECKPOINT_VERSION = 1


class TrainingDivergence(FloatingPointError):
    """Non-finite gradient or loss encountered during an update."""


class Mlp:
    """Dense network whose parameters live in one flat buffer.

    ``params`` holds per-layer views ``[W0, b0, W1, b1, ...]`` into ``flat``
    so optimisers and target mixing act on a single array.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "tanh", rng=None,
                 dtype=np.float64, init: str = "he", out_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self._bind(np.zeros(self.n_params, dtype=self.dtype))
        if init == "zeros":
            return
        rng = np.random.default_rng(rng)
        last = self.n_layers - 1
        for layer, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = np.sqrt(6.0 / n_in)
            W = rng.uniform(-limit, limit, size=(n_in, n_out))
            if layer == last:
                W *= out_scale
            self.params[2 * layer][...] = W

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def _views(self, flat):
        views, off = [], 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            views.append(flat[off:off + n_in * n_out].reshape(n_in, n_out))
            off += n_in * n_out
            views.append(flat[off:off + n_out])
            off += n_out
        return views

    def _bind(self, flat):
        self.flat = flat
        self.params = self._views(flat)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes, clone.activation, clone.dtype = self.sizes, self.activation, self.dtype
        clone._bind(self.flat.copy())
        return clone

    def _act(self, a):
        return np.tanh(a) if self.activation == "tanh" else a

    def trace(self, x):
        """Forward pass keeping the per-layer inputs needed by ``backward``."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        inputs = []
        h = x
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            h = h @ W + b
            if layer < last:
                h = self._act(h)
        return h, inputs

    def forward(self, x):
        squeeze = np.ndim(x) == 1
        y, _ = self.trace(x)
        return y[0] if squeeze else y

    __call__ = forward

    def backward(self, inputs, grad_out, *, param_grads: bool = True, input_grad: bool = True):
        """Gradients of ``sum(grad_out * y)`` w.r.t. parameters and input.

        Returns ``(flat_grad, input_grad)``; either is ``None`` when the
        matching flag is false.  ``flat_grad`` is laid out like ``flat``.
        """
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        flat = np.empty(self.n_params, dtype=self.dtype) if param_grads else None
        views = self._views(flat) if param_grads else None
        for layer in range(self.n_layers - 1, -1, -1):
            W = self.params[2 * layer]
            h_in = inputs[layer]
            if param_grads:
                np.matmul(h_in.T, g, out=views[2 * layer])
                g.sum(axis=0, out=views[2 * layer + 1])
            if layer == 0 and not input_grad:
                return flat, None
            g = g @ W.T
            if layer > 0 and self.activation == "tanh":
                g *= 1.0 - h_in * h_in  # h_in is the tanh output of the previous layer
        return flat, g

    def grad_views(self, flat_grad):
        """Per-layer views ``[dW0, db0, ...]`` of a flat gradient."""
        return self._views(flat_grad)

    # ---------------------------------------------------------- persistence
    def to_bytes(self) -> bytes:
        header = json.dumps({"version": CHECKPOINT_VERSION, "sizes": list(self.sizes),
                             "activation": self.activation, "dtype": self.dtype.str}).encode()
        flat = self.flat.astype(self.dtype.newbyteorder("<"), copy=False).tobytes()
        return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + flat

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not an MLP checkpoint")
        off = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + n])
        off += n
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        net = cls.__new__(cls)
        net.sizes = tuple(header["sizes"])
        net.activation = header["activation"]
        net.dtype = np.dtype(header["dtype"])
        count = net.n_params
        flat = np.frombuffer(blob, dtype=net.dtype, count=count, offset=off).copy()
        off += count * net.dtype.itemsize
        net._bind(flat)
        if off != len(blob):
            raise ValueError("checkpoint has trailing bytes")
        return net

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


def clip_by_global_norm(grad, max_norm: float):
    """Rescale a flat gradient to at most ``max_norm``; returns (grad, norm)."""
    if kernels.AVAILABLE:
        total = float(np.sqrt(kernels.sq_norm(grad)))
    else:
        total = float(np.sqrt(np.dot(grad, grad)))
    if not np.isfinite(total):
        raise TrainingDivergence("non-finite gradient norm")
    if total > max_norm:
        grad = grad * (max_norm / total)
    return grad, total


class Adam:
    """Adam with bias correction, updating a flat parameter array in place."""

    def __init__(self, params: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergence("non-finite gradient passed to Adam")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        m, v = self.m, self.v
        if kernels.AVAILABLE:
            bc2 = np.sqrt(1.0 - b2 ** self.t)
            kernels.adam_inplace(self.params, grad, m, v, b1, b2,
                                 self.lr * bc2 / (1.0 - b1 ** self.t), self.eps * bc2)
            return
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * (grad * grad)
        bc2 = np.sqrt(1.0 - b2 ** self.t)
        step = np.sqrt(v)
        step += self.eps * bc2
        np.divide(m, step, out=step)
        step *= self.lr * bc2 / (1.0 - b1 ** self.t)
        self.params -= step


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    if kernels.AVAILABLE:
        kernels.mix_inplace(target.flat, source.flat, tau)
        return
    target.flat *= 1.0 - tau
    target.flat += tau * source.flat
