"""Feed-forward networks with hand-written reverse mode, Adam and Polyak updates.

Everything is float64. A network is a stack of affine layers with ReLU between
them and one of three output heads:

* ``linear``  -- raw affine output (scalar critics)
* ``tanh``    -- ``action_bound * tanh(z)`` (deterministic actors)
* ``softmax`` -- probabilities over atoms (distributional critics)

Layer ``i`` maps ``dims[i] -> dims[i+1]`` with a weight matrix of shape
``(dims[i+1], dims[i])``. Inputs may be a single vector or a batch of row vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteError

HEADS = ("linear", "tanh", "softmax")


@dataclass
class MlpNet:
    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"
    action_bound: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown output head {self.head!r}")
        if len(self.dims) < 2 or any(int(d) <= 0 for d in self.dims):
            raise ConfigError(f"layer dims must be >= 2 positive integers, got {self.dims}")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.dims) - 1:
            raise ConfigError("one weight matrix and one bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i + 1], self.dims[i]) or b.shape != (self.dims[i + 1],):
                raise ConfigError(
                    f"layer {i}: expected W{(self.dims[i + 1], self.dims[i])} "
                    f"b{(self.dims[i + 1],)}, got W{w.shape} b{b.shape}"
                )

    @classmethod
    def create(cls, dims, rng, head="linear", action_bound=1.0, init_scale=1.0):
        """Fan-in uniform init: every entry ~ U(-s, s) with s = init_scale / sqrt(fan_in)."""
        dims = [int(d) for d in dims]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = init_scale / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(dims, weights, biases, head=head, action_bound=float(action_bound))

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def copy(self):
        return MlpNet(
            list(self.dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            head=self.head,
            action_bound=self.action_bound,
        )

    def parameters(self):
        """Parameter arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, x):
        return forward(self, x)


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net):
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scaled(self, factor):
        return GradientSet([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other):
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def check_congruent(self, net):
        if len(self.weights) != len(net.weights) or any(
            g.shape != p.shape for g, p in zip(self.arrays(), net.parameters())
        ):
            raise ConfigError("gradient set is not shape-congruent with the network")


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by :func:`backward`."""

    inputs: np.ndarray  # always 2-D
    preacts: list[np.ndarray]
    activations: list[np.ndarray]  # activations[i] is the input to layer i
    output: np.ndarray
    squeeze: bool


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ConfigError(f"input of shape {x.shape} does not match network input dim {net.in_dim}")
    return x, squeeze


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_head(net, z):
    if net.head == "linear":
        return z
    if net.head == "tanh":
        return net.action_bound * np.tanh(z)
    return softmax(z)


def forward(net, x, return_cache=False):
    x2, squeeze = _as_batch(net, x)
    activations = [x2]
    preacts = []
    h = x2
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        preacts.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            activations.append(h)
    out = _apply_head(net, preacts[-1])
    result = out[0] if squeeze else out
    if return_cache:
        return result, ForwardCache(x2, preacts, activations, out, squeeze)
    return result


def head_backward(net, cache, cotangent):
    """Map a cotangent on the head output to a cotangent on the final pre-activation."""
    if net.head == "linear":
        return cotangent
    if net.head == "tanh":
        t = cache.output / net.action_bound
        return cotangent * net.action_bound * (1.0 - t * t)
    p = cache.output
    return p * (cotangent - np.sum(cotangent * p, axis=-1, keepdims=True))


def backward(net, x_or_cache, cotangent, wrt="output", param_grads=True):
    """Reverse pass for the scalar ``<cotangent, output>``.

    ``x_or_cache`` is either the raw input (the forward pass is recomputed) or the
    :class:`ForwardCache` returned by ``forward(..., return_cache=True)``.
    With ``wrt="logits"`` the cotangent is taken to be on the final pre-activation,
    bypassing the head (used by cross-entropy style losses on softmax heads).

    Returns ``(GradientSet or None, input_cotangent)``.
    """
    cache = x_or_cache if isinstance(x_or_cache, ForwardCache) else forward(net, x_or_cache, True)[1]
    g = np.asarray(cotangent, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ConfigError(f"cotangent shape {g.shape} does not match output shape {cache.output.shape}")
    if wrt == "output":
        dz = head_backward(net, cache, g)
    elif wrt == "logits":
        dz = g
    else:
        raise ConfigError(f"wrt must be 'output' or 'logits', got {wrt!r}")

    n = len(net.weights)
    gw = [None] * n
    gb = [None] * n
    for i in range(n - 1, -1, -1):
        if param_grads:
            gw[i] = dz.T @ cache.activations[i]
            gb[i] = dz.sum(axis=0)
        da = dz @ net.weights[i]
        if i > 0:
            dz = da * (cache.preacts[i - 1] > 0.0)
    input_cot = da[0] if cache.squeeze else da
    return (GradientSet(gw, gb) if param_grads else None), input_cot


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        return cls(
            [np.zeros_like(p) for p in net.parameters()],
            [np.zeros_like(p) for p in net.parameters()],
            0,
            float(learning_rate),
            float(beta1),
            float(beta2),
            float(eps),
        )

    def copy(self):
        return AdamState(
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
            self.step,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_step(net, grads, state):
    """Apply one bias-corrected Adam *descent* step in place; returns ``(net, state)``.

    The update is rejected (nothing is modified) if any gradient entry is non-finite.
    """
    grads.check_congruent(net)
    if not grads.is_finite():
        raise NonFiniteError("non-finite gradient entries; Adam update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(net.parameters(), grads.arrays(), state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` to global norm ``max_norm`` if it is larger; ``max_norm <= 0`` disables."""
    norm = grads.norm()
    if max_norm <= 0.0 or norm <= max_norm:
        return grads
    return grads.scaled(max_norm / norm)


def soft_update(target, online, tau):
    """Polyak average in place: p' <- tau * p + (1 - tau) * p'."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    if target.dims != online.dims:
        raise ConfigError(f"shape mismatch: {target.dims} vs {online.dims}")
    for pt, po in zip(target.parameters(), online.parameters()):
        if tau == 1.0:
            pt[...] = po
        else:
            pt *= 1.0 - tau
            pt += tau * po
    return target


# -- checkpoints -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"TDRCKPT1"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON: {"nets": [{"name", "dims", "head", "action_bound"}, ...], "meta": {...}}
#   then, for each net in header order, W0, b0, W1, b1, ... as row-major float64 ('<f8')

_MAGIC = b"TDRCKPT1"


def save_checkpoint(path, nets, meta=None):
    path = Path(path)
    header = {
        "nets": [
            {"name": name, "dims": list(net.dims), "head": net.head, "action_bound": net.action_bound}
            for name, net in nets.items()
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for net in nets.values():
            for p in net.parameters():
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(nets: dict[str, MlpNet], meta: dict)``."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    nets = {}
    for spec in header["nets"]:
        dims = spec["dims"]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
            offset += 8 * fan_in * fan_out
            b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
            offset += 8 * fan_out
            weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
            biases.append(b.astype(np.float64))
        nets[spec["name"]] = MlpNet(dims, weights, biases, spec["head"], spec["action_bound"])
    if offset != len(data):
        raise ConfigError(f"{path}: trailing bytes after parameter payload")
    return nets, header.get("meta", {})
