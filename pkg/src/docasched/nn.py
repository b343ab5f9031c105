"""Small numpy neural-network core for the actor and critic.

Layers are 1-D convolutions (same padding, stride 1, optional groups) and dense
layers with tanh, linear or softmax activations.  Inputs are ``(C, L)`` or a
batch ``(B, C, L)``; dense layers flatten whatever reaches them.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("tanh", "linear", "softmax")

MAGIC = b"DOCANN01"
FORMAT_VERSION = 1


class TrainingDivergence(FloatingPointError):
    """Raised when a forward pass, gradient or update stops being finite."""


class ArchitectureMismatch(ValueError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


@dataclass
class Conv1d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    groups: int = 1
    activation: str = "tanh"
    kind = "conv1d"

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError("channels must divide evenly into groups")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd number (same padding)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def param_shapes(self):
        return [(self.out_channels, self.in_channels // self.groups, self.kernel),
                (self.out_channels,)]

    def init(self, rng, dtype):
        cin_g = self.in_channels // self.groups
        cout_g = self.out_channels // self.groups
        w = glorot_uniform(rng, self.param_shapes[0], cin_g * self.kernel, cout_g * self.kernel,
                           dtype)
        return [w, np.zeros(self.out_channels, dtype)]

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv1d expects {self.in_channels} channels, got {c}")
        return (self.out_channels, length)

    def _cols(self, x):
        """im2col as ``(groups, B*L, c*k)`` with c the channels per group."""
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        B, _, L = x.shape
        g, c = self.groups, self.in_channels // self.groups
        cols = sliding_window_view(xp, self.kernel, axis=2)  # (B, Cin, L, k)
        cols = cols.reshape(B, g, c, L, self.kernel).transpose(1, 0, 3, 2, 4)
        return cols.reshape(g, B * L, c * self.kernel)

    def _wg(self, w):
        g = self.groups
        return w.reshape(g, self.out_channels // g, -1)  # (g, o, c*k)

    def linear(self, params, x):
        w, b = params
        B, _, L = x.shape
        g, o = self.groups, self.out_channels // self.groups
        z = self._cols(x) @ self._wg(w).transpose(0, 2, 1)  # (g, B*L, o)
        z = z.reshape(g, B, L, o).transpose(1, 0, 3, 2).reshape(B, self.out_channels, L)
        return z + b[None, :, None]

    def grads(self, params, x, dz):
        w, _ = params
        B, _, L = x.shape
        g, o = self.groups, self.out_channels // self.groups
        c, k = self.in_channels // g, self.kernel
        dzg = dz.reshape(B, g, o, L).transpose(1, 2, 0, 3).reshape(g, o, B * L)
        dw = (dzg @ self._cols(x)).reshape(w.shape)
        db = dz.sum(axis=(0, 2))
        dcols = dzg.transpose(0, 2, 1) @ self._wg(w)  # (g, B*L, c*k)
        dcols = dcols.reshape(g, B, L, c, k).transpose(1, 0, 3, 2, 4).reshape(B, g * c, L, k)
        p = k // 2
        dxp = np.zeros((B, self.in_channels, L + 2 * p), dtype=dz.dtype)
        for j in range(k):
            dxp[:, :, j:j + L] += dcols[..., j]
        return [dw, db], dxp[:, :, p:p + L]

    def describe(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel, "groups": self.groups,
                "activation": self.activation}


@dataclass
class Dense:
    in_features: int
    out_features: int
    activation: str = "tanh"
    kind = "dense"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def param_shapes(self):
        return [(self.out_features, self.in_features), (self.out_features,)]

    def init(self, rng, dtype):
        w = glorot_uniform(rng, self.param_shapes[0], self.in_features, self.out_features, dtype)
        return [w, np.zeros(self.out_features, dtype)]

    def out_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.in_features:
            raise ValueError(f"dense expects {self.in_features} inputs, got {n}")
        return (self.out_features,)

    def linear(self, params, x):
        w, b = params
        return x.reshape(len(x), -1) @ w.T + b

    def grads(self, params, x, dz):
        w, _ = params
        flat = x.reshape(len(x), -1)
        return [dz.T @ flat, dz.sum(axis=0)], (dz @ w).reshape(x.shape)

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "activation": self.activation}


def layer_from_description(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "conv1d":
        return Conv1d(**d)
    if kind == "dense":
        return Dense(**d)
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """An ordered stack of layers with their parameters.

    ``params`` is the flat list ``[W1, b1, W2, b2, ...]`` in declaration order;
    gradients use the same layout.
    """

    def __init__(self, input_shape, layers, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if i < len(self.layers) - 1 and layer.activation != "tanh":
                # softmax and linear are reserved for the output head
                raise ValueError("hidden layers must use tanh")
            shape = layer.out_shape(shape)
        self.output_shape = shape
        if len(shape) != 1:
            raise ValueError("the last layer must be dense")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for layer in self.layers:
            self.params.extend(layer.init(rng, self.dtype))

    # -- bookkeeping --
    def _layer_params(self, i):
        return self.params[2 * i:2 * i + 2]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer.describe() for layer in self.layers]}

    @classmethod
    def from_description(cls, desc: dict, rng=None, dtype=np.float64) -> "Network":
        return cls(desc["input_shape"], [layer_from_description(d) for d in desc["layers"]],
                   rng=rng, dtype=dtype)

    def clone(self) -> "Network":
        other = Network.__new__(Network)
        other.input_shape = self.input_shape
        other.layers = self.layers
        other.dtype = self.dtype
        other.output_shape = self.output_shape
        other.params = [p.copy() for p in self.params]
        return other

    def set_params(self, params):
        if len(params) != len(self.params):
            raise ArchitectureMismatch("parameter count differs")
        for dst, src in zip(self.params, params):
            if dst.shape != np.shape(src):
                raise ArchitectureMismatch(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def zeros_like(self):
        return [np.zeros_like(p) for p in self.params]

    # -- passes --
    def _batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == len(self.input_shape)
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        return x, single

    def forward(self, x, return_cache: bool = False):
        """Outputs for ``x``; softmax heads return probabilities."""
        x, single = self._batch(x)
        cache = [x]
        h = x
        zs = []
        for i, layer in enumerate(self.layers):
            z = layer.linear(self._layer_params(i), h)
            zs.append(z)
            if layer.activation == "tanh":
                h = np.tanh(z)
            elif layer.activation == "softmax":
                h = softmax(z)
            else:
                h = z
            cache.append(h)
        if not np.all(np.isfinite(h)):
            raise TrainingDivergence("non-finite network output")
        out = h[0] if single else h
        if return_cache:
            return out, (cache, zs, single)
        return out

    def logits(self, x):
        """Pre-activation output of the head."""
        _, (cache, zs, single) = self.forward(x, return_cache=True)
        return zs[-1][0] if single else zs[-1]

    def backward(self, x, upstream, cache=None, wrt: str = "output") -> list[np.ndarray]:
        """Gradients of ``sum(upstream * y)`` w.r.t. every parameter.

        ``wrt="output"`` treats ``upstream`` as dL/d(output); ``wrt="logits"``
        as dL/d(pre-activation of the head), which skips the softmax Jacobian.
        """
        if cache is None:
            _, cache = self.forward(x, return_cache=True)
        acts, zs, single = cache
        g = np.asarray(upstream, dtype=self.dtype)
        if single:
            g = g[None]
        if g.shape != zs[-1].shape:
            raise ValueError(f"upstream shape {g.shape} does not match output {zs[-1].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite upstream gradient")
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h = acts[i + 1]
            if i == len(self.layers) - 1 and wrt == "logits":
                dz = g
            elif layer.activation == "tanh":
                dz = g * (1.0 - h * h)
            elif layer.activation == "softmax":
                dz = h * (g - (g * h).sum(axis=-1, keepdims=True))
            else:
                dz = g
            (dw, db), g = layer.grads(self._layer_params(i), acts[i], dz)
            grads[2 * i], grads[2 * i + 1] = dw, db
        for gr in grads:
            if not np.all(np.isfinite(gr)):
                raise TrainingDivergence("non-finite gradient")
        return grads


# --- optimizers ------------------------------------------------------------------

class SGD:
    def __init__(self, net: Network | None = None):
        pass

    def step(self, net: Network, grads, lr: float):
        _check_lr(lr)
        new = [p - lr * g for p, g in zip(net.params, grads)]
        _commit(net, new)


class RMSProp:
    """RMS-normalized step: ``p -= lr * g / sqrt(ms + eps)``."""

    def __init__(self, net: Network, decay: float = 0.99, eps: float = 1e-6):
        self.decay = decay
        self.eps = eps
        self.ms = [np.zeros_like(p) for p in net.params]
        self.steps = 0

    def step(self, net: Network, grads, lr: float):
        _check_lr(lr)
        new = []
        for i, (p, g) in enumerate(zip(net.params, grads)):
            self.ms[i] = self.decay * self.ms[i] + (1.0 - self.decay) * g * g
            new.append(p - lr * g / np.sqrt(self.ms[i] + self.eps))
        _commit(net, new)
        self.steps += 1

    def state(self):
        return [m.copy() for m in self.ms]


def _check_lr(lr):
    if not lr > 0:
        raise ValueError("learning rate must be positive")


def _commit(net, new):
    for p in new:
        if not np.all(np.isfinite(p)):
            raise TrainingDivergence("non-finite parameters after update")
    for dst, src in zip(net.params, new):
        dst[...] = src


def make_optimizer(kind: str, net: Network, **kw):
    if kind == "rmsprop":
        return RMSProp(net, **kw)
    if kind == "sgd":
        return SGD(net)
    raise ValueError(f"unknown optimizer {kind!r}")


def apply_update(net: Network, grads, lr: float, optimizer=None) -> Network:
    """One optimizer step in place (plain SGD when ``optimizer`` is None)."""
    (optimizer or SGD()).step(net, grads, lr)
    return net


# --- architectures -----------------------------------------------------------------

def e1_actor(n_tbs: int, filters: int = 16, hidden: int = 64, rng=None, dtype=np.float64):
    return Network((1, n_tbs), [Conv1d(1, filters), Conv1d(filters, filters),
                                Dense(filters * n_tbs, hidden), Dense(hidden, n_tbs, "softmax")],
                   rng=rng, dtype=dtype)


def e1_critic(n_tbs: int, filters: int = 16, hidden: int = 64, rng=None, dtype=np.float64):
    return Network((1, n_tbs), [Conv1d(1, filters), Conv1d(filters, filters),
                                Dense(filters * n_tbs, hidden), Dense(hidden, 1, "linear")],
                   rng=rng, dtype=dtype)


def e2_actor(k: int, n_tbs: int, branch: int = 8, filters: int = 16, rng=None,
             dtype=np.float64):
    # one conv per state row: a grouped conv with a group per row
    return Network((3, k), [Conv1d(3, 3 * branch, groups=3), Conv1d(3 * branch, filters),
                            Dense(filters * k, n_tbs, "softmax")], rng=rng, dtype=dtype)


def e2_critic(k: int, branch: int = 8, filters: int = 16, rng=None, dtype=np.float64):
    return Network((3, k), [Conv1d(3, 3 * branch, groups=3), Conv1d(3 * branch, filters),
                            Dense(filters * k, 1, "linear")], rng=rng, dtype=dtype)


# --- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path, actor: Network, critic: Network, meta: dict | None = None):
    """Write both networks: magic, header length, JSON header, float64 LE arrays."""
    header = {"format": "docasched-ac", "version": FORMAT_VERSION,
              "actor": actor.describe(), "critic": critic.describe(),
              "param_shapes": {"actor": [list(p.shape) for p in actor.params],
                               "critic": [list(p.shape) for p in critic.params]},
              "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for p in actor.params + critic.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a docasched checkpoint")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode())
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path, expect_actor: dict | None = None, expect_critic: dict | None = None):
    """Return ``(actor, critic, meta)``; architecture descriptors must match if given."""
    with Path(path).open("rb") as fh:
        header = _read_header(fh)
        for name, expect in (("actor", expect_actor), ("critic", expect_critic)):
            if expect is not None and _normal(expect) != _normal(header[name]):
                raise ArchitectureMismatch(f"checkpoint {name} architecture does not match")
        actor = Network.from_description(header["actor"])
        critic = Network.from_description(header["critic"])
        for net in (actor, critic):
            for p in net.params:
                buf = fh.read(p.size * 8)
                if len(buf) != p.size * 8:
                    raise ValueError("truncated checkpoint")
                p[...] = np.frombuffer(buf, dtype="<f8").reshape(p.shape)
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return actor, critic, header.get("meta", {})


def _normal(desc):
    return json.loads(json.dumps(desc, sort_keys=True))
