"""MLPs, optimizers and the parameter checkpoint format.

Everything here is deterministic for a fixed seed: initialization draws from a
dedicated Philox stream, and optimizer updates iterate parameters in
declaration order.
"""

import json
import struct

import numpy as np

from .autodiff import Tensor, matmul, relu, tanh
from .rng import make_rng
from .validation import ContractError, NumericError, ShapeError, check_finite

CHECKPOINT_MAGIC = b"TASKVQNN"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu", "identity")


def softmax_np(x, axis=-1):
    """Plain-numpy softmax (no graph), stable under large logits."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Mlp:
    """Fully connected network: per-layer weights, biases and activation tags."""

    def __init__(self, layer_dims, activations, seed=0, name="mlp", bias=True):
        if len(layer_dims) < 2:
            raise ContractError("need at least input and output dims")
        if len(activations) != len(layer_dims) - 1:
            raise ContractError("one activation tag per layer required")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
        self.layer_dims = list(layer_dims)
        self.activations = list(activations)
        self.name = name
        self.has_bias = bias
        rng = make_rng(seed, "init", name)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            a = np.sqrt(6.0 / (fan_in + fan_out))  # Glorot-uniform
            w = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            if bias:
                b = np.zeros(fan_out, dtype=np.float32)
                self.biases.append(Tensor(b, requires_grad=True, name=f"{name}.b{i}"))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Ordered (name, tensor) pairs; order defines checkpoint layout."""
        out = []
        for i, w in enumerate(self.weights):
            out.append((f"{self.name}.w{i}", w))
            if self.has_bias:
                out.append((f"{self.name}.b{i}", self.biases[i]))
        return out

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.name} expects [batch, {self.in_dim}], got {x.data.shape}"
            )
        h = x
        for i, w in enumerate(self.weights):
            h = matmul(h, w)
            if self.has_bias:
                h = h + self.biases[i]
            act = self.activations[i]
            if act == "tanh":
                h = tanh(h)
            elif act == "relu":
                h = relu(h)
        check_finite(h.data, f"{self.name} forward output")
        return h

    __call__ = forward

    def state(self):
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state):
        for name, t in self.parameters():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {name}")
            t.data = arr.copy()


def forward_mlp(mlp, x):
    return mlp.forward(x)


class Sgd:
    def __init__(self, lr):
        self.kind = "sgd"
        self.lr = float(lr)
        self.step_count = 0

    def step(self, named_params, grads):
        for name, p in named_params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient for {name}; step refused")
        for name, p in named_params:
            p.data -= np.float32(self.lr) * grads[name]
        self.step_count += 1


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind = "adam"
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, named_params, grads):
        for name, p in named_params:
            g = grads[name]
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient for {name}; step refused")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in named_params:
            g = grads[name].astype(np.float32, copy=False)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


def make_optimizer(kind, lr, **kwargs):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr, **kwargs)
    raise ContractError(f"unknown optimizer kind {kind!r}")


# -- checkpoint format -------------------------------------------------------
#
# magic(8) | version(<u4) | header_len(<u4) | header JSON | flat <f4 buffers
# in declaration order. Round-trips bit-exactly.


def save_checkpoint(path, named_params, meta=None):
    header = {
        "meta": meta or {},
        "params": [
            {"name": name, "shape": list(t.data.shape)} for name, t in named_params
        ],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for _, t in named_params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (meta, {name: float32 array}) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a parameter checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            params[rec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return header["meta"], params
