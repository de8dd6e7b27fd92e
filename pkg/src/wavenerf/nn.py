"""Parameter containers, layers, Adam, and the WVNF checkpoint container."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import Tensor, elu, linear

CHECKPOINT_MAGIC = b"WVNF"
CHECKPOINT_VERSION = 1


class Module:
    """Minimal parameter tree.  Parameters are grad-enabled leaf tensors held
    as attributes; submodules may be attributes or lists of modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _init(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, gain=1.0):
        self.weight = _init(rng, (n_in, n_out), n_in, gain)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """Linear -> ELU -> Linear."""

    def __init__(self, n_in, n_hidden, n_out, rng):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x):
        return self.fc2(elu(self.fc1(x)))


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, dilation=1,
                 padding_mode="symmetric"):
        kh, kw = (k, k) if np.isscalar(k) else k
        self.weight = _init(rng, (c_out, c_in, kh, kw), c_in * kh * kw)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.dilation = stride, dilation
        self.padding = (kh // 2 * dilation, kw // 2 * dilation) if padding is None else padding
        self.padding_mode = padding_mode

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation,
                        self.padding, self.padding_mode)


class Deconv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=2, padding=0, output_padding=0,
                 dilation=1):
        kh, kw = (k, k) if np.isscalar(k) else k
        self.weight = _init(rng, (c_in, c_out, kh, kw), c_in * kh * kw // 2)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding
        self.output_padding, self.dilation = output_padding, dilation

    def __call__(self, x):
        return F.deconv2d(x, self.weight, self.bias, self.stride, self.dilation,
                          self.padding, self.output_padding)


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update.  ``state`` is created lazily on first use."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"Adam state shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self, lr=None):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoint container ---------------------------------------------------

class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(path, state):
    """Write ``{name: array}`` as magic, u32 version, then little-endian
    records of (u32 name length, name, u32 ndim, u64 dims, f64 payload)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a WVNF checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads "
            f"version {CHECKPOINT_VERSION}")
    pos, state = 8, {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                    offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return state
