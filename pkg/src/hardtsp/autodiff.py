"""Reverse-mode differentiation for the policy network.

The tape itself is torch autograd; this module fixes the op vocabulary the
policy is allowed to use, validates shapes and finiteness at every op, and
owns the parameter store, the Adam update and the HTCK checkpoint format.
All tensors are float64.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from hardtsp.errors import (
    AccountingError,
    CheckpointError,
    ContractError,
    NumericError,
    ShapeError,
)
from hardtsp.io import atomic_write

DTYPE = torch.float64
MASK_VALUE = -1e9
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # weight kept on the old running average

_OPS = {}


def _register(kind):
    def deco(fn):
        _OPS[kind] = fn
        return fn
    return deco


def _same_or_suffix(kind, a, b):
    if a.shape == b.shape:
        return
    if b.dim() <= a.dim() and tuple(a.shape[a.dim() - b.dim():]) == tuple(b.shape):
        return
    raise ShapeError(f"{kind}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


@_register("add")
def _add(a, b):
    _same_or_suffix("add", a, b)
    return a + b


@_register("sub")
def _sub(a, b):
    _same_or_suffix("sub", a, b)
    return a - b


@_register("mul")
def _mul(a, b):
    _same_or_suffix("mul", a, b)
    return a * b


@_register("scale")
def _scale(a, c):
    return a * float(c)


@_register("matmul")
def _matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


@_register("softmax")
def _softmax(a):
    return torch.softmax(a, dim=-1)


@_register("log_softmax")
def _log_softmax(a):
    return torch.log_softmax(a, dim=-1)


@_register("tanh")
def _tanh(a):
    return torch.tanh(a)


@_register("sqrt")
def _sqrt(a):
    return torch.sqrt(a)


@_register("relu")
def _relu(a):
    return torch.relu(a)


@_register("mean")
def _mean(a, dim=None):
    return a.mean() if dim is None else a.mean(dim=dim)


@_register("sum")
def _sum(a, dim=None):
    return a.sum() if dim is None else a.sum(dim=dim)


@_register("gather_rows")
def _gather_rows(a, index):
    """Row ``index[b]`` of ``a[b]`` for a (B, n, d) tensor."""
    if a.dim() != 3 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows: need (B, n, d) and (B,), got "
                         f"{tuple(a.shape)} and {tuple(index.shape)}")
    return a[torch.arange(a.shape[0]), index]


@_register("concat")
def _concat(*parts, dim=-1):
    lead = [tuple(p.shape[:-1]) for p in parts]
    if len(set(lead)) != 1:
        raise ShapeError(f"concat: leading shapes differ: {lead}")
    return torch.cat(parts, dim=dim)


@_register("masked_fill")
def _masked_fill(a, mask):
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {tuple(mask.shape)} vs input {tuple(a.shape)}")
    return a.masked_fill(mask, MASK_VALUE)


@_register("batch_norm")
def _batch_norm(a, weight, bias, running_mean, running_var, training):
    """Normalize the last dim of ``a`` over all leading positions."""
    d = a.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"batch_norm: affine params must have shape ({d},)")
    flat = a.reshape(-1, d)
    out = torch.nn.functional.batch_norm(
        flat, running_mean, running_var, weight, bias,
        training=training, momentum=1.0 - BN_MOMENTUM, eps=BN_EPS)
    return out.reshape(a.shape)


def forward_op(kind: str, *inputs, **kwargs):
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    out = fn(*inputs, **kwargs)
    if not torch.isfinite(out).all():
        raise NumericError(kind)
    return out


def op_kinds():
    return sorted(_OPS)


def backward(output, leaves):
    """Gradients of scalar ``output`` w.r.t. each tensor in ``leaves``.

    Leaves the output's graph does not reach get zero gradients.
    """
    if output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    leaves = list(leaves)
    grads = torch.autograd.grad(output.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


def linear(x, weight, bias=None):
    out = forward_op("matmul", x, weight)
    return out if bias is None else forward_op("add", out, bias)


class ParameterStore:
    """Named trainable tensors, non-trainable buffers, and Adam moments."""

    def __init__(self):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.exp_avg: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.exp_avg_sq: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.step = 0

    def add_param(self, name, value):
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = value.detach().to(DTYPE).clone().requires_grad_(True)
        self.params[name] = value
        self.exp_avg[name] = torch.zeros_like(value, requires_grad=False)
        self.exp_avg_sq[name] = torch.zeros_like(value, requires_grad=False)
        return value

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value.detach().to(DTYPE).clone()
        return self.buffers[name]

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def names(self):
        return list(self.params)

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for name, p in self.params.items():
            new.add_param(name, p)
            new.exp_avg[name] = self.exp_avg[name].clone()
            new.exp_avg_sq[name] = self.exp_avg_sq[name].clone()
        for name, b in self.buffers.items():
            new.add_buffer(name, b)
        new.step = self.step
        return new

    def load_values_from(self, other: "ParameterStore") -> None:
        """Overwrite parameters and buffers in place (optimizer state untouched)."""
        with torch.no_grad():
            for name, p in self.params.items():
                p.copy_(other.params[name])
            for name, b in self.buffers.items():
                b.copy_(other.buffers[name])

    def records(self):
        """(group, name, tensor) triples in serialization order."""
        out = [("param", k, v) for k, v in self.params.items()]
        out += [("buffer", k, v) for k, v in self.buffers.items()]
        out += [("adam_m", k, v) for k, v in self.exp_avg.items()]
        out += [("adam_v", k, v) for k, v in self.exp_avg_sq.items()]
        return out


def grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = grad_norm(grads)
    if max_norm is None or total <= max_norm:
        return grads
    factor = max_norm / (total + 1e-6)
    return {k: g * factor for k, g in grads.items()}


def optimizer_step(store: ParameterStore, gradients: dict, lr: float = 1e-4,
                   weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> ParameterStore:
    """Adam with bias correction; ``weight_decay`` is added to gradients as an L2 term.

    Updates ``store`` in place and returns it.
    """
    missing = [k for k in store.params if k not in gradients]
    extra = [k for k in gradients if k not in store.params]
    if missing or extra:
        raise AccountingError(f"gradient names do not match store: missing={missing} extra={extra}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in store.params.items():
            g = gradients[name]
            if g.shape != p.shape:
                raise AccountingError(f"gradient for {name!r} has shape {tuple(g.shape)}, "
                                      f"parameter has {tuple(p.shape)}")
            g = g.detach()
            if weight_decay:
                g = g + weight_decay * p
            m = store.exp_avg[name]
            v = store.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return store


# --- HTCK v1 checkpoints -------------------------------------------------

HTCK_MAGIC = b"HTCK 1\n"


def encode_checkpoint(store: ParameterStore, hparams: dict, meta: dict | None = None) -> bytes:
    """Serialize into: magic line, one JSON header line, raw float64 LE payload."""
    entries = []
    blobs = []
    for group, name, tensor in store.records():
        arr = tensor.detach().cpu().numpy().astype("<f8", copy=False)
        entries.append({"group": group, "name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {"version": 1, "hparams": hparams, "adam_step": store.step,
              "meta": meta or {}, "records": entries}
    line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    return HTCK_MAGIC + line + b"".join(blobs)


def decode_checkpoint(data: bytes):
    """Inverse of ``encode_checkpoint``; returns ``(store, hparams, meta)``."""
    if not data.startswith(HTCK_MAGIC):
        raise CheckpointError("not an HTCK v1 checkpoint")
    rest = data[len(HTCK_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(rest[:nl].decode("utf-8"))
    payload = memoryview(rest)[nl + 1:]
    store = ParameterStore()
    offset = 0
    moments = {"adam_m": {}, "adam_v": {}}
    for entry in header["records"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(payload):
            raise CheckpointError(f"payload truncated at record {entry['name']!r}")
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape)
        offset += size
        tensor = torch.from_numpy(arr.astype(np.float64))
        group = entry["group"]
        if group == "param":
            store.add_param(entry["name"], tensor)
        elif group == "buffer":
            store.add_buffer(entry["name"], tensor)
        elif group in moments:
            moments[group][entry["name"]] = tensor
        else:
            raise CheckpointError(f"unknown record group {group!r}")
    if offset != len(payload):
        raise CheckpointError("trailing bytes after the last record")
    for name in store.params:
        store.exp_avg[name] = moments["adam_m"].get(name, store.exp_avg[name])
        store.exp_avg_sq[name] = moments["adam_v"].get(name, store.exp_avg_sq[name])
    store.step = int(header["adam_step"])
    return store, header["hparams"], header["meta"]


def save_checkpoint(path, store: ParameterStore, hparams: dict, meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(store, hparams, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
