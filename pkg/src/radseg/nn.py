"""Minimal dense numeric core.

Float64 everywhere. Each layer owns its parameters and implements an explicit
backward pass; there is no tape. A layer's ``forward`` stashes whatever the
matching ``backward`` needs, so the usage pattern is strictly
forward-then-backward per step.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ContractViolation, FormatError, GradientError

__all__ = [
    "Parameter",
    "Module",
    "Conv2d",
    "BatchNorm",
    "ReLU",
    "Sigmoid",
    "UpsampleNearest2x",
    "Linear",
    "Adam",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "state_fingerprint",
]


class Parameter:
    """A learnable tensor: contiguous float64 data plus an optional grad buffer."""

    def __init__(self, data, name=""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def add_grad(self, g):
        if g.shape != self.data.shape:
            raise ContractViolation(
                f"grad shape {g.shape} != param shape {self.data.shape} ({self.name})"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Module:
    """Base class: parameter/buffer discovery and train/eval mode."""

    def __init__(self):
        self.training = True

    def children(self):
        for v in self.__dict__.values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                for u in v:
                    if isinstance(u, Module):
                        yield u

    def parameters(self):
        params = []
        for v in self.__dict__.values():
            if isinstance(v, Parameter):
                params.append(v)
        for c in self.children():
            params.extend(c.parameters())
        return params

    def named_state(self, prefix=""):
        """All persistent arrays (parameters and buffers), keyed by dotted path."""
        state = {}
        for k, v in self.__dict__.items():
            if isinstance(v, Parameter):
                state[prefix + k] = v.data
            elif isinstance(v, np.ndarray) and k.startswith("running_"):
                state[prefix + k] = v
            elif isinstance(v, Module):
                state.update(v.named_state(prefix + k + "."))
            elif isinstance(v, (list, tuple)):
                for i, u in enumerate(v):
                    if isinstance(u, Module):
                        state.update(u.named_state(f"{prefix}{k}.{i}."))
        return state

    def load_state(self, state, prefix=""):
        own = self.named_state(prefix)
        missing = set(own) - set(state)
        if missing:
            raise FormatError(f"checkpoint missing entries: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = state[name]
            if src.shape != arr.shape:
                raise FormatError(
                    f"checkpoint entry {name}: shape {src.shape} != expected {arr.shape}"
                )
            arr[...] = src

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True
        for c in self.children():
            c.train()
        return self

    def eval(self):
        self.training = False
        for c in self.children():
            c.eval()
        return self


def kaiming_uniform(shape, fan_in, rng):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected (C,H,W) or (B,C,H,W) input, got shape {x.shape}")


class Conv2d(Module):
    """2-d cross-correlation with bias, via im2col + one matmul."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=None, bias=True, rng=None):
        super().__init__()
        if kernel % 2 != 1:
            raise ContractViolation("kernel spatial size must be odd")
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng), "weight")
        self.bias = Parameter(np.zeros(out_ch), "bias") if bias else None
        self._cache = None

    def _im2col(self, xp, ho, wo):
        b, c, _, _ = xp.shape
        k, s = self.kernel, self.stride
        st = xp.strides
        cols = np.lib.stride_tricks.as_strided(
            xp, (b, c, k, k, ho, wo), (st[0], st[1], st[2], st[3], st[2] * s, st[3] * s)
        )
        return np.ascontiguousarray(cols).reshape(b, c * k * k, ho * wo)

    def forward(self, x):
        x, squeeze = _as_batched(x)
        if x.shape[1] != self.in_ch:
            raise ContractViolation(f"input has {x.shape[1]} channels, kernel expects {self.in_ch}")
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho = (xp.shape[2] - k) // s + 1
        wo = (xp.shape[3] - k) // s + 1
        cols = self._im2col(xp, ho, wo)
        wmat = self.weight.data.reshape(self.out_ch, -1)
        out = np.matmul(wmat, cols)
        if self.bias is not None:
            out += self.bias.data[None, :, None]
        out = out.reshape(x.shape[0], self.out_ch, ho, wo)
        self._cache = (cols, xp.shape, (ho, wo), squeeze)
        return out[0] if squeeze else out

    def backward(self, gout):
        cols, xp_shape, (ho, wo), squeeze = self._cache
        gout = np.asarray(gout, dtype=np.float64)
        if squeeze:
            gout = gout[None]
        b = gout.shape[0]
        gflat = gout.reshape(b, self.out_ch, ho * wo)
        wmat = self.weight.data.reshape(self.out_ch, -1)
        # parameter grads
        gw = np.einsum("bop,bcp->oc", gflat, cols)
        self.weight.add_grad(gw.reshape(self.weight.shape))
        if self.bias is not None:
            self.bias.add_grad(gflat.sum(axis=(0, 2)))
        # input grad via col2im
        gcols = np.matmul(wmat.T, gflat)
        gcols = gcols.reshape(b, self.in_ch, self.kernel, self.kernel, ho, wo)
        gxp = np.zeros(xp_shape)
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                gxp[:, :, i : i + ho * s : s, j : j + wo * s : s] += gcols[:, :, i, j]
        p = self.padding
        gx = gxp[:, :, p:-p, p:-p] if p > 0 else gxp
        return gx[0] if squeeze else gx


class BatchNorm(Module):
    """Batch normalization over every axis except ``channel_axis``.

    Covers the conv (B,C,H,W) case and the per-site sparse (N,C) case.
    Running stats use momentum 0.1 and are consulted only in eval mode.
    """

    def __init__(self, num_channels, channel_axis=1, eps=1e-5, momentum=0.1):
        super().__init__()
        if eps <= 0:
            raise ContractViolation("epsilon must be positive")
        self.num_channels = num_channels
        self.channel_axis = channel_axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_channels), "gamma")
        self.beta = Parameter(np.zeros(num_channels), "beta")
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self._cache = None

    def _axes(self, ndim):
        ax = self.channel_axis % ndim
        return ax, tuple(i for i in range(ndim) if i != ax)

    def _bshape(self, ndim, ax):
        shape = [1] * ndim
        shape[ax] = self.num_channels
        return tuple(shape)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        ax, reduce_axes = self._axes(x.ndim)
        if x.shape[ax] != self.num_channels:
            raise ContractViolation(
                f"channel axis has size {x.shape[ax]}, expected {self.num_channels}"
            )
        bshape = self._bshape(x.ndim, ax)
        if self.training:
            mu = x.mean(axis=reduce_axes)
            var = x.var(axis=reduce_axes)
            self.running_mean += self.momentum * (mu - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mu, var = self.running_mean, self.running_var
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bshape)) * ivar.reshape(bshape)
        out = self.gamma.data.reshape(bshape) * xhat + self.beta.data.reshape(bshape)
        self._cache = (xhat, ivar, reduce_axes, bshape)
        return out

    def backward(self, gout):
        xhat, ivar, reduce_axes, bshape = self._cache
        gout = np.asarray(gout, dtype=np.float64)
        self.gamma.add_grad((gout * xhat).sum(axis=reduce_axes))
        self.beta.add_grad(gout.sum(axis=reduce_axes))
        gxhat = gout * self.gamma.data.reshape(bshape)
        if not self.training:
            return gxhat * ivar.reshape(bshape)
        m = 1
        for a in reduce_axes:
            m *= gout.shape[a]
        # standard batch-norm input gradient with batch statistics in the graph
        sum_g = gxhat.sum(axis=reduce_axes).reshape(bshape)
        sum_gx = (gxhat * xhat).sum(axis=reduce_axes).reshape(bshape)
        return (ivar.reshape(bshape) / m) * (m * gxhat - sum_g - xhat * sum_gx)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0  # subgradient at 0 defined as 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gout):
        return np.asarray(gout) * self._mask


class Sigmoid(Module):
    def __init__(self):
        super().__init__()
        self._out = None

    def forward(self, x):
        out = 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
        self._out = out
        return out

    def backward(self, gout):
        return np.asarray(gout) * self._out * (1.0 - self._out)


class UpsampleNearest2x(Module):
    """Each element replicated into a 2x2 block; backward sums the block grads."""

    def __init__(self):
        super().__init__()
        self._squeeze = False

    def forward(self, x):
        x, self._squeeze = _as_batched(x)
        out = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
        return out[0] if self._squeeze else out

    def backward(self, gout):
        gout = np.asarray(gout, dtype=np.float64)
        if self._squeeze:
            gout = gout[None]
        b, c, h2, w2 = gout.shape
        gx = gout.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return gx[0] if self._squeeze else gx


class Linear(Module):
    """Site-wise affine map on (N, in_features) arrays (the 1x1 classifier)."""

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(kaiming_uniform((in_features, out_features), in_features, rng), "weight")
        self.bias = Parameter(np.zeros(out_features), "bias")
        self._x = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, gout):
        gout = np.asarray(gout, dtype=np.float64)
        self.weight.add_grad(self._x.T @ gout)
        self.bias.add_grad(gout.sum(axis=0))
        return gout @ self.weight.data.T


class Adam(Module):
    """Textbook Adam with bias correction. Aborts on non-finite gradients."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__()
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise GradientError(f"non-finite gradient in parameter {p.name!r}; step aborted")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_check(loss_fn, params, eps=1e-5):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic, return a scalar, and populate ``grad``
    on every parameter in ``params`` (forward + backward). Returns the max
    relative error, with the finite difference taken as ground truth.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractViolation("eps must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            for q in params:
                q.zero_grad()
            lp = float(loss_fn())
            flat[idx] = orig - eps
            for q in params:
                q.zero_grad()
            lm = float(loss_fn())
            flat[idx] = orig
            num = (lp - lm) / (2.0 * eps)
            err = abs(a.ravel()[idx] - num) / max(abs(num), 1e-4)
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + flat archive of named float64 tensors.
# ---------------------------------------------------------------------------

_MAGIC = b"RSEGCKP1"
CHECKPOINT_VERSION = 1


def state_fingerprint(state):
    """Architecture fingerprint: hash of sorted entry names and shapes."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(state[name].shape)).encode("ascii"))
    return h.hexdigest()


def save_checkpoint(path, state, meta=None):
    meta = dict(meta or {})
    meta.setdefault("format_version", CHECKPOINT_VERSION)
    meta["fingerprint"] = state_fingerprint(state)
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(state)))
        for name in sorted(state):
            # asarray keeps 0-d entries 0-d (ascontiguousarray would promote)
            arr = np.asarray(state[name], dtype="<f8", order="C")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    def read(fh, n, what):
        b = fh.read(n)
        if len(b) != n:
            raise FormatError(f"truncated checkpoint {path}: while reading {what}")
        return b

    with open(path, "rb") as fh:
        if read(fh, len(_MAGIC), "magic") != _MAGIC:
            raise FormatError(f"{path} is not a radseg checkpoint")
        (hlen,) = struct.unpack("<Q", read(fh, 8, "header length"))
        meta = json.loads(read(fh, hlen, "header").decode("utf-8"))
        (n_entries,) = struct.unpack("<Q", read(fh, 8, "entry count"))
        state = {}
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<Q", read(fh, 8, "name length"))
            name = read(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<Q", read(fh, 8, "ndim"))
            shape = struct.unpack(f"<{ndim}Q", read(fh, 8 * ndim, "shape"))
            count = int(np.prod(shape)) if ndim else 1
            payload = read(fh, 8 * count, f"payload of {name}")
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if meta.get("fingerprint") != state_fingerprint(state):
        raise FormatError(f"{path}: fingerprint mismatch (corrupt or edited archive)")
    return state, meta
