"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Only the operations needed by the fixed LISA and weight-CNN architectures are
provided. Every op builds a node whose ``_backward`` closure pushes the
upstream gradient into its parents; ``Tensor.backward`` walks the graph once
in reverse topological order.
"""
from __future__ import annotations

import itertools
import json
import struct
from pathlib import Path

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NumericInstabilityError(FloatingPointError):
    pass


class GraphReusedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "node_id", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = None
        self._consumed = False
        self.node_id = next(_ids)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphReusedError("backward() already called on this graph; rebuild the forward pass")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node._consumed = True
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic used when composing losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __mul__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("tensor*tensor is not supported; use scale() with a float")
        return scale(self, float(k))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data, parents, op, backward):
    out = Tensor(data, _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b):
    b = _as_tensor(b, a)
    if b.data.ndim == 0 or b.data.shape == a.data.shape:
        pass
    elif a.data.ndim == 0:
        a, b = b, a
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        a._accum(g)
        b._accum(g.sum() if b.data.ndim == 0 and g.ndim else g)

    return _node(a.data + b.data, (a, b), "add", backward)


def scale(x, k):
    def backward(g):
        x._accum(g * k)

    return _node(x.data * x.data.dtype.type(k), (x,), "scale", backward)


def reshape(x, shape):
    def backward(g):
        x._accum(g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def take_rows(x, idx):
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _node(x.data[idx], (x,), "take_rows", backward)


def column(x, j):
    """Column j of a 2-D tensor as a 1-D tensor."""

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, j] = g
        x._accum(full)

    return _node(x.data[:, j].copy(), (x,), "column", backward)


def conv2d(x, kernel, bias, stride=1, pad=0):
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    # channels-last im2col: every copied run is a contiguous channel vector
    xh = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else np.ascontiguousarray(xh)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((n, ho, wo, kh * kw * c), dtype=x.data.dtype)
    for t, (i, j) in enumerate(taps):
        cols[..., t * c:(t + 1) * c] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, -1)
    kmat = kernel.data.transpose(2, 3, 1, 0).reshape(-1, k)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
        if kernel.requires_grad:
            kernel._accum((cols.T @ g2).reshape(kh, kw, c, k).transpose(3, 2, 0, 1))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh * kw * c)
            dxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., t * c:(t + 1) * c]
            dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
            x._accum(dx.transpose(0, 3, 1, 2))

    return _node(np.ascontiguousarray(out), (x, kernel, bias), "conv2d", backward)


def linear(x, weight, bias):
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot map input {x.shape} through weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")

    def backward(g):
        x._accum(g @ weight.data.T)
        weight._accum(x.data.T @ g)
        bias._accum(g.sum(axis=0))

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), "linear", backward)


def grl(x, lam=1.0):
    """Gradient reversal: identity forward, gradient times -lam backward."""
    if lam <= 0:
        raise ValueError("grl lambda must be positive")

    def backward(g):
        x._accum(-lam * g)

    return _node(x.data, (x,), "grl", backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return _node(x.data * mask, (x,), "relu", backward)


def leaky_relu(x, slope=0.01):
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def backward(g):
        x._accum(g * factor)

    return _node(x.data * factor, (x,), "leaky_relu", backward)


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accum(g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", backward)


def _log_softmax(a):
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(x):
    p = np.exp(_log_softmax(x.data))

    def backward(g):
        x._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _node(p, (x,), "softmax", backward)


def sum(x):  # noqa: A001 - mirrors the op name
    def backward(g):
        x._accum(np.broadcast_to(g, x.data.shape))

    return _node(x.data.sum(), (x,), "sum", backward)


def mean(x):
    n = x.data.size

    def backward(g):
        x._accum(np.broadcast_to(g / n, x.data.shape))

    return _node(x.data.mean(), (x,), "mean", backward)


def frobenius_sq(a, b):
    """Sum of squared element differences ``||a - b||_F^2``."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_sq: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data

    def backward(g):
        a._accum(2.0 * g * d)
        b._accum(-2.0 * g * d)

    return _node((d * d).sum(), (a, b), "frobenius_sq", backward)


def mse(a, b):
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    n = a.data.size
    d = a.data - b.data

    def backward(g):
        a._accum(2.0 * g * d / n)
        b._accum(-2.0 * g * d / n)

    return _node((d * d).mean(), (a, b), "mse", backward)


def cross_entropy(logits, target):
    """Mean cross-entropy of row logits [N, K] against integer classes [N]."""
    target = np.asarray(target, dtype=np.intp)
    if logits.data.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    k = logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"cross_entropy: class index outside [0, {k})")
    logp = _log_softmax(logits.data)
    n = target.size
    rows = np.arange(n)

    def backward(g):
        d = np.exp(logp)
        d[rows, target] -= 1.0
        logits._accum(g * d / n)

    return _node(-logp[rows, target].mean(), (logits,), "cross_entropy", backward)


def pair_sq_dist(x, weights):
    """Sum over i<j of ``weights[i, j] * ||x_i - x_j||^2`` for rows of a 2-D tensor.

    ``weights`` must be symmetric; its diagonal is ignored.
    """
    w = np.array(weights, dtype=x.data.dtype)
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    xd = x.data
    sq = (xd * xd).sum(axis=1)
    value = deg @ sq - np.einsum("ij,ij->", w, xd @ xd.T)

    def backward(g):
        x._accum(2.0 * g * (deg[:, None] * xd - w @ xd))

    return _node(np.asarray(value, dtype=xd.dtype), (x,), "pair_sq_dist", backward)


class ParamStore:
    """Named trainable leaves plus the seed used to initialise them."""

    def __init__(self, seed=0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.meta: dict = {}
        self._rng = np.random.default_rng(self.seed)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name, array):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def kaiming(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def group(self, prefix):
        return [n for n in self.params if n.startswith(prefix)]

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.params.items()}

    def save(self, path):
        save_arrays(path, {n: t.data for n, t in self.params.items()}, {"seed": self.seed, **self.meta})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        store = cls(seed=meta.pop("seed", 0))
        store.meta = meta
        for n, a in arrays.items():
            store.params[n] = Tensor(a, requires_grad=True)
        if arrays:
            store.dtype = next(iter(arrays.values())).dtype
        return store


MAGIC = b"SINV1"


class CheckpointError(ValueError):
    pass


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_arrays(path, arrays, meta=None):
    """Write the SINV1 container: magic, u64 header length, JSON index, raw payload."""
    index, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index, "meta": meta or {}, "payload_bytes": offset},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path):
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a SINV1 checkpoint")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = blob[pos + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    arrays = {}
    for ent in header["tensors"]:
        dt = _DTYPES[ent["dtype"]]
        count = int(np.prod(ent["shape"], dtype=np.int64))
        arrays[ent["name"]] = np.frombuffer(payload, dtype=dt, count=count, offset=ent["offset"]).reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return arrays, header["meta"]


class Adam:
    """Adam with bias correction; each parameter group carries its own learning rate."""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        # groups: list of (list[Tensor], lr)
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        seen = set()
        for ps, _ in self.groups:
            for p in ps:
                if id(p) in seen:
                    raise ValueError("parameter appears in more than one optimizer group")
                seen.add(id(p))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}

    def step(self):
        for ps, _ in self.groups:
            for p in ps:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericInstabilityError("non-finite gradient encountered; aborting step")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for ps, lr in self.groups:
            step = lr / c1
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                np.multiply(g, g, out=g)
                g *= 1.0 - self.beta2
                v += g
                # g is reused as scratch for the denominator
                np.sqrt(v, out=g)
                g *= 1.0 / np.sqrt(c2)
                g += self.eps
                np.divide(m, g, out=g)
                g *= step
                p.data -= g
                p.grad = None

    def zero_grad(self):
        for ps, _ in self.groups:
            for p in ps:
                p.zero_grad()
