"""A small dense tensor type with a tape-based reverse-mode gradient engine.

Only the operations used by the line-prior models are provided. There is no
broadcasting and no higher-order differentiation. Images are laid out
``[H, W, C]`` and Hough maps ``[n_rho, n_theta, C]``, row-major.
"""
from __future__ import annotations

import contextlib
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from htprior.errors import ConfigurationError, LoadError, UsageError

DEFAULT_DTYPE = np.float32
_CHECK_FINITE = os.environ.get("HTPRIOR_DEBUG") == "1"


class Tensor:
    """Dense array of reals plus an optional gradient buffer.

    ``data`` is a contiguous numpy array of rank at most 4. Tensors produced
    by an op are never modified in place; only parameters change, and only
    inside :func:`adam_step`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ConfigurationError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """A named learnable tensor with its Adam moment buffers."""

    name: str
    value: Tensor
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.value.requires_grad = True
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)

    @classmethod
    def from_array(cls, name: str, array, dtype=DEFAULT_DTYPE) -> "Parameter":
        return cls(name, Tensor(np.array(array, dtype=dtype), requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    @property
    def size(self) -> int:
        return self.value.data.size


# ---------------------------------------------------------------------------
# Tape

@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def reset(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


_tape = _Tape()


def reset_tape() -> None:
    """Drop every recorded op, e.g. after a forward pass that is not backpropagated."""
    _tape.reset()


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording them."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record how to backpropagate into ``inputs``.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    if _CHECK_FINITE and all(np.isfinite(t.data).all() for t in inputs):
        assert np.isfinite(out_data).all(), "non-finite value produced from finite inputs"
    needs = _tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = _Node(out, tuple(inputs), backward)
        out._node = node
        _tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep over the tape from a scalar ``loss``.

    Leaf tensors that require gradients (parameters) get ``grad`` populated,
    accumulating into any gradient already there. The tape is cleared.
    """
    if loss._node is None or loss.data.size != 1:
        raise UsageError("backward() needs a scalar produced by a recorded forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
    finally:
        _tape.reset()


# ---------------------------------------------------------------------------
# Ops

def _same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise ConfigurationError(f"mixed dtypes {sorted(map(str, dtypes))}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2D cross-correlation of ``x`` [H,W,Cin] with ``kernel`` [kh,kw,Cin,Cout]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ConfigurationError("conv2d expects input [H,W,C] and kernel [kh,kw,Cin,Cout]")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise ConfigurationError(f"conv2d kernel expects {cin} input channels, input has {x.shape[2]}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias must have shape ({cout},)")
    _same_dtype(x, kernel, *([bias] if bias is not None else []))
    H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    w = kernel.data
    out = np.zeros((H, W, cout), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out += xp[dy:dy + H, dx:dx + W] @ w[dy, dx]
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gp[dy:dy + H, dx:dx + W] += g @ w[dy, dx].T
            gx = gp[ph:ph + H, pw:pw + W]
        gw = None
        if kernel.requires_grad:
            gw = np.empty_like(w)
            g2 = g.reshape(-1, cout)
            for dy in range(kh):
                for dx in range(kw):
                    gw[dy, dx] = xp[dy:dy + H, dx:dx + W].reshape(-1, cin).T @ g2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    inputs = [x, kernel] + ([bias] if bias is not None else [])
    return record(out, inputs, grad_fn)


def conv1d_rho(x: Tensor, kernel: Tensor, mode: str = "dense", bias: Tensor | None = None) -> Tensor:
    """Same-padded 1D convolution along the offset axis of a Hough map [n_rho, n_theta, C].

    ``dense`` kernels are [k, Cin, Cout]; ``channelwise`` kernels are
    [k, 1, C] and filter each channel independently.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ConfigurationError("conv1d_rho expects input [R,T,C] and kernel [k,Cin,Cout]")
    k, kin, kout = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_rho filter length must be odd, got {k}")
    C = x.shape[2]
    if mode == "dense":
        if kin != C:
            raise ConfigurationError(f"conv1d_rho kernel expects {kin} input channels, input has {C}")
    elif mode == "channelwise":
        if kin != 1 or kout != C:
            raise ConfigurationError(f"channelwise kernel must be [k,1,{C}], got {list(kernel.shape)}")
    else:
        raise ConfigurationError(f"unknown conv1d_rho mode {mode!r}")
    if bias is not None and bias.shape != (kout,):
        raise ConfigurationError(f"conv1d_rho bias must have shape ({kout},)")
    _same_dtype(x, kernel, *([bias] if bias is not None else []))
    R = x.shape[0]
    p = k // 2
    xp = np.pad(x.data, ((p, p), (0, 0), (0, 0)))
    w = kernel.data
    out = np.zeros((R,) + x.shape[1:2] + (kout,), dtype=x.dtype)
    for j in range(k):
        if mode == "dense":
            out += xp[j:j + R] @ w[j]
        else:
            out += xp[j:j + R] * w[j, 0]
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[j:j + R] += g @ w[j].T if mode == "dense" else g * w[j, 0]
            gx = gp[p:p + R]
        if kernel.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                seg = xp[j:j + R]
                if mode == "dense":
                    gw[j] = seg.reshape(-1, kin).T @ g.reshape(-1, kout)
                else:
                    gw[j, 0] = (seg * g).sum(axis=(0, 1))
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 1))
        return gx, gw

    return record(out, [x, kernel] + ([bias] if bias is not None else []), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record(s, [x], lambda g: (g * s * (1 - s),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return record(a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ConfigurationError(f"concat spatial mismatch {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record(out, [a, b], lambda g: (g[..., :ca], g[..., ca:]))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a 1-element tensor."""
    return record(np.array(x.data.sum(), dtype=x.dtype), [x],
                  lambda g: (np.full_like(x.data, g.reshape(-1)[0]),))


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference."""
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype)
    n = diff.size
    loss = np.array((diff * diff).sum() / n, dtype=pred.dtype)
    return record(loss, [pred], lambda g: (g.reshape(-1)[0] * 2 * diff / n,))


BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    t = target.data.astype(pred.dtype)
    inside = (pred.data > BCE_EPS) & (pred.data < 1 - BCE_EPS)
    p = np.clip(pred.data, BCE_EPS, 1 - BCE_EPS)
    n = p.size
    loss = np.array(-(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / n, dtype=pred.dtype)

    def grad_fn(g):
        return (g.reshape(-1)[0] * inside * (p - t) / (p * (1 - p)) / n,)

    return record(loss, [pred], grad_fn)


# ---------------------------------------------------------------------------
# Optimizer

def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update with decoupled weight decay; zeroes the gradients afterwards."""
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise UsageError(f"adam_step before backward: parameter {p.name!r} has no gradient")
    for p in params:
        data = p.value.data
        g = p.value.grad.astype(data.dtype, copy=False)
        p.step += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** p.step)
        v_hat = p.adam_v / (1 - beta2 ** p.step)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * data
        p.value.data = (data - lr * update).astype(data.dtype)
        p.value.grad = np.zeros_like(data)


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"HTP1"


def save_checkpoint(path, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write named arrays as: magic, then per entry name/rank/extents/f32 data, little-endian."""
    chunks = [MAGIC]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`, preserving entry order."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if blob[:4] != MAGIC:
        raise LoadError(f"{path}: not an HTP1 checkpoint (bad magic {blob[:4]!r})")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise struct.error("truncated data")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
