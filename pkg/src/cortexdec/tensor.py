"""Dense-tensor reverse-mode autodiff engine.

Implements exactly the layer set the decoder needs: 1-D convolution
(cross-correlation semantics), 1-D batch normalization, ELU, inverted
dropout, 1-D max pooling, affine (linear) maps, row softmax and MSE loss.

The graph is held implicitly by the tensors: every op output keeps a
reference to its parents and a closure that routes the incoming gradient
to them. ``Tensor.backward()`` topologically sorts that DAG and runs the
closures in reverse. A graph together with its tensors is a single-owner
unit; distinct units (e.g. per-fold training jobs) are independent.

Arrays are numpy, row-major. Parameters are normally float32; gradient
checks run the same code path in float64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, DimensionError

__all__ = [
    "Tensor",
    "BatchNormState",
    "conv1d",
    "batchnorm1d",
    "elu",
    "dropout",
    "maxpool1d",
    "linear",
    "softmax",
    "mse_loss",
    "flatten",
    "zero_grad",
    "check_gradients",
    "write_checkpoint",
    "read_checkpoint",
]

CHECKPOINT_MAGIC = b"CDK1"


class Tensor:
    """A dense n-d array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Visits every reachable node exactly once and accumulates into
        ``.grad`` of all requires_grad tensors. Running twice on the same
        root without rebuilding the graph is an error.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this graph; rebuild it before calling again")
        self._backward_ran = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.data.shape != other.data.shape:
            raise DimensionError(f"add shape mismatch: {self.data.shape} vs {other.data.shape}")
        out = _node(self.data + other.data, (self, other))

        def back(gy: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(gy)
            if other.requires_grad:
                other._accumulate(gy)

        out._backward_fn = back
        return out

    def sum(self) -> "Tensor":
        out = _node(self.data.sum(), (self,))

        def back(gy: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(np.broadcast_to(gy, self.data.shape))

        out._backward_fn = back
        return out

    def reshape(self, *shape: int) -> "Tensor":
        out = _node(self.data.reshape(*shape), (self,))

        def back(gy: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(gy.reshape(self.data.shape))

        out._backward_fn = back
        return out


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Output tensor wired into the graph iff any parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# layers


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 1-D cross-correlation (no kernel flip) with zero padding.

    x: (batch, in_ch, T), weight: (out_ch, in_ch, K), bias: (out_ch,).
    Output length is floor((T + 2*padding - K) / stride) + 1.
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and weight, got {x.data.shape} and {weight.data.shape}")
    B, C, T = x.data.shape
    F, Cw, K = weight.data.shape
    if C != Cw:
        raise DimensionError(f"conv1d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (F,):
        raise DimensionError(f"conv1d bias must have shape ({F},), got {bias.data.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv1d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    t_out = (T + 2 * padding - K) // stride + 1
    if K > T + 2 * padding or t_out < 1:
        raise DimensionError(f"kernel {K} too large for input length {T} with padding {padding}")

    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
                              if padding else x.data)
    w2 = weight.data.reshape(F, C * K)
    y2 = w2 @ _im2col(xp, K, stride, t_out)  # (F, B*t_out)
    y = y2.reshape(F, B, t_out).transpose(1, 0, 2).copy()
    y += bias.data[None, :, None]

    out = _node(y, (x, weight, bias))

    def back(gy: np.ndarray) -> None:
        gy2 = gy.transpose(1, 0, 2).reshape(F, B * t_out)
        if weight.requires_grad:
            gw = gy2 @ _im2col(xp, K, stride, t_out).T
            weight._accumulate(gw.reshape(F, C, K))
        if bias.requires_grad:
            bias._accumulate(gy.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (w2.T @ gy2).reshape(C, K, B, t_out)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, :, k : k + stride * t_out : stride] += dcols[:, k].transpose(1, 0, 2)
            x._accumulate(dxp[:, :, padding : padding + T] if padding else dxp)

    out._backward_fn = back
    return out


def _im2col(xp: np.ndarray, K: int, stride: int, t_out: int) -> np.ndarray:
    """(B, C, Tp) -> (C*K, B*t_out) patch matrix with cache-friendly copies."""
    B, C, _ = xp.shape
    sB, sC, sT = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(C, K, B, t_out), strides=(sC, sT, sB, sT * stride))
    return view.reshape(C * K, B * t_out)


@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        if epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {epsilon}")
        if not 0 < momentum < 1:
            raise ConfigError(f"batchnorm momentum must be in (0,1), got {momentum}")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm1d(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization over (batch, time), then gamma*xhat + beta.

    Train mode uses batch statistics (biased variance) and updates the
    running statistics as running <- (1-momentum)*running + momentum*batch.
    Eval mode normalizes with the running statistics.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm1d expects (batch, ch, T), got {x.data.shape}")
    B, C, T = x.data.shape
    if state.gamma.data.shape != (C,):
        raise DimensionError(f"batchnorm1d channel mismatch: input has {C}, state has {state.gamma.data.shape}")
    gamma, beta = state.gamma, state.beta
    eps = state.epsilon

    if state.training:
        if B * T < 2:
            raise ConfigError("batchnorm1d train mode needs at least 2 elements per channel")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[:, None]) * istd[:, None]
        y = gamma.data[:, None] * xhat + beta.data[:, None]
        out = _node(y, (x, gamma, beta))

        def back_train(gy: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma._accumulate((gy * xhat).sum(axis=(0, 2)))
            if beta.requires_grad:
                beta._accumulate(gy.sum(axis=(0, 2)))
            if x.requires_grad:
                n = B * T
                dxhat = gy * gamma.data[:, None]
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                dx = (istd[:, None] / n) * (n * dxhat - s1 - xhat * s2)
                x._accumulate(dx)

        out._backward_fn = back_train
        return out

    istd = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean[:, None]) * istd[:, None]
    y = gamma.data[:, None] * xhat + beta.data[:, None]
    out = _node(y, (x, gamma, beta))

    def back_eval(gy: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((gy * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(gy.sum(axis=(0, 2)))
        if x.requires_grad:
            x._accumulate(gy * (gamma.data * istd)[:, None])

    out._backward_fn = back_eval
    return out


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x > 0, alpha*(exp(x)-1) otherwise."""
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * np.expm1(x.data))
    out = _node(y, (x,))

    def back(gy: np.ndarray) -> None:
        if x.requires_grad:
            # derivative on the negative side is alpha*exp(x) = y + alpha
            x._accumulate(np.where(pos, gy, gy * (y + alpha)))

    out._backward_fn = back
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode and p == 0 are the identity (the input tensor is returned
    unchanged). The forward mask is reused on backward.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode requires a seeded generator")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - p))
    y = x.data * keep * scale
    out = _node(y, (x,))

    def back(gy: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(gy * keep * scale)

    out._backward_fn = back
    return out


def maxpool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Windowed maximum along time; gradient goes to the first argmax."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d expects (batch, ch, T), got {x.data.shape}")
    if kernel < 1 or stride < 1:
        raise ConfigError(f"maxpool1d needs kernel >= 1 and stride >= 1, got {kernel}, {stride}")
    B, C, T = x.data.shape
    if kernel > T:
        raise DimensionError(f"maxpool1d kernel {kernel} exceeds input length {T}")
    t_out = (T - kernel) // stride + 1

    if stride == kernel:
        win = x.data[:, :, : t_out * kernel].reshape(B, C, t_out, kernel)
    else:
        win = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride, :]
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    out = _node(y, (x,))

    def back(gy: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        if stride == kernel:
            gwin = np.zeros((B, C, t_out, kernel), dtype=x.data.dtype)
            np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=3)
            dx[:, :, : t_out * kernel] = gwin.reshape(B, C, t_out * kernel)
        else:
            pos = np.arange(t_out) * stride + idx
            bi = np.arange(B)[:, None, None]
            ci = np.arange(C)[None, :, None]
            np.add.at(dx, (bi, ci, pos), gy)
        x._accumulate(dx)

    out._backward_fn = back
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias with x (batch, in_f), weight (out_f, in_f)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear expects 2-d input and weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(f"linear feature mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise DimensionError(f"linear bias must have shape ({weight.data.shape[0]},), got {bias.data.shape}")
    y = x.data @ weight.data.T + bias.data
    out = _node(y, (x, weight, bias))

    def back(gy: np.ndarray) -> None:
        if weight.requires_grad:
            weight._accumulate(gy.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(gy.sum(axis=0))
        if x.requires_grad:
            x._accumulate(gy @ weight.data)

    out._backward_fn = back
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax expects (batch, n), got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _node(p, (x,))

    def back(gy: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(p * (gy - (gy * p).sum(axis=1, keepdims=True)))

    out._backward_fn = back
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2, as a scalar tensor."""
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = _node(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), (pred, target))
    inv_n = 1.0 / diff.size

    def back(gy: np.ndarray) -> None:
        g = (2.0 * inv_n) * diff * gy
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    out._backward_fn = back
    return out


def flatten(x: Tensor) -> Tensor:
    """(batch, ...) -> (batch, features)."""
    return x.reshape(x.data.shape[0], -1)


# ---------------------------------------------------------------------------
# verification


def check_gradients(build_loss: Callable[[], Tensor], wiggle: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the scalar loss from scratch on every call
    (reading the current ``.data`` of the tensors in ``wiggle``); any
    randomness inside must be re-seeded identically per call.
    """
    for t in wiggle:
        if t.data.dtype != np.float64:
            raise ConfigError("check_gradients requires float64 inputs")
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wiggle]

    worst = 0.0
    for t, a in zip(wiggle, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss().data)
            flat[i] = orig - eps
            dn = float(build_loss().data)
            flat[i] = orig
            num = (up - dn) / (2.0 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container ("CDK1")


def write_checkpoint(path: str | os.PathLike, params: Sequence[tuple[str, np.ndarray]],
                     config_text: str | None = None) -> None:
    """Write named float32 arrays; optionally append a config-text record.

    Layout: magic "CDK1", then per array: name length (u16 LE), UTF-8 name,
    rank (u8), dims (u32 LE each), raw float32 LE values. A trailing config
    record is marked by a zero name length followed by u32 text length and
    UTF-8 text. Written atomically (temp file + rename).
    """
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in params:
            raw = name.encode("utf-8")
            if not raw:
                raise ConfigError("checkpoint parameter names must be non-empty")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())
        if config_text is not None:
            text = config_text.encode("utf-8")
            f.write(struct.pack("<H", 0))
            f.write(struct.pack("<I", len(text)))
            f.write(text)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], str | None]:
    """Read a CDK1 file back into {name: float32 array} plus config text."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4
    params: dict[str, np.ndarray] = {}
    config_text: str | None = None

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError(f"{path}: truncated {what}: wanted {n} bytes at offset {pos}, have {len(blob) - pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        if name_len == 0:
            (text_len,) = struct.unpack("<I", take(4, "config length"))
            config_text = take(text_len, "config text").decode("utf-8")
            if pos != len(blob):
                raise DataFormatError(f"{path}: {len(blob) - pos} trailing bytes after config record")
            break
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        params[name] = data.copy()
    return params, config_text
