"""Hand-differentiated operators on channels-last arrays.

Every forward op has a matching ``*_backward``. Feature maps are laid out
``(H, W, C)``; kernels are ``(out_ch, in_ch, kh, kw)``. Ops preserve the
input dtype so the same code runs in float32 for the pipeline and in
float64 for finite-difference checks.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_MAGIC = "# bevfuse-params v1"


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"kernel must be (out, in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, out_ch: int, in_ch: int, k: int, rng: np.random.Generator,
             dtype=np.float32, gain: float = 1.0) -> "ConvParams":
        """Uniform fan-in init; weight bound is ``gain / sqrt(fan_in)``.

        gain=sqrt(3) preserves activation variance through a linear layer,
        sqrt(6) through conv + ReLU.
        """
        fan_in = in_ch * k * k
        bound = gain / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        b = rng.uniform(-1.0, 1.0, size=out_ch) / np.sqrt(fan_in)
        return cls(w.astype(dtype), b.astype(dtype))

    @classmethod
    def zeros(cls, out_ch: int, in_ch: int, k: int, dtype=np.float32) -> "ConvParams":
        return cls(np.zeros((out_ch, in_ch, k, k), dtype), np.zeros(out_ch, dtype))

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    # (H, W, C, k, k) -> rows ordered (c, i, j) to match weight.reshape(out, -1)
    win = sliding_window_view(xp, (k, k), axis=(0, 1))
    return win.reshape(h * w, c * k * k)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1 cross-correlation with zero 'same' padding, plus bias."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects (H, W, C), got {x.shape}")
    if x.shape[2] != p.in_ch:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {p.in_ch}")
    h, w, _ = x.shape
    cols = _im2col(x, p.k)
    y = cols @ p.weight.reshape(p.out_ch, -1).T.astype(x.dtype, copy=False)
    y += p.bias.astype(x.dtype, copy=False)
    return check_finite(y.reshape(h, w, p.out_ch), "conv2d output")


def conv2d_backward(x: np.ndarray, p: ConvParams, gy: np.ndarray) -> tuple[np.ndarray, ConvParams]:
    """Gradients of conv2d w.r.t. input and params."""
    h, w, _ = x.shape
    if gy.shape != (h, w, p.out_ch):
        raise ShapeError(f"conv2d_backward: upstream {gy.shape} != {(h, w, p.out_ch)}")
    gflat = gy.reshape(h * w, p.out_ch)
    gw = (gflat.T @ _im2col(x, p.k)).reshape(p.weight.shape)
    gb = gflat.sum(axis=0)
    # input grad is a 'same' correlation with the flipped, transposed kernel
    flipped = np.ascontiguousarray(p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).astype(gy.dtype, copy=False)
    gx = (_im2col(gy, p.k) @ flipped.reshape(p.in_ch, -1).T).reshape(h, w, p.in_ch)
    return gx, ConvParams(gw, gb)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output*."""
    return gy * y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, gy, 0).astype(gy.dtype, copy=False)


_POINTWISE: dict[str, Callable[[np.ndarray], np.ndarray]] = {"sigmoid": sigmoid, "relu": relu}


def pointwise(x: np.ndarray, fn: str) -> np.ndarray:
    try:
        f = _POINTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}") from None
    return check_finite(f(x), fn)


def pointwise_backward(x: np.ndarray, fn: str, gy: np.ndarray) -> np.ndarray:
    if fn == "sigmoid":
        return sigmoid_backward(sigmoid(x), gy)
    if fn == "relu":
        return relu_backward(x, gy)
    raise ValueError(f"unknown pointwise function {fn!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return (x.sum(axis=(0, 1)) / (h * w)).astype(x.dtype, copy=False).reshape(1, 1, c)


def global_avg_pool_backward(x_shape: tuple[int, int, int], gy: np.ndarray) -> np.ndarray:
    h, w, c = x_shape
    return np.broadcast_to(gy.reshape(1, 1, c) / (h * w), (h, w, c)).astype(gy.dtype)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: spatial shapes {a.shape[:-1]} and {b.shape[:-1]} differ")
    return np.concatenate([a, b], axis=-1)


def split_channels(y: np.ndarray, ca: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of concat_channels; also its backward."""
    return y[..., :ca], y[..., ca:]


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Takes the softmax *output*."""
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def _conv_bw(saved, g):
    x, p = saved
    gx, gp = conv2d_backward(x, p, g)
    return {"x": gx, "weight": gp.weight, "bias": gp.bias}


BACKWARD: Mapping[str, Callable] = {
    "conv2d": _conv_bw,
    "sigmoid": lambda saved, g: {"x": pointwise_backward(saved[0], "sigmoid", g)},
    "relu": lambda saved, g: {"x": pointwise_backward(saved[0], "relu", g)},
    "global_avg_pool": lambda saved, g: {"x": global_avg_pool_backward(saved[0].shape, g)},
    "concat_channels": lambda saved, g: dict(zip(("a", "b"), split_channels(g, saved[0].shape[-1]))),
    "softmax_lastaxis": lambda saved, g: {"x": softmax_backward(softmax_lastaxis(saved[0]), g)},
}


def backward(op: str, saved: tuple, grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``op`` given the forward inputs ``saved`` and the upstream grad."""
    try:
        fn = BACKWARD[op]
    except KeyError:
        raise ValueError(f"no backward registered for {op!r}") from None
    return fn(saved, grad)


# ---------------------------------------------------------------- serialization

def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Text header of ``name shape`` lines, then little-endian float32 data in order."""
    lines = [_MAGIC, str(len(params))]
    for name, arr in params.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        lines.append(f"{name} {'x'.join(str(d) for d in arr.shape) or 'scalar'}")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for arr in params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        s = raw[pos:end].decode("ascii")
        pos = end + 1
        return s

    if line() != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    n = int(line())
    specs = []
    for _ in range(n):
        name, shape = line().split(" ")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        specs.append((name, dims))
    out = {}
    for name, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += 4 * count
        out[name] = arr.reshape(dims)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
