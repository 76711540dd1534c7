"""Rank-4 tensor primitives with hand-written backward passes.

Every tensor is a plain ``numpy.ndarray`` laid out as (batch, channel, height,
width).  Differentiable operations come in two flavours:

* pure functions (``conv2d_forward`` / ``conv2d_backward`` and friends) that
  take and return arrays, and
* small layer objects (``Conv2d``, ``PReLU``) that own named parameters in a
  :class:`ParamStore`.  Calling a layer returns ``(output, ctx)``; passing the
  same ``ctx`` to ``layer.backward`` returns the input gradient and
  accumulates parameter gradients into the store.

The graph of the network is static, so there is no tape: callers keep the
``ctx`` records themselves and replay them in reverse.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


def check4(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name}: expected a rank-4 (B, C, H, W) array, got shape {shape}")
    return x


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    group: str | None = None

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamStore:
    """Ordered ``name -> Param`` map.

    Several names may point at the same :class:`Param` (see :meth:`share`);
    such entries carry a shared-group tag and are updated, saved and counted
    once.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, group: str | None = None) -> Param:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already registered")
        p = Param(np.ascontiguousarray(value, dtype=self.dtype), group=group)
        self._entries[name] = p
        return p

    def share(self, name: str, source: str, group: str) -> Param:
        """Register ``name`` as an alias of the existing entry ``source``."""
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already registered")
        p = self._entries[source]
        p.group = group
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._entries.items())

    def names(self) -> list[str]:
        return list(self._entries)

    def unique(self) -> list[tuple[str, Param]]:
        """Distinct parameters in insertion order, keyed by first name."""
        seen: set[int] = set()
        out = []
        for name, p in self._entries.items():
            if id(p) not in seen:
                seen.add(id(p))
                out.append((name, p))
        return out

    def aliases(self, name: str) -> list[str]:
        p = self._entries[name]
        return [n for n, q in self._entries.items() if q is p]

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters, shared tensors counted once."""
        return sum(p.size for n, p in self.unique_under(prefix))

    def unique_under(self, prefix: str) -> list[tuple[str, Param]]:
        seen: set[int] = set()
        out = []
        for name, p in self._entries.items():
            if name.startswith(prefix) and id(p) not in seen:
                seen.add(id(p))
                out.append((name, p))
        return out

    def zero_grad(self) -> None:
        for _, p in self.unique():
            p.grad[...] = 0.0

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for _, p in self.unique():
            p.value = p.value.astype(self.dtype)
            p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None
    transposed: bool = False

    def __post_init__(self) -> None:
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel_size // 2)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.stride == 1 and self.padding != self.kernel_size // 2:
            raise ValueError("stride-1 convolutions must be spatial-preserving")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        # transposed weights use the (in, out, k, k) layout of the adjoint conv
        if self.transposed:
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)


def _pad2(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, C*k*k, ho*wo) patch matrix (strided path)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


# Stride-1 k>1 convs use a "wide" layout: outputs are computed on rows of the
# padded width Wp, so every tap is one contiguous slice of the flattened
# padded image.  The k-1 junk columns per row are cropped afterwards (forward)
# or fed zero gradient (backward).


def _wide_cols(x: np.ndarray, k: int, pad: int):
    b, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = hp - k + 1
    # one spare row keeps the last tap's slice in bounds
    flat = np.zeros((b, c, (hp + 1) * wp), dtype=x.dtype)
    flat.reshape(b, c, hp + 1, wp)[:, :, pad : pad + h, pad : pad + w] = x
    n = ho * wp
    cols = np.empty((b, c, k * k, n), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[:, :, i * k + j] = flat[:, :, off : off + n]
    return cols.reshape(b, c * k * k, n), hp, wp


def _wide_col2im(gcols: np.ndarray, shape: tuple, k: int, pad: int, hp: int, wp: int) -> np.ndarray:
    b, c, h, w = shape
    ho = hp - k + 1
    n = ho * wp
    gcols = gcols.reshape(b, c, k * k, n)
    flat = np.zeros((b, c, (hp + 1) * wp), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            flat[:, :, off : off + n] += gcols[:, :, i * k + j]
    return np.ascontiguousarray(flat.reshape(b, c, hp + 1, wp)[:, :, pad : pad + h, pad : pad + w])


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> None:
    check4(x, "conv input")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight: expected {spec.weight_shape}, got {weight.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input: expected {spec.in_channels} channels, got {x.shape[1]}")


def _conv_direct(x, weight, bias, k, stride, pad):
    """Forward conv; returns ``(y, rec)`` where ``rec`` feeds :func:`_conv_backward_rec`."""
    b, c, h, w = x.shape
    co = weight.shape[0]
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    w2 = weight.reshape(co, -1)
    if k == 1 and stride == 1:
        cols = x.reshape(b, c, h * w)
        rec = ("1x1", cols, x.shape, ho, wo, None)
        y = np.matmul(w2, cols)
    elif stride == 1:
        cols, hp, wp = _wide_cols(x, k, pad)
        rec = ("wide", cols, x.shape, ho, wo, (k, pad, hp, wp))
        y = np.matmul(w2, cols).reshape(b, co, ho, wp)[:, :, :, :wo]
    else:
        cols = _im2col(_pad2(x, pad), k, stride, ho, wo)
        rec = ("strided", cols, x.shape, ho, wo, (k, stride, pad))
        y = np.matmul(w2, cols)
    y = y.reshape(b, co, ho, wo)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y, rec


def _conv_backward_rec(gy, rec, weight):
    kind, cols, in_shape, ho, wo, meta = rec
    b, co = gy.shape[:2]
    if kind == "wide":
        k, pad, hp, wp = meta
        gfull = np.zeros((b, co, ho, wp), dtype=gy.dtype)
        gfull[:, :, :, :wo] = gy
        g2 = gfull.reshape(b, co, ho * wp)
    else:
        g2 = gy.reshape(b, co, ho * wo)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gb = gy.sum(axis=(0, 2, 3))
    gcols = np.matmul(weight.reshape(co, -1).T, g2)
    if kind == "1x1":
        gx = gcols.reshape(in_shape)
    elif kind == "wide":
        gx = _wide_col2im(gcols, in_shape, k, pad, hp, wp)
    else:
        k, stride, pad = meta
        gx = _col2im(gcols, in_shape, k, stride, pad, ho, wo)
    return gx, gw, gb


def _transposed_as_conv(weight: np.ndarray) -> np.ndarray:
    # adjoint of a strided conv == stride-1 conv of the dilated input with the
    # spatially flipped, in/out-swapped kernel
    return np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _transposed_pads(spec: ConvSpec) -> tuple[int, int]:
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    lo = k - 1 - p
    # output padding picked so that the spatial dims scale exactly by stride
    out_pad = s - 1 if s > 1 else 0
    return lo, lo + out_pad


def _transposed_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    lo, hi = _transposed_pads(spec)
    b, c, h, w = x.shape
    s = spec.stride
    out = np.zeros((b, c, (h - 1) * s + 1 + lo + hi, (w - 1) * s + 1 + lo + hi), dtype=x.dtype)
    out[:, :, lo : lo + (h - 1) * s + 1 : s, lo : lo + (w - 1) * s + 1 : s] = x
    return out


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded cross-correlation, or its stride-``s`` adjoint when ``spec.transposed``.

    Transposed stride-2 output is exactly twice the input size.
    """
    _check_conv(x, weight, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias: expected ({spec.out_channels},), got {bias.shape}")
    if spec.transposed:
        y, _ = _conv_direct(_transposed_input(x, spec), _transposed_as_conv(weight), bias, spec.kernel_size, 1, 0)
        return y
    y, _ = _conv_direct(x, weight, bias, spec.kernel_size, spec.stride, spec.padding)
    return y


def conv2d_backward(
    grad_out: np.ndarray, saved_input: np.ndarray, weight: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` wrt input, weight and bias."""
    _check_conv(saved_input, weight, spec)
    check4(grad_out, "grad_out")
    b, _, h, w = saved_input.shape
    if spec.transposed:
        xin = _transposed_input(saved_input, spec)
        wc = _transposed_as_conv(weight)
        expect = (b, spec.out_channels, xin.shape[2] - spec.kernel_size + 1, xin.shape[3] - spec.kernel_size + 1)
    else:
        expect = (
            b,
            spec.out_channels,
            _out_size(h, spec.kernel_size, spec.stride, spec.padding),
            _out_size(w, spec.kernel_size, spec.stride, spec.padding),
        )
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out: expected {expect} from the forward record, got {grad_out.shape}")
    if spec.transposed:
        return _transposed_backward(grad_out, xin, saved_input.shape, wc, spec)
    _, rec = _conv_direct(saved_input, weight, None, spec.kernel_size, spec.stride, spec.padding)
    return _conv_backward_rec(grad_out, rec, weight)


def _transposed_backward(gy, xin, in_shape, wc, spec):
    k = spec.kernel_size
    _, rec = _conv_direct(xin, wc, None, k, 1, 0)
    gxin, gwc, gb = _conv_backward_rec(gy, rec, wc)
    lo, hi = _transposed_pads(spec)
    gx = gxin[:, :, lo : xin.shape[2] - hi : spec.stride, lo : xin.shape[3] - hi : spec.stride]
    gw = gwc.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    assert gx.shape == in_shape
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


# ---------------------------------------------------------------------------
# pointwise and structural ops
# ---------------------------------------------------------------------------


def avg_pool2(x: np.ndarray) -> np.ndarray:
    check4(x, "avg_pool2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad_out: np.ndarray) -> np.ndarray:
    return 0.25 * upsample_nearest2(grad_out)


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def prelu(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    check4(x, "prelu input")
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"prelu slope: expected ({x.shape[1]},), got {slope.shape}")
    a = slope[None, :, None, None]
    return np.maximum(x, 0) + a * np.minimum(x, 0)


def prelu_backward(grad_out: np.ndarray, x: np.ndarray, slope: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    neg = np.minimum(x, 0)
    gslope = np.einsum("bchw,bchw->c", neg, grad_out)
    scale = np.where(x < 0, slope[None, :, None, None], np.ones((), dtype=x.dtype))
    gx = grad_out * scale
    return gx, gslope


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1.0 - out)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * sigmoid(x)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return a * b


def add_backward(g):
    return g, g


def sub_backward(g):
    return g, -g


def mul_backward(g, a, b):
    return g * b, g * a


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check4(a, "concat a")
    check4(b, "concat b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch, {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, ca: int) -> tuple[np.ndarray, np.ndarray]:
    return x[:, :ca], x[:, ca:]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def kaiming_std(fan_in: int, slope: float = 0.25) -> float:
    return float(np.sqrt(2.0 / ((1.0 + slope**2) * fan_in)))


class Conv2d:
    """Convolution layer with ``<name>.weight`` and ``<name>.bias`` in a store."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 1,
        transposed: bool = False,
        rng: np.random.Generator | None = None,
        zero: bool = False,
    ):
        self.spec = ConvSpec(cin, cout, k, stride, padding=k // 2, transposed=transposed)
        self.name = name
        fan_in = cin * k * k
        shape = self.spec.weight_shape
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * kaiming_std(fan_in)
        self.w = store.add(f"{name}.weight", w)
        self.b = store.add(f"{name}.bias", np.zeros(cout))

    def __call__(self, x):
        _check_conv(x, self.w.value, self.spec)
        s = self.spec
        if s.transposed:
            xin = _transposed_input(x, s)
            y, rec = _conv_direct(xin, _transposed_as_conv(self.w.value), self.b.value, s.kernel_size, 1, 0)
            return y, (xin.shape, rec)
        y, rec = _conv_direct(x, self.w.value, self.b.value, s.kernel_size, s.stride, s.padding)
        return y, (None, rec)

    def backward(self, ctx, gy):
        xin_shape, rec = ctx
        s = self.spec
        if s.transposed:
            wc = _transposed_as_conv(self.w.value)
            gxin, gwc, gb = _conv_backward_rec(gy, rec, wc)
            lo, hi = _transposed_pads(s)
            gx = gxin[:, :, lo : xin_shape[2] - hi : s.stride, lo : xin_shape[3] - hi : s.stride]
            self.w.grad += gwc.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            self.b.grad += gb
            return np.ascontiguousarray(gx)
        gx, gw, gb = _conv_backward_rec(gy, rec, self.w.value)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class PReLU:
    def __init__(self, store: ParamStore, name: str, channels: int, init: float = 0.25):
        self.a = store.add(f"{name}.slope", np.full(channels, init))

    def __call__(self, x):
        return prelu(x, self.a.value), x

    def backward(self, x, gy):
        gx, ga = prelu_backward(gy, x, self.a.value)
        self.a.grad += ga
        return gx


class Sequential:
    """Conv/PReLU chain; activations sit between convs, never after the last."""

    def __init__(self, layers: list):
        self.layers = layers

    def __call__(self, x):
        ctxs = []
        for layer in self.layers:
            x, c = layer(x)
            ctxs.append(c)
        return x, ctxs

    def backward(self, ctxs, g):
        for layer, c in zip(reversed(self.layers), reversed(ctxs)):
            g = layer.backward(c, g)
        return g


def conv_chain(
    store: ParamStore,
    name: str,
    widths: list[int],
    kernels: list[int],
    rng: np.random.Generator,
    zero_last: bool = False,
) -> Sequential:
    """``len(kernels)`` convs through ``widths`` with PReLU between them."""
    layers: list = []
    n = len(kernels)
    for i, k in enumerate(kernels):
        last = i == n - 1
        layers.append(Conv2d(store, f"{name}.conv{i}", widths[i], widths[i + 1], k, rng=rng, zero=last and zero_last))
        if not last:
            layers.append(PReLU(store, f"{name}.act{i}", widths[i + 1]))
    return Sequential(layers)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"CFN1"


class CheckpointError(ValueError):
    pass


def _dims4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store rank-{len(shape)} tensor")
    return tuple(shape) + (1,) * (4 - len(shape))  # type: ignore[return-value]


def write_tensors(fh: BinaryIO, entries: list[tuple[str, np.ndarray]]) -> None:
    fh.write(MAGIC)
    for name, arr in entries:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<4I", *_dims4(np.shape(arr))))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    """Inverse of :func:`write_tensors`; vectors come back as (n, 1, 1, 1)."""
    if fh.read(4) != MAGIC:
        raise CheckpointError("not a CFN1 checkpoint")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise CheckpointError("truncated entry header")
        (n,) = struct.unpack("<I", head)
        name = fh.read(n).decode("utf-8")
        dims = struct.unpack("<4I", fh.read(16))
        count = int(np.prod(dims))
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64)


def save_store(path, store: ParamStore, extra: list[tuple[str, np.ndarray]] | None = None) -> None:
    entries = [(name, p.value) for name, p in store.unique()]
    entries += extra or []
    with open(path, "wb") as fh:
        write_tensors(fh, entries)


def load_into_store(tensors: dict[str, np.ndarray], store: ParamStore) -> None:
    for name, p in store.unique():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        t = tensors[name]
        if t.size != p.value.size or _dims4(p.value.shape) != t.shape:
            raise CheckpointError(f"{name}: checkpoint dims {t.shape} vs model dims {_dims4(p.value.shape)}")
        p.value = t.reshape(p.value.shape).astype(store.dtype)
        p.grad = np.zeros_like(p.value)
