"""Small numpy neural-network core: dense and convolutional layers with exact
reverse-mode gradients, MSE/RMSE, Adam, finite-difference gradient checks and
a binary parameter checkpoint format.

Everything runs in float64. Layers operate on batches; the functional forms
(`dense_forward`, `conv2d_forward`) also accept a single unbatched example.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyInput, KernelLargerThanInput, ShapeMismatch, TruncatedFile, BadMagic

DTYPE = np.float64


# ---------------------------------------------------------------------------
# functional forward ops
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out_j = sum_i W[j, i] * x[i] + b[j]; `x` may carry a leading batch axis."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ShapeMismatch(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def _conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, H', W', kh, kw, C) as a strided view
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


@numba.njit(cache=True)
def _col2im(dcols, dx, ho, wo, kh, kw, stride):
    # dcols: (N*H'*W', kh*kw*C) -> accumulate into dx: (N, H, W, C)
    n, _, _, c = dx.shape
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                m = (b * ho + oh) * wo + ow
                for i in range(kh):
                    r = oh * stride + i
                    for j in range(kw):
                        q = ow * stride + j
                        base = (i * kw + j) * c
                        for ch in range(c):
                            dx[b, r, q, ch] += dcols[m, base + ch]


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of an HWC image (or NHWC batch) with a
    ``[c_out, kh, kw, c_in]`` kernel, plus per-channel bias."""
    x = np.asarray(x, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[3] or b.shape != (k.shape[0],):
        raise ShapeMismatch(f"conv2d: x{x.shape} k{k.shape} b{b.shape}")
    if stride < 1:
        raise ShapeMismatch("stride must be a positive integer")
    c_out, kh, kw, c_in = k.shape
    if x.shape[1] < kh or x.shape[2] < kw:
        raise KernelLargerThanInput(f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}")
    n = x.shape[0]
    ho, wo = _conv_out(x.shape[1], kh, stride), _conv_out(x.shape[2], kw, stride)
    cols = _windows(x, kh, kw, stride).reshape(n * ho * wo, kh * kw * c_in)
    out = cols @ k.reshape(c_out, -1).T + b
    out = out.reshape(n, ho, wo, c_out)
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def _check_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=DTYPE).ravel()
    t = np.asarray(target, dtype=DTYPE).ravel()
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred has {p.size} entries, target has {t.size}")
    if p.size == 0:
        raise EmptyInput("mse of empty vectors")
    return p, t


def mse(pred, target) -> float:
    p, t = _check_pair(pred, target)
    r = p - t
    return float(np.dot(r, r) / r.size)


def rmse(pred, target) -> float:
    return float(np.sqrt(mse(pred, target)))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base layer. Subclasses cache what they need in forward() and fill
    ``self.grads`` (aligned with ``self.params``) in backward()."""

    params: list[np.ndarray]
    grads: list[np.ndarray]

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            W = np.zeros((n_out, n_in), dtype=DTYPE)
        else:
            W = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.W = W
        self.b = np.zeros(n_out, dtype=DTYPE)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dy):
        x = self._x
        self.grads[0][...] = dy.T @ x
        self.grads[1][...] = dy.sum(axis=0)
        return dy @ self.W

    def output_shape(self, in_shape):
        return (self.W.shape[0],)


class Conv2D(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        shape = (c_out, kernel, kernel, c_in)
        if rng is None:
            K = np.zeros(shape, dtype=DTYPE)
        else:
            K = glorot_uniform(rng, shape, kernel * kernel * c_in, kernel * kernel * c_out)
        self.K = K
        self.b = np.zeros(c_out, dtype=DTYPE)
        self.stride = stride
        # first layer of a network never needs d(loss)/d(pixels) during training
        self.input_grad = True
        self.params = [self.K, self.b]
        self.grads = [np.zeros_like(self.K), np.zeros_like(self.b)]
        self._cols = None
        self._xshape = None

    def forward(self, x):
        c_out, kh, kw, c_in = self.K.shape
        if x.shape[1] < kh or x.shape[2] < kw:
            raise KernelLargerThanInput(f"kernel {kh}x{kw} larger than input {x.shape[1:3]}")
        if x.shape[3] != c_in:
            raise ShapeMismatch(f"conv expects {c_in} channels, got {x.shape[3]}")
        n = x.shape[0]
        ho, wo = _conv_out(x.shape[1], kh, self.stride), _conv_out(x.shape[2], kw, self.stride)
        # the column matrix is large (about 100 MB for the second DAVE-2 conv
        # at batch 32); reusing one buffer avoids fresh page faults every call
        shape = (n * ho * wo, kh * kw * c_in)
        if self._cols is None or self._cols.shape != shape:
            self._cols = np.empty(shape, dtype=DTYPE)
        cols = self._cols
        np.copyto(cols.reshape(n, ho, wo, kh, kw, c_in), _windows(x, kh, kw, self.stride))
        self._xshape = x.shape
        # (c_out, M) output orientation is markedly faster in BLAS for these shapes
        out_t = self.K.reshape(c_out, -1) @ cols.T
        out = np.add(out_t.T, self.b, out=np.empty((cols.shape[0], c_out), dtype=DTYPE))
        return out.reshape(n, ho, wo, c_out)

    def backward(self, dy):
        c_out, kh, kw, c_in = self.K.shape
        n, ho, wo, _ = dy.shape
        s = self.stride
        d2 = dy.reshape(-1, c_out)
        self.grads[0][...] = (d2.T @ self._cols).reshape(self.K.shape)
        self.grads[1][...] = d2.sum(axis=0)
        if not self.input_grad:
            return None
        # one sample at a time keeps each column block cache-resident
        k2 = self.K.reshape(c_out, -1)
        per = ho * wo
        dx = np.zeros(self._xshape, dtype=DTYPE)
        for i in range(n):
            _col2im(d2[i * per:(i + 1) * per] @ k2, dx[i:i + 1], ho, wo, kh, kw, s)
        return dx

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        _, kh, kw, _ = self.K.shape
        return (_conv_out(h, kh, self.stride), _conv_out(w, kw, self.stride), self.K.shape[0])


class ReLU(Layer):
    def forward(self, x):
        self._y = np.maximum(x, 0.0)
        return self._y

    def backward(self, dy):
        return dy * (self._y > 0)


class Normalize(Layer):
    """Maps pixels in [0, 1] onto [-1, 1] via 2x - 1."""

    def forward(self, x):
        return 2.0 * x - 1.0

    def backward(self, dy):
        return 2.0 * dy


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self.params = [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                break
        return dy

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape


# ---------------------------------------------------------------------------
# network-level gradient machinery
# ---------------------------------------------------------------------------
#
# A "network" is any object exposing
#     params: list[np.ndarray]           (mutable, stable order)
#     grads: list[np.ndarray]            (filled by backward_pass, same order)
#     forward(*inputs) -> (N, 1) predictions
#     backward_pass(dpred) -> tuple of input gradients
# Sequential satisfies it for single-input networks.


def _as_inputs(x) -> tuple:
    return tuple(x) if isinstance(x, (tuple, list)) else (x,)


@dataclass
class Gradients:
    params: list[np.ndarray]
    inputs: tuple
    loss: float


def loss_of(network, x, target) -> float:
    pred = network.forward(*_as_inputs(x))
    return mse(pred, target)


def backward(network, x, target) -> Gradients:
    """MSE loss gradients w.r.t. every parameter and every input."""
    inputs = _as_inputs(x)
    pred = network.forward(*inputs)
    t = np.asarray(target, dtype=DTYPE)
    if t.size != pred.size:
        raise ShapeMismatch(f"target has {t.size} entries, prediction has {pred.size}")
    resid = pred - t.reshape(pred.shape)
    dpred = 2.0 * resid / resid.size
    if hasattr(network, "backward_pass"):
        dx = network.backward_pass(dpred)
    else:
        dx = network.backward(dpred)
    return Gradients(
        params=[g.copy() for g in network.grads],
        inputs=_as_inputs(dx),
        loss=float(np.mean(resid * resid)),
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: int
    n_checked: int
    passed: bool
    rtol: float
    n_skipped: int = 0


def relu_layers(network) -> list[ReLU]:
    """Every ReLU reachable from ``network`` through Sequential containers
    and layer-valued attributes (branches of a composite model)."""
    found: list[ReLU] = []

    def walk(obj):
        if isinstance(obj, ReLU):
            found.append(obj)
        elif isinstance(obj, Sequential):
            for layer in obj.layers:
                walk(layer)
        elif not isinstance(obj, Layer):
            for value in vars(obj).values():
                if isinstance(value, Layer):
                    walk(value)

    walk(network)
    return found


def _active_pattern(relus: Sequence[ReLU]) -> list[np.ndarray]:
    return [r._y > 0 for r in relus]


def grad_check(network, x, target, h: float = 1e-4, rtol: float = 1e-4,
               analytic: Sequence[np.ndarray] | None = None,
               max_per_tensor: int | None = None, seed: int = 0,
               skip_kinks: bool = True) -> GradCheckReport:
    """Compare analytic parameter gradients against central differences.

    With ``max_per_tensor`` set, a seeded random subset of entries from every
    parameter tensor is checked instead of all of them.

    A central difference whose +h or -h evaluation switches any ReLU on or
    off straddles a kink, so it is not an estimate of the derivative at the
    point. With ``skip_kinks`` those coordinates are counted in
    ``n_skipped`` and left out of the error; every other coordinate is held
    to ``rtol``.
    """
    if analytic is None:
        analytic = backward(network, x, target).params
    relus = relu_layers(network) if skip_kinks else []
    loss_of(network, x, target)
    base = _active_pattern(relus)

    def crossed() -> bool:
        return any(not np.array_equal(a, b) for a, b in zip(base, _active_pattern(relus)))

    rng = np.random.default_rng(seed)
    worst = (0.0, -1, -1)
    n_checked = n_skipped = 0
    for pi, (p, g) in enumerate(zip(network.params, analytic)):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        else:
            idx = np.arange(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_of(network, x, target)
            kink = bool(relus) and crossed()
            flat[i] = orig - h
            lm = loss_of(network, x, target)
            kink = kink or (bool(relus) and crossed())
            flat[i] = orig
            if kink:
                n_skipped += 1
                continue
            num = (lp - lm) / (2.0 * h)
            ana = float(gflat[i])
            denom = max(abs(ana), abs(num), 1e-8)
            err = abs(ana - num) / denom
            n_checked += 1
            if err > worst[0] or worst[1] < 0:
                worst = (err, pi, int(i))
    passed = n_checked > 0 and worst[0] <= rtol
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, passed, rtol, n_skipped)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer moments differ in count")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {np.shape(g)} vs moment {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint encoding
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CFNN1\n"


def _write_tensor(fp: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a, dtype="<f8")
    fp.write(struct.pack("<I", a.ndim))
    fp.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fp.write(np.ascontiguousarray(a).tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise TruncatedFile(f"wanted {n} bytes, got {len(data)}")
    return data


def _read_tensor(fp: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fp, 8 * count), dtype="<f8")
    return data.reshape(dims).astype(DTYPE)


def write_checkpoint(fp: BinaryIO, params: Sequence[np.ndarray], state: AdamState | None = None) -> None:
    """Magic, tensor count, tensors (rank, dims, LE float64), then an optional
    Adam block: flag byte, [lr, beta1, beta2, epsilon, t] tensor, m tensors, v tensors."""
    fp.write(CHECKPOINT_MAGIC)
    fp.write(struct.pack("<I", len(params)))
    for p in params:
        _write_tensor(fp, p)
    if state is None:
        fp.write(b"\x00")
        return
    fp.write(b"\x01")
    _write_tensor(fp, np.array([state.lr, state.beta1, state.beta2, state.epsilon, float(state.t)]))
    for m in state.m:
        _write_tensor(fp, m)
    for v in state.v:
        _write_tensor(fp, v)


def read_checkpoint(fp: BinaryIO) -> tuple[list[np.ndarray], AdamState | None]:
    if fp.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise BadMagic("not a CFNN1 checkpoint")
    (count,) = struct.unpack("<I", _read_exact(fp, 4))
    params = [_read_tensor(fp) for _ in range(count)]
    flag = _read_exact(fp, 1)
    if flag == b"\x00":
        return params, None
    hyper = _read_tensor(fp)
    m = [_read_tensor(fp) for _ in range(count)]
    v = [_read_tensor(fp) for _ in range(count)]
    state = AdamState(lr=float(hyper[0]), beta1=float(hyper[1]), beta2=float(hyper[2]),
                      epsilon=float(hyper[3]), t=int(hyper[4]), m=m, v=v)
    return params, state
