"""Dense rank-4 tensor engine with reverse-mode differentiation.

All arithmetic runs in float64 on top of numpy. The operation set is
exactly what the gated path selection head needs: dilated 3x3 and 1x1
convolutions, batch norm, ReLU, elementwise add, channel-broadcast
multiply, channel concat/split, softmax cross entropy, and a recording
tape that replays backward in exact reverse execution order. A central
finite-difference estimator is shipped alongside as the independent
gradient oracle.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid layer or run configuration."""


class TapeUsageError(RuntimeError):
    """backward() called on a tensor that was not recorded on a tape."""


class DegenerateLossWarning(UserWarning):
    """Loss computed over an empty pixel selection (defined as 0)."""


# ---------------------------------------------------------------------------
# values


class Tensor4:
    """Rank-4 array (batch, channel, height, width) with optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, requires_grad={self.requires_grad})"


class Param:
    """Trainable parameter array of any rank."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name or 'unnamed'}, shape={self.data.shape})"


def _accum(t, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grad(params: Iterable) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# tape

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Ops executed while the tape is active append one backward closure
    each; replaying backward visits them in exact reverse execution
    order exactly once. Independent tapes on different threads do not
    interact (the active-tape stack is thread local).
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeUsageError("tape stack corrupted: exiting a non-active tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor4, backward_fn: Callable[[], None]) -> None:
        out._tape = self
        self._records.append(backward_fn)

    def backward(self, loss: Tensor4) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeUsageError("loss was not recorded on this tape")
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        for fn in reversed(self._records):
            fn()


def backward(loss: Tensor4) -> None:
    """Populate grad fields of everything the scalar loss depends on."""
    if loss._tape is None:
        raise TapeUsageError("backward() without a recorded tape; run the forward "
                             "pass inside `with Tape() as tape:`")
    loss._tape.backward(loss)


def _recording(*inputs) -> Tape | None:
    tape = active_tape()
    if tape is None:
        return None
    return tape if any(t.requires_grad for t in inputs) else None


# ---------------------------------------------------------------------------
# layer parameter blocks


@dataclass
class ConvParams:
    """Weights of one (possibly dilated) square convolution, stride 1."""

    weight: Param              # (out_ch, in_ch, k, k)
    bias: Param                # (out_ch,)
    dilation: int = 1
    kernel: int = 1
    padding: int = 0

    @property
    def in_ch(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.data.shape[0]

    @classmethod
    def create(cls, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
               dilation: int = 1, same_size: bool = True, name: str = "") -> "ConvParams":
        if kernel not in (1, 3):
            raise ConfigError(f"kernel must be 1 or 3, got {kernel}")
        if dilation < 1:
            raise ConfigError(f"dilation must be positive, got {dilation}")
        padding = 0
        if same_size:
            padding = same_size_padding(kernel, dilation)
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        return cls(weight=Param(w, name=f"{name}.weight" if name else "weight"),
                   bias=Param(np.zeros(out_ch), name=f"{name}.bias" if name else "bias"),
                   dilation=dilation, kernel=kernel, padding=padding)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def same_size_padding(kernel: int, dilation: int) -> int:
    """Padding that keeps spatial dims unchanged at stride 1."""
    if kernel % 2 == 0:
        raise ConfigError(f"same-size padding undefined for even kernel {kernel}")
    return dilation * (kernel - 1) // 2


@dataclass
class BatchNormParams:
    """Per-channel batch norm with running statistics."""

    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"        # "train" | "eval"

    @classmethod
    def create(cls, channels: int, name: str = "") -> "BatchNormParams":
        return cls(gamma=Param(np.ones(channels), name=f"{name}.gamma" if name else "gamma"),
                   beta=Param(np.zeros(channels), name=f"{name}.beta" if name else "beta"),
                   running_mean=np.zeros(channels),
                   running_var=np.ones(channels))

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]


# ---------------------------------------------------------------------------
# convolution

def _im2col(xpad: np.ndarray, k: int, r: int, oh: int, ow: int) -> np.ndarray:
    """Stack the k*k dilated tap slices as (n, k*k*in_ch, oh*ow)."""
    n, ci = xpad.shape[:2]
    cols = np.empty((n, k * k * ci, oh * ow))
    for ky in range(k):
        for kx in range(k):
            t = ky * k + kx
            patch = xpad[:, :, ky * r:ky * r + oh, kx * r:kx * r + ow]
            cols[:, t * ci:(t + 1) * ci, :] = patch.reshape(n, ci, oh * ow)
    return cols


def conv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """Dilated correlation with bias, stride 1, zero padding."""
    n, ci, h, w = x.shape
    k, r, pad = p.kernel, p.dilation, p.padding
    if ci != p.in_ch:
        raise ShapeError(f"conv2d: input has {ci} channels, weights expect {p.in_ch}")
    oh = h + 2 * pad - r * (k - 1)
    ow = w + 2 * pad - r * (k - 1)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: output would be {oh}x{ow} for input {h}x{w}")

    if pad:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xpad = x.data
    cols = _im2col(xpad, k, r, oh, ow)
    # weight reordered (out, ky, kx, in) to line up with the col block layout
    w2 = p.weight.data.transpose(0, 2, 3, 1).reshape(p.out_ch, k * k * ci)
    out_data = np.matmul(w2, cols).reshape(n, p.out_ch, oh, ow)
    out_data += p.bias.data[None, :, None, None]
    out = Tensor4(out_data, requires_grad=x.requires_grad or p.weight.requires_grad)

    tape = _recording(x, p.weight, p.bias)
    if tape is not None:
        def backward_fn():
            if out.grad is None:
                return
            g = out.grad.reshape(n, p.out_ch, oh * ow)
            _accum(p.bias, out.grad.sum(axis=(0, 2, 3)))
            dw2 = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(p.weight,
                   dw2.reshape(p.out_ch, k, k, ci).transpose(0, 3, 1, 2))
            if x.requires_grad:
                dcols = np.matmul(w2.T[None], g)
                dxpad = np.zeros_like(xpad)
                for ky in range(k):
                    for kx in range(k):
                        t = ky * k + kx
                        dxpad[:, :, ky * r:ky * r + oh, kx * r:kx * r + ow] += \
                            dcols[:, t * ci:(t + 1) * ci, :].reshape(n, ci, oh, ow)
                _accum(x, dxpad[:, :, pad:pad + h, pad:pad + w] if pad else dxpad)
        tape.record(out, backward_fn)
    return out


def conv1x1(x: Tensor4, p: ConvParams) -> Tensor4:
    """Pointwise convolution (channel mixing only)."""
    if p.kernel != 1:
        raise ConfigError(f"conv1x1 called with kernel {p.kernel}")
    return conv2d(x, p)


# ---------------------------------------------------------------------------
# batch norm

def batchnorm(x: Tensor4, p: BatchNormParams, update_running: bool = True) -> Tensor4:
    """Per-channel normalization; batch statistics in train mode, running in eval."""
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batchnorm: {c} channels vs params for {p.channels}")
    if h == 0 or w == 0 or n == 0:
        raise ConfigError("batchnorm on zero-size input")
    cnt = n * h * w

    if p.mode == "train":
        if cnt < 2:
            raise ConfigError("train-mode batchnorm needs n*h*w >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))          # biased, used for normalization
        if update_running:
            m = p.momentum
            unbiased = var * (cnt / (cnt - 1))
            p.running_mean[:] = (1 - m) * p.running_mean + m * mean
            p.running_var[:] = (1 - m) * p.running_var + m * unbiased
    elif p.mode == "eval":
        mean = p.running_mean
        var = p.running_var
    else:
        raise ConfigError(f"unknown batchnorm mode {p.mode!r}")

    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = p.gamma.data[None, :, None, None] * xhat + p.beta.data[None, :, None, None]
    out = Tensor4(out_data, requires_grad=x.requires_grad or p.gamma.requires_grad)

    tape = _recording(x, p.gamma, p.beta)
    if tape is not None:
        train = p.mode == "train"

        def backward_fn():
            if out.grad is None:
                return
            g = out.grad
            _accum(p.beta, g.sum(axis=(0, 2, 3)))
            _accum(p.gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if not x.requires_grad:
                return
            gs = p.gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if train:
                # d/dx of batch-stat normalization
                mg = g.mean(axis=(0, 2, 3), keepdims=True)
                mgx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum(x, gs * (g - mg - xhat * mgx))
            else:
                _accum(x, gs * g)
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# pointwise / structural ops

def relu(x: Tensor4) -> Tensor4:
    out = Tensor4(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    tape = _recording(x)
    if tape is not None:
        mask = x.data > 0

        def backward_fn():
            if out.grad is not None:
                _accum(x, out.grad * mask)
        tape.record(out, backward_fn)
    return out


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor4(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    tape = _recording(a, b)
    if tape is not None:
        def backward_fn():
            if out.grad is not None:
                _accum(a, out.grad)
                _accum(b, out.grad)
        tape.record(out, backward_fn)
    return out


def mul_channel_broadcast(x: Tensor4, m: Tensor4) -> Tensor4:
    """Multiply a single-channel mask into every channel of x."""
    n, c, h, w = x.shape
    if m.shape != (n, 1, h, w):
        raise ShapeError(f"mask shape {m.shape} does not broadcast over {x.shape}")
    out = Tensor4(x.data * m.data, requires_grad=x.requires_grad or m.requires_grad)
    tape = _recording(x, m)
    if tape is not None:
        def backward_fn():
            if out.grad is None:
                return
            _accum(x, out.grad * m.data)
            _accum(m, (out.grad * x.data).sum(axis=1, keepdims=True))
        tape.record(out, backward_fn)
    return out


def mul_constant(x: Tensor4, c: np.ndarray | float) -> Tensor4:
    """Elementwise multiply by a non-differentiated constant."""
    c = np.asarray(c, dtype=np.float64)
    out = Tensor4(x.data * c, requires_grad=x.requires_grad)
    tape = _recording(x)
    if tape is not None:
        def backward_fn():
            if out.grad is not None:
                _accum(x, out.grad * c)
        tape.record(out, backward_fn)
    return out


def concat_channels(xs: Sequence[Tensor4]) -> Tensor4:
    if not xs:
        raise ShapeError("concat_channels of empty list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: {t.shape} vs ({n}, *, {h}, {w})")
    out = Tensor4(np.concatenate([t.data for t in xs], axis=1),
                  requires_grad=any(t.requires_grad for t in xs))
    tape = _recording(*xs)
    if tape is not None:
        sizes = [t.channels for t in xs]

        def backward_fn():
            if out.grad is None:
                return
            ofs = 0
            for t, c in zip(xs, sizes):
                _accum(t, out.grad[:, ofs:ofs + c])
                ofs += c
        tape.record(out, backward_fn)
    return out


def split_channels(x: Tensor4, sizes: Sequence[int]) -> list[Tensor4]:
    if sum(sizes) != x.channels:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.channels}")
    outs = []
    ofs = 0
    tape = _recording(x)
    for c in sizes:
        sl = slice(ofs, ofs + c)
        part = Tensor4(x.data[:, sl].copy(), requires_grad=x.requires_grad)
        if tape is not None:
            def backward_fn(part=part, sl=sl):
                if part.grad is None or not x.requires_grad:
                    return
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[:, sl] += part.grad
            tape.record(part, backward_fn)
        outs.append(part)
        ofs += c
    return outs


def tensor_sum(x: Tensor4) -> Tensor4:
    out = Tensor4(np.full((1, 1, 1, 1), x.data.sum()), requires_grad=x.requires_grad)
    tape = _recording(x)
    if tape is not None:
        def backward_fn():
            if out.grad is not None:
                _accum(x, np.full_like(x.data, out.grad.item()))
        tape.record(out, backward_fn)
    return out


def scale(x: Tensor4, alpha: float) -> Tensor4:
    return mul_constant(x, float(alpha))


# ---------------------------------------------------------------------------
# segmentation loss

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _check_labels(labels: np.ndarray, k: int, ignore_index: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be (n, h, w), got {labels.shape}")
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ShapeError(f"labels outside [0, {k}) and ignore_index {ignore_index}")
    return labels.astype(np.int64)


def softmax_ce_map(logits: Tensor4, labels: np.ndarray,
                   ignore_index: int = 255) -> tuple[Tensor4, np.ndarray]:
    """Per-pixel cross entropy map (zero at ignored pixels) and the
    probability the softmax assigns to the true class (1.0 at ignored)."""
    n, k, h, w = logits.shape
    labels = _check_labels(labels, k, ignore_index)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)   # (n,1,h,w)
    vmask = valid[:, None]
    ce = np.where(vmask, -picked, 0.0)
    prob = np.where(vmask, np.exp(picked), 1.0)

    out = Tensor4(ce, requires_grad=logits.requires_grad)
    tape = _recording(logits)
    if tape is not None:
        def backward_fn():
            if out.grad is None:
                return
            soft = np.exp(logp)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
            _accum(logits, (soft - onehot) * (out.grad * vmask))
        tape.record(out, backward_fn)
    return out, prob


def softmax_cross_entropy(logits: Tensor4, labels: np.ndarray,
                          ignore_index: int = 255) -> tuple[Tensor4, Tensor4]:
    """Mean cross entropy over non-ignored pixels plus the per-pixel
    true-class probability map."""
    ce, prob = softmax_ce_map(logits, labels, ignore_index)
    labels = np.asarray(labels)
    count = int((labels != ignore_index).sum())
    if count == 0:
        warnings.warn("all pixels ignored: loss defined as 0", DegenerateLossWarning)
        return Tensor4(np.zeros((1, 1, 1, 1))), Tensor4(prob)
    loss = scale(tensor_sum(ce), 1.0 / count)
    return loss, Tensor4(prob)


# ---------------------------------------------------------------------------
# gradient oracle + SGD

def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient estimate of f at theta, one coordinate
    at a time: (f(theta + step*e_i) - f(theta - step*e_i)) / (2*step)."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(theta))
        flat[i] = orig - step
        fm = float(f(theta))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradcheck(build_loss: Callable[[], Tensor4], params: Sequence[Param],
              step: float = 1e-3, tol: float = 1e-4,
              samples_per_block: int | None = None,
              rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients against central finite differences.

    Returns the max error per parameter block, where error is
    |analytic - fd| / max(1, |analytic|, |fd|). `samples_per_block`
    limits the finite-difference probe to a random coordinate subset
    (full sweep when None). build_loss must be a pure function of the
    parameter values.
    """
    zero_grad(params)
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    results: dict[str, float] = {}
    for bi, p in enumerate(params):
        flat = p.data.reshape(-1)
        if samples_per_block is None or samples_per_block >= flat.size:
            idxs = np.arange(flat.size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=samples_per_block, replace=False)
        worst = 0.0
        a = analytic[id(p)].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = build_loss().item()
            flat[i] = orig - step
            fm = build_loss().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            err = abs(a[i] - fd) / max(1.0, abs(a[i]), abs(fd))
            worst = max(worst, err)
        results[p.name or f"block{bi}"] = worst
    return results


def sgd_step(theta: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One in-place SGD update: v <- momentum*v + grad + wd*theta; theta -= lr*v."""
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * theta
    theta -= lr * velocity


class SGD:
    """Momentum SGD over a list of Params."""

    def __init__(self, params: Sequence[Param], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            sgd_step(p.data, p.grad, v, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grad(self.params)
