"""Tape-based reverse-mode autodiff over numpy arrays.

Images use channel-last layout ``[N, H, W, C]``. Every op accepts an unbatched
``[H, W, C]`` image as well and returns an unbatched result in that case.

Ops record onto the innermost active :class:`Tape`; with no tape active they
simply compute, which is how inference and "constant" inputs are expressed.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

LOG_FLOOR = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed ops; used as a context manager."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(Record(op, inputs, result, backward_fn))
    return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def detach(t: Tensor) -> Tensor:
    """Stop-gradient: same buffer, no history, no grad."""
    return Tensor(t.data, requires_grad=False)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; clear them first
    (see :func:`zero_grads`) when starting a fresh step.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward called with no tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g if rec.output.grad is None else rec.output.grad + g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                reached[key] = inp
    # whatever is left never appeared as a tape output: leaves
    for key, g in grads.items():
        t = reached[key]
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


elementwise_add = add


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _emit("scale", (a,), a.data * f, lambda g: (g * f,))


def add_scalars(*terms: Tensor) -> Tensor:
    """Sum of scalar tensors (used to assemble weighted objectives)."""
    for t in terms:
        if t.data.size != 1:
            raise ShapeError(f"add_scalars takes scalars, got shape {t.shape}")
    out = sum((t.data for t in terms[1:]), terms[0].data.copy())
    return _emit("add_scalars", tuple(terms), out, lambda g: tuple(g for _ in terms))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def clamp_probability(p: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Clip into ``[floor, 1 - floor]``; gradient is zero where clipped."""
    lo, hi = p.data.dtype.type(floor), p.data.dtype.type(1 - floor)
    inside = (p.data >= lo) & (p.data <= hi)
    return _emit("clamp", (p,), np.clip(p.data, lo, hi), lambda g: (g * inside,))


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor into ``[n, len]`` rows."""
    if x.data.ndim != 1:
        raise ShapeError("tile_rows expects a 1-D tensor")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _emit("tile_rows", (x,), out, lambda g: (g.sum(axis=0),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _emit("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# --------------------------------------------------------------------- linear


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[n]`` or ``[batch, n]``."""
    if weight.data.ndim != 2 or bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bad weight/bias shapes {weight.shape}, {bias.shape}")
    if x.shape[-1] != weight.shape[0] or x.data.ndim not in (1, 2):
        raise ShapeError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    xd = x.data
    out = xd @ weight.data + bias.data

    def bwd(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit("fully_connected", (x, weight, bias), out, bwd)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return view.reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, k, k, c)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i:i + hspan:stride, j:j + wspan:stride, :] += blocks[:, :, :, i, j, :]
    return out


def _pad(x: np.ndarray, padding: int, extra: int = 0) -> np.ndarray:
    if padding == 0 and extra == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding + extra), (padding, padding + extra), (0, 0)))


def _check_conv(op: str, x: np.ndarray, kernel: Tensor, bias: Tensor, in_axis: int, out_axis: int, stride: int):
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"{op}: kernel must be [k,k,.,.], got {kernel.shape}")
    if x.shape[-1] != kernel.shape[in_axis]:
        raise ShapeError(f"{op}: input has {x.shape[-1]} channels, kernel expects {kernel.shape[in_axis]}")
    if bias.shape != (kernel.shape[out_axis],):
        raise ShapeError(f"{op}: bias shape {bias.shape} != ({kernel.shape[out_axis]},)")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a ``[k, k, c_in, c_out]`` kernel.

    Output size is ``(h + 2*padding - k) // stride + 1``; the floor lets
    ``k=5, padding=2, stride=2`` halve even sizes exactly.
    """
    xd, unbatched = _batched(x.data)
    _check_conv("conv2d", xd, kernel, bias, 2, 3, stride)
    k, _, cin, cout = kernel.shape
    n, h, w, _ = xd.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = _pad(xd, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat.T, xp.shape, k, stride, ho, wo)
            gx = gxp[:, padding:padding + h, padding:padding + w, :]
            if unbatched:
                gx = gx[0]
        if kernel.requires_grad:
            gw = (cols.T @ g2).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _emit("conv2d", (x, kernel, bias), out[0] if unbatched else out, bwd)


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
             output_padding: int = 0) -> Tensor:
    """Transposed convolution: the input-gradient of :func:`conv2d`.

    ``kernel`` is ``[k, k, c_out, c_in]`` (the conv2d kernel that maps the
    output back to the input). Output size is
    ``(h - 1)*stride - 2*padding + k + output_padding``.
    """
    xd, unbatched = _batched(x.data)
    _check_conv("deconv2d", xd, kernel, bias, 3, 2, stride)
    k, _, cout, cin = kernel.shape
    n, h, w, _ = xd.shape
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValueError("deconv2d: output_padding must be smaller than stride")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError("deconv2d: padding too large for input")
    padded_shape = (n, ho + 2 * padding, wo + 2 * padding, cout)
    wmat = kernel.data.reshape(k * k * cout, cin)
    x2 = xd.reshape(n * h * w, cin)
    outp = _col2im(x2 @ wmat.T, padded_shape, k, stride, h, w)
    out = outp[:, padding:padding + ho, padding:padding + wo, :] + bias.data

    def bwd(g):
        gb4, _ = _batched(g)
        gp = _pad(gb4, padding)
        cols = _im2col(gp, k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (cols @ wmat).reshape(n, h, w, cin)
            if unbatched:
                gx = gx[0]
        if kernel.requires_grad:
            gw = (cols.T @ x2).reshape(kernel.shape)
        if bias.requires_grad:
            gb = gb4.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    return _emit("deconv2d", (x, kernel, bias), out[0] if unbatched else out, bwd)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel normalization over every axis except the last.

    In training mode batch statistics are used and ``state`` is updated in
    place; in eval mode the running averages are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    dt = xd.dtype.type
    if training:
        if xd.ndim < 2 or xd.shape[0] < 2:
            raise DegenerateBatchError("batch_norm in training mode needs a batch of at least 2")
        m = xd.size // c
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1 - mom) * var
    else:
        mean, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)
    inv = 1 / np.sqrt(var + dt(state.eps))
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gbeta

    return _emit("batch_norm", (x, gamma, beta), out, bwd)


# --------------------------------------------------------------------- losses


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    _same_shape("l1_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff) / diff.dtype.type(n)
    out = np.asarray(np.abs(diff).mean())
    return _emit("l1_loss", (a, b), out, lambda g: (g * sign, -g * sign))


def _check_probs(op: str, *ps: Tensor) -> None:
    for p in ps:
        d = p.data
        if not np.all(np.isfinite(d)) or np.any(d <= 0) or np.any(d >= 1):
            raise DomainError(f"{op}: probabilities must lie in the open interval (0, 1)")


def _mean_log(p: Tensor, complement: bool) -> Tensor:
    """``mean(log(p))`` or ``mean(log(1 - p))`` with the argument clipped."""
    d = p.data
    dt = d.dtype.type
    arg = 1 - d if complement else d
    lo, hi = dt(LOG_FLOOR), dt(1 - LOG_FLOOR)
    clipped = np.clip(arg, lo, hi)
    inside = (arg >= lo) & (arg <= hi)
    n = d.size
    out = np.asarray(np.log(clipped).mean())
    sgn = -1 if complement else 1

    def bwd(g):
        return (g * sgn * inside / (clipped * dt(n)),)

    return _emit("mean_log1m" if complement else "mean_log", (p,), out, bwd)


def adv_loss_terms(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Discriminator and generator objectives, both to be minimized.

    ``loss_D = mean log(1 - D(real)) + mean log D(fake)``,
    ``loss_G = mean log(1 - D(fake))``.
    """
    _check_probs("adv_loss_terms", d_real, d_fake)
    loss_d = add_scalars(_mean_log(d_real, complement=True), _mean_log(d_fake, complement=False))
    loss_g = _mean_log(d_fake, complement=True)
    return loss_d, loss_g


ADV_FORMS = ("minimax", "nonsaturating")


def _check_form(form: str) -> None:
    if form not in ADV_FORMS:
        raise ValueError(f"adversarial loss form must be one of {ADV_FORMS}, got {form!r}")


def discriminator_loss(d_real: Tensor, d_fake: Tensor, form: str = "minimax") -> Tensor:
    """D objective to minimize.

    ``minimax`` is ``mean log(1 - D(real)) + mean log D(fake)``.
    ``nonsaturating`` is ``-mean log D(real) - mean log(1 - D(fake))``: same
    minimizer, but the point where D cannot yet separate the classes is stable
    instead of a runaway towards D == 0.
    """
    _check_form(form)
    _check_probs("discriminator_loss", d_real, d_fake)
    if form == "minimax":
        return add_scalars(_mean_log(d_real, complement=True), _mean_log(d_fake, complement=False))
    return scale(add_scalars(_mean_log(d_real, complement=False), _mean_log(d_fake, complement=True)), -1.0)


def generator_loss(d_fake: Tensor, form: str = "minimax") -> Tensor:
    """``mean log(1 - D(fake))`` (minimax) or ``-mean log D(fake)`` (nonsaturating)."""
    _check_form(form)
    _check_probs("generator_loss", d_fake)
    if form == "minimax":
        return _mean_log(d_fake, complement=True)
    return scale(_mean_log(d_fake, complement=False), -1.0)


def minimax_values(d_real: np.ndarray, d_fake: np.ndarray) -> tuple[float, float]:
    """``(loss_D, loss_G)`` in minimax units, evaluated without recording."""
    lr = np.log(np.clip(1 - d_real, LOG_FLOOR, 1 - LOG_FLOOR)).mean()
    lf = np.log(np.clip(d_fake, LOG_FLOOR, 1 - LOG_FLOOR)).mean()
    lg = np.log(np.clip(1 - d_fake, LOG_FLOOR, 1 - LOG_FLOOR)).mean()
    return float(lr + lf), float(lg)


def binary_cross_entropy(p: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE against fixed 0/1 targets, log arguments clipped."""
    _check_probs("binary_cross_entropy", p)
    t = np.asarray(target, dtype=p.dtype).reshape(p.shape)
    d = p.data
    dt = d.dtype.type
    lo, hi = dt(LOG_FLOOR), dt(1 - LOG_FLOOR)
    pc = np.clip(d, lo, hi)
    inside = (d >= lo) & (d <= hi)
    n = d.size
    out = np.asarray(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean())

    def bwd(g):
        return (g * inside * (pc - t) / (pc * (1 - pc) * dt(n)),)

    return _emit("bce", (p,), out, bwd)


# ------------------------------------------------------------------ optimizer


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """Adaptive-moment (Adam) state for one named parameter collection."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


# --------------------------------------------------------------- grad checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                      skip: Callable[[np.ndarray, int], bool] | None = None,
                      floor: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences.

    ``skip(x_flat, i)`` lets the caller exclude coordinates sitting on a
    kink. Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``,
    so gradients far below ``floor`` are judged on absolute error.
    """
    x = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    backward(out, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    ga = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if skip is not None and skip(flat, i):
            continue
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
        worst = max(worst, err)
    return worst
