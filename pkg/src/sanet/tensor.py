"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the fixed set of layer operations needed by the toy network is
supported.  Every operation records itself on the active :class:`Graph`
(if any input requires a gradient) together with a closure that maps the
upstream gradient to gradients for each input.

    >>> x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    >>> with Graph() as g:
    ...     y = activation(x, "relu")
    >>> g.backward(y, np.ones_like(y.data))
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NonFiniteError, UninitializedStatisticsError

DEFAULT_DTYPE = np.float32

_active_graph: contextvars.ContextVar[Graph | None] = contextvars.ContextVar(
    "sanet_active_graph", default=None
)


class Tensor:
    """Dense array plus an optional gradient buffer.

    Layer activations are rank 4 (N, C, H, W); region features and
    per-superpixel probabilities are rank 2 (K, C).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a unique name and optimizer moment buffers."""

    __slots__ = ("name", "m1", "m2", "decay")

    def __init__(self, name, data, decay=True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay = decay
        self.m1 = np.zeros_like(self.data)
        self.m2 = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: object


@dataclass
class Graph:
    """Records executed operations in order; replay them backwards.

    Use as a context manager so operations know where to record::

        with Graph() as g:
            out = model.forward(x, maps)
        g.backward(out, upstream)
    """

    nodes: list = field(default_factory=list)
    _token: object = None

    def __enter__(self):
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None
        return False

    def record(self, op, output, inputs, backward):
        self.nodes.append(_Node(op, output, tuple(inputs), backward))

    def backward(self, output, grad=None):
        if grad is None:
            if output.data.size != 1:
                raise ConfigurationError("implicit gradient only for scalar outputs")
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=output.dtype)
        if grad.shape != output.shape:
            raise ConfigurationError(f"upstream gradient {grad.shape} vs output {output.shape}")
        _accumulate(output, grad)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                _check_finite(gi, node.op + ".backward")
                _accumulate(inp, gi)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def _emit(op, data, inputs, backward):
    """Wrap ``data`` as the op output and record it on the active graph."""
    _check_finite(data, op)
    graph = _active_graph.get()
    needs_grad = graph is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        graph.record(op, out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# Initialization


def he_uniform(shape, rng, dtype=DEFAULT_DTYPE):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Operations


def conv2d(x, weight, bias, stride=1, padding=0):
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError("conv2d expects rank-4 input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be positive and padding non-negative")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding - kh < 0 or w + 2 * padding - kw < 0 or ho <= 0 or wo <= 0:
        raise ConfigurationError("conv2d: non-positive output extent")

    # im2col in NHWC order so each (i, j) tap is a contiguous C-vector
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride]).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), dtype=x.dtype)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _emit("conv2d", out, (x, weight, bias), backward)


def activation(x, kind):
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0).astype(x.dtype)

        def backward(g):
            # derivative at exactly 0 is 0
            return (g * mask,)
    elif kind == "sigmoid":
        out = _sigmoid(x.data)

        def backward(g):
            return (g * out * (1 - out),)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return _emit(kind, out, (x,), backward)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def combine(a, b, kind):
    if kind == "add":
        if a.shape != b.shape:
            raise ConfigurationError(f"add: shapes {a.shape} and {b.shape} differ")
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "concat_channels":
        if a.data.ndim != 4 or b.data.ndim != 4:
            raise ConfigurationError("concat expects rank-4 tensors")
        if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
            raise ConfigurationError(f"concat: N/H/W of {a.shape} and {b.shape} differ")
        ca = a.shape[1]
        out = np.concatenate([a.data, b.data], axis=1)
        return _emit("concat", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))
    raise ConfigurationError(f"unknown combine kind {kind!r}")


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False


def batchnorm2d(x, scale, shift, stats, mode="train", momentum=0.1, epsilon=1e-5):
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigurationError(f"batchnorm: expected {c} scale/shift elements")
    if mode == "eval":
        if not stats.initialized:
            raise UninitializedStatisticsError("batchnorm evaluated before any training step")
        inv = 1.0 / np.sqrt(stats.var + epsilon)
        xhat = (x.data - stats.mean[None, :, None, None]) * inv[None, :, None, None]
        out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

        def backward(g):
            gx = g * (scale.data * inv)[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    elif mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = xc * inv[None, :, None, None]
        out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
        # biased variance for the running estimate: defined for single-element channels
        if stats.initialized:
            stats.mean = ((1 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype)
            stats.var = ((1 - momentum) * stats.var + momentum * var).astype(stats.var.dtype)
        else:
            stats.mean = mean.astype(stats.mean.dtype)
            stats.var = var.astype(stats.var.dtype)
            stats.initialized = True
        m = n * h * w

        def backward(g):
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gshift = g.sum(axis=(0, 2, 3))
            gxhat = g * scale.data[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return gx, gscale, gshift
    else:
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    return _emit("batchnorm2d", out.astype(x.dtype), (x, scale, shift), backward)


def upsample_nearest2x(x):
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample_nearest2x", out, (x,), backward)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)``; used to turn any op into a scalar objective."""
    w = np.asarray(weights, dtype=x.dtype)
    out = np.array(np.sum(x.data * w), dtype=x.dtype)
    return _emit("weighted_sum", out, (x,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: dict
    trials: int
    tolerance: float | None = None

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.tolerance is None or self.worst < self.tolerance

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_error.items())
        return f"{status} {self.op}: {parts} (trials={self.trials})"


def relative_error(a, f, floor=1e-8):
    """|a - f| / max(|a|, |f|, floor); ``floor`` stops exact zeros dividing by zero."""
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def grad_check(op, input_shapes, trials=10, step=1e-4, seed=0, dtype=np.float64,
               sampler=None, name=None, tolerance=None, arg_names=None, constant=(),
               reference_dtype=None, error_floor=1e-8):
    """Compare analytic gradients of ``op`` with central finite differences.

    ``op`` takes one Tensor per entry of ``input_shapes`` and returns a
    Tensor.  The scalar objective is ``sum(out * u)`` for a random upstream
    ``u`` redrawn every trial.  ``sampler(rng, shape)`` (or one sampler per
    input) overrides the default N(0, 1) inputs, e.g. to keep inputs away
    from kinks.  Inputs whose index is in ``constant`` are redrawn per trial
    but not differentiated.

    With ``reference_dtype`` set, the finite differences are taken on copies
    of the inputs cast to that type, so low-precision analytic gradients are
    compared with a high-precision reference rather than with a difference
    quotient dominated by rounding.  ``error_floor`` is the denominator floor
    of the relative error.
    """
    ref_dtype = reference_dtype or dtype
    rng = np.random.default_rng(seed)
    default = lambda r, shape: r.standard_normal(shape)  # noqa: E731
    if sampler is None or callable(sampler):
        samplers = [sampler or default] * len(input_shapes)
    else:
        samplers = [s or default for s in sampler]
    arg_names = arg_names or [f"arg{i}" for i in range(len(input_shapes))]
    checked = [i for i in range(len(input_shapes)) if i not in constant]
    worst = {arg_names[i]: 0.0 for i in checked}
    for _ in range(trials):
        values = [np.asarray(f(rng, s), dtype=dtype) for f, s in zip(samplers, input_shapes)]
        inputs = [Tensor(v.copy(), requires_grad=i in checked) for i, v in enumerate(values)]
        with Graph() as g:
            out = op(*inputs)
        upstream = rng.standard_normal(out.shape).astype(dtype)
        g.backward(out, upstream)

        ref_up = upstream.astype(ref_dtype)
        ref_values = [v.astype(ref_dtype) for v in values]

        def objective(vals):
            res = op(*[Tensor(v) for v in vals])
            return float(np.sum(res.data.astype(np.float64) * ref_up))

        for idx in checked:
            v = ref_values[idx]
            t = inputs[idx]
            analytic = t.grad if t.grad is not None else np.zeros_like(v)
            numeric = np.zeros_like(v, dtype=np.float64)
            flat = v.reshape(-1)
            nflat = numeric.reshape(-1)
            for e in range(flat.size):
                orig = flat[e]
                flat[e] = orig + step
                fp = objective(ref_values)
                flat[e] = orig - step
                fm = objective(ref_values)
                flat[e] = orig
                nflat[e] = (fp - fm) / (2 * step)
            err = float(relative_error(analytic, numeric, error_floor).max()) if v.size else 0.0
            worst[arg_names[idx]] = max(worst[arg_names[idx]], err)
    return GradCheckReport(name or getattr(op, "__name__", "op"), worst, trials, tolerance)
