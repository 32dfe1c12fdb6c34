"""Dense tensors with reverse-mode gradients, and the layer primitives the network needs.

Every op takes and returns :class:`Tensor`.  Ops record a closure on their output
that maps the output gradient to one gradient per parent; :meth:`Tensor.backward`
walks the graph in reverse topological order.  All arithmetic is float64.

Image-like ops accept an optional leading batch axis: ``C x H x W`` or
``N x C x H x W``.  Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy.special import expit

__all__ = [
    "Tensor",
    "Param",
    "DimensionError",
    "DegenerateInputError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "maxpool2d",
    "global_avg_pool",
    "linear",
    "relu",
    "sigmoid",
    "softplus",
    "l2_normalize",
    "concat",
    "euclidean_distance",
    "grad_check",
    "grad_check_report",
]

NORM_EPS = 1e-12
# Kernel extent from which conv2d switches to the FFT path.
FFT_MIN_KERNEL = 9


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(ValueError):
    """Input is (numerically) zero where a direction is required."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Real array with an optional gradient slot.

    Attributes:
        data: float64 ndarray holding the values (row-major).
        grad: ndarray of the same shape, or None until a backward pass reaches it.
        requires_grad: whether ops on this tensor are recorded.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor in the graph."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
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
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic (numpy broadcasting, reduced back in the backward pass)

    def __add__(self, other):
        other = _as_tensor(other)
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __getitem__(self, idx):
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None):
        old = self.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, old).copy(),)

        return _make(self.data.sum(axis=axis), (self,), backward)

    def mean(self, axis=None):
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / float(count))


class Param(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: str | None = None, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad, name=name)

    @property
    def value(self) -> Tensor:
        return self


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._prev = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# convolution


def _corr_direct(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation, (N,C,H,W) x (O,C,K,L) -> (N,O,H-K+1,W-L+1)."""
    N, C, H, W = xp.shape
    O, _, K, L = w.shape
    Ho, Wo = H - K + 1, W - L + 1
    if O * H * W < C * Ho * Wo:
        # few outputs: mix channels first for every tap, then add shifted planes
        taps = np.tensordot(w, xp, axes=([1], [1]))  # O,K,L,N,H,W
        out = np.zeros((O, N, Ho, Wo))
        for a in range(K):
            for b in range(L):
                out += taps[:, a, b, :, a:a + Ho, b:b + Wo]
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    win = sliding_window_view(xp, (K, L), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_fft(xp: np.ndarray, w: np.ndarray, spectra: dict | None = None) -> np.ndarray:
    H, W = xp.shape[2:]
    K, L = w.shape[2:]
    # Valid outputs sit at full-conv indices >= K-1, untouched by circular wrap at size H.
    s = (sp_fft.next_fast_len(H, real=True), sp_fft.next_fast_len(W, real=True))
    xf = sp_fft.rfft2(xp, s=s)
    wf = None if spectra is None else spectra.get(s)
    if wf is None:
        wf = sp_fft.rfft2(w[:, :, ::-1, ::-1], s=s)
        if spectra is not None:
            spectra[s] = wf
    yf = np.einsum("ncuv,ocuv->nouv", xf, wf)
    y = sp_fft.irfft2(yf, s=s)
    return np.ascontiguousarray(y[:, :, K - 1:H, L - 1:W])


def _weight_grad_direct(xp: np.ndarray, dy: np.ndarray, K: int, L: int) -> np.ndarray:
    win = sliding_window_view(xp, (K, L), axis=(2, 3))
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))


def _weight_grad_fft(xp: np.ndarray, dy: np.ndarray, K: int, L: int) -> np.ndarray:
    H, W = xp.shape[2:]
    Ho, Wo = dy.shape[2:]
    s = (sp_fft.next_fast_len(H, real=True), sp_fft.next_fast_len(W, real=True))
    xf = sp_fft.rfft2(xp, s=s)
    df = sp_fft.rfft2(dy[:, :, ::-1, ::-1], s=s)
    gf = np.einsum("ncuv,nouv->ocuv", xf, df, optimize=True)
    g = sp_fft.irfft2(gf, s=s)
    return np.ascontiguousarray(g[:, :, Ho - 1:Ho - 1 + K, Wo - 1:Wo - 1 + L])


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, method: str = "auto", spectra: dict | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: ``C_in x H x W`` or ``N x C_in x H x W``.
        kernels: ``C_out x C_in x K x K``.
        bias: optional ``C_out`` vector added per output channel.
        stride: step between output samples.
        padding: zeros added on every spatial border.
        method: ``"direct"``, ``"fft"`` or ``"auto"`` (FFT from ``FFT_MIN_KERNEL`` up).
        spectra: optional dict the FFT path fills with (and later reuses) the kernel
            spectra.  The caller owns it and must drop it when ``kernels`` change.

    Returns:
        ``C_out x H' x W'`` (batched if the input was), with
        ``H' = floor((H + 2*padding - K) / stride) + 1``.
    """
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects CxHxW or NxCxHxW input and 4-D kernels, "
                             f"got {x.shape} and {kernels.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    wd = kernels.data
    N, C, H, W = xd.shape
    O, Ck, K, L = wd.shape
    if Ck != C:
        raise DimensionError(f"input has {C} channels but kernels expect {Ck}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if K > Hp or L > Wp:
        raise DimensionError(f"kernel {K}x{L} larger than padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"bias shape {bias.shape} != ({O},)")
    use_fft = method == "fft" or (method == "auto" and max(K, L) >= FFT_MIN_KERNEL)
    corr = _corr_fft if use_fft else _corr_direct
    wgrad = _weight_grad_fft if use_fft else _weight_grad_direct

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    y1 = _corr_fft(xp, wd, spectra) if use_fft else _corr_direct(xp, wd)
    y = y1[:, :, ::stride, ::stride] if stride > 1 else y1
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    out_data = y if batched else y[0]

    def backward(g):
        g = g if batched else g[None]
        if stride > 1:
            g1 = np.zeros(y1.shape)
            g1[:, :, ::stride, ::stride] = g
        else:
            g1 = g
        gx = gw = gb = None
        if x.requires_grad:
            gpad = np.pad(g1, ((0, 0), (0, 0), (K - 1, K - 1), (L - 1, L - 1)))
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gxp = corr(gpad, flipped)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
            gx = gx if batched else gx[0]
        if kernels.requires_grad:
            gw = wgrad(xp, g1, K, L)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out_data, parents, backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches of the last two axes.

    Gradient goes to the first maximal element of each patch in row-major order.
    """
    stride = window if stride is None else stride
    if x.ndim < 2:
        raise DimensionError("maxpool2d needs at least 2 spatial axes")
    H, W = x.shape[-2:]
    if window < 1 or stride < 1 or window > H or window > W:
        raise DimensionError(f"pool window {window} does not fit input {H}x{W}")
    lead = x.shape[:-2]
    xd = x.data.reshape((-1, H, W))
    win = sliding_window_view(xd, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    B, Ho, Wo = win.shape[:3]
    flat = win.reshape(B, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros((B, H, W))
        rows = np.arange(Ho)[None, :, None] * stride + arg // window
        cols = np.arange(Wo)[None, None, :] * stride + arg % window
        bidx = np.broadcast_to(np.arange(B)[:, None, None], rows.shape)
        np.add.at(gx, (bidx, rows, cols), g.reshape(B, Ho, Wo))
        return (gx.reshape(x.shape),)

    return _make(out.reshape(lead + (Ho, Wo)), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``n x H x W -> n`` (or batched)."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects n x H x W, got {x.shape}")
    return x.mean(axis=(-2, -1))


# ---------------------------------------------------------------------------
# dense / elementwise


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``W x + b`` for ``x`` of shape ``n`` or ``N x n``; ``W`` is ``m x n``."""
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} != ({W.shape[0]},)")
    xd, wd = x.data, W.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = (np.outer(g, xd) if g.ndim == 1 else g.T @ xd) if W.requires_grad else None
        gb = None
        if b is not None:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(y, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def l2_normalize(x: Tensor, eps: float | None = None) -> Tensor:
    """Scale the last axis to unit Euclidean norm.

    With ``eps=None`` a norm at or below ``NORM_EPS`` raises
    :class:`DegenerateInputError`; otherwise ``eps`` is added to the norm.
    """
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    if eps is None:
        if np.any(norm <= NORM_EPS):
            raise DegenerateInputError("cannot L2-normalize a (near-)zero vector")
        denom = norm
    else:
        denom = norm + eps
    y = x.data / denom

    def backward(g):
        # d(x/(|x|+e)) = g/den - x (x.g) / (|x| den^2)
        xg = (x.data * g).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * xg / (safe * denom ** 2),)

    return _make(y, (x,), backward)


def concat(xs: Iterable[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(data, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Distance along the last axis, broadcasting the leading axes; zero gradient at zero distance."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"euclidean_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff ** 2).sum(axis=-1))

    def backward(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)
        ga = g[..., None] * unit
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga, b.shape)

    return _make(d, (a, b), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-3) -> list[float]:
    """Max relative error between reverse-mode and central-difference gradients, per param.

    The relative error of one element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    loss.backward()
    report = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"loss not finite while perturbing {p.name or 'param'}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report.append(worst)
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Largest relative gradient error over all elements of all ``params``."""
    return max(grad_check_report(f, params, h), default=0.0)
