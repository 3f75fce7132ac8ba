"""Dense volumetric tensors with reverse-mode automatic differentiation.

Tensors are laid out channel-major over a 3D grid, ``C x D x H x W``.  Every
operator records a closure that maps the output gradient to the gradients of
its inputs; :func:`backward` walks the recorded graph in reverse topological
order.  Operators keep the dtype of their inputs, so the network runs in
float32 while gradient checks can run the very same code in float64.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An immutable array value plus the bookkeeping needed for backprop.

    Parameters
    ----------
    data : array_like
        Values.  Floating arrays keep their dtype, anything else becomes
        float32.
    requires_grad : bool
        Leaf tensors with this flag receive ``.grad`` after :func:`backward`.
    name : str, optional
        Used in error messages and as the parameter key.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, *, op="leaf", parents=(), backward_fn=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Backpropagate from a scalar ``loss``.

    Gradients are recomputed from scratch on every call and *assigned* to
    ``.grad`` of each reachable leaf, so calling twice without a new forward
    pass gives the same result.  Parameters listed in ``parameters`` that the
    loss does not depend on get an all-zero gradient.

    Returns
    -------
    dict
        ``name -> gradient array`` for the given parameters (or for every
        reachable named leaf when ``parameters`` is None).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(parameters, Mapping):
        named = dict(parameters)
    elif parameters is not None:
        named = {p.name if p.name is not None else str(i): p for i, p in enumerate(parameters)}
    else:
        named = None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = []
    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    leaves.append((node, g))
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    out = {}
    for leaf, g in leaves:
        leaf.grad = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if named is None and leaf.name is not None:
            out[leaf.name] = leaf.grad
    if named is not None:
        reached = {id(leaf) for leaf, _ in leaves}
        for key, p in named.items():
            if id(p) not in reached:
                p.grad = np.zeros_like(p.data)
            out[key] = p.grad
    return out


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling


def _check_channels(x: Tensor, kernel: Tensor):
    if x.data.ndim != 4:
        raise ValueError(f"conv3d expects a C x D x H x W input, got shape {x.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"conv3d expects a Cout x Cin x k x k x k kernel, got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[0]} channels, "
            f"kernel {kernel.name or ''} shape {kernel.shape} expects {kernel.shape[1]}"
        )
    k = kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k not in (1, 3):
        raise ValueError(f"conv3d supports 1x1x1 and 3x3x3 kernels, got spatial {kernel.shape[2:]}")


def _im2col(xp: np.ndarray, k: int, spatial) -> np.ndarray:
    C = xp.shape[0]
    D, H, W = spatial
    cols = np.empty((C, k * k * k, D, H, W), dtype=xp.dtype)
    i = 0
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, i] = xp[:, a:a + D, b:b + H, c:c + W]
                i += 1
    return cols.reshape(C * k * k * k, D * H * W)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``Cin x D x H x W``, ``kernel`` is ``Cout x Cin x k x k x k`` with
    ``k`` in {1, 3}, ``bias`` has ``Cout`` entries.
    """
    _check_channels(x, kernel)
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    spatial = x.shape[1:]
    n = int(np.prod(spatial))
    if k == 1:
        cols = x.data.reshape(cin, n)
    else:
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
        cols = _im2col(xp, k, spatial)
    w2 = kernel.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data.reshape(cout, 1)
    out = out.reshape((cout,) + spatial)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        g2 = g.reshape(cout, n)
        gw = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1, dtype=np.float64).astype(bias.dtype)
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if k == 1:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape((cin, 27) + spatial)
                D, H, W = spatial
                gxp = np.zeros((cin, D + 2, H + 2, W + 2), dtype=dcols.dtype)
                i = 0
                for a in range(3):
                    for b in range(3):
                        for c in range(3):
                            gxp[:, a:a + D, b:b + H, c:c + W] += dcols[:, i]
                            i += 1
                gx = gxp[:, 1:-1, 1:-1, 1:-1]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, parents, "conv3d", _bw)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2.

    Gradient flows to the first maximal voxel of each window in scan order.
    """
    C = x.shape[0]
    for axis, n in zip("DHW", x.shape[1:]):
        if n % 2:
            raise ValueError(f"maxpool3d needs even spatial extents; axis {axis} has extent {n}")
    D, H, W = (n // 2 for n in x.shape[1:])
    win = x.data.reshape(C, D, 2, H, 2, W, 2).transpose(0, 1, 3, 5, 2, 4, 6).reshape(C, D, H, W, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros((C, D, H, W, 8), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(C, D, H, W, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
        return (gw.reshape(x.shape),)

    return _result(out, (x,), "maxpool3d", _bw)


def upsample3d(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling along every spatial axis."""
    C, D, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None], (C, D, 2, H, 2, W, 2))
    out = out.reshape(C, 2 * D, 2 * H, 2 * W)

    def _bw(g):
        return (g.reshape(C, D, 2, H, 2, W, 2).sum(axis=(2, 4, 6)),)

    return _result(out, (x,), "upsample3d", _bw)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class BatchNormState:
    """Running per-channel moments used in inference mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum, eps)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over all spatial positions.

    With a batch of one volume, training-mode statistics are the spatial
    moments of each channel.  Training mode also folds the batch moments into
    ``state`` (in place); inference mode uses ``state`` only.
    """
    C = x.shape[0]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"batchnorm scale/shift must have {C} entries, got {scale.shape} and {shift.shape}")
    xs = x.data.reshape(C, -1)
    n = xs.shape[1]
    dtype = x.dtype
    if training:
        mean = xs.mean(axis=1, dtype=np.float64)
        centered = xs - mean.astype(dtype)[:, None]
        var = np.mean(np.square(centered, dtype=np.float64), axis=1)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mean).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)
    else:
        mean = state.mean.astype(np.float64)
        var = state.var.astype(np.float64)
        centered = xs - mean.astype(dtype)[:, None]
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dtype)
    xhat = centered * inv_std[:, None]
    out = (scale.data[:, None] * xhat + shift.data[:, None]).reshape(x.shape)

    def _bw(g):
        g2 = g.reshape(C, n)
        gscale = (g2 * xhat).sum(axis=1, dtype=np.float64).astype(scale.dtype)
        gshift = g2.sum(axis=1, dtype=np.float64).astype(shift.dtype)
        gx = None
        if x.requires_grad:
            dxhat = g2 * scale.data[:, None]
            if training:
                s1 = dxhat.sum(axis=1, dtype=np.float64).astype(dtype)[:, None]
                s2 = (dxhat * xhat).sum(axis=1, dtype=np.float64).astype(dtype)[:, None]
                gx = (inv_std[:, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[:, None]
            gx = gx.reshape(x.shape)
        return gx, gscale, gshift

    return _result(out, (x, scale, shift), "batchnorm", _bw)


# ---------------------------------------------------------------------------
# pointwise and channel operators


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def add_all(tensors: list[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a``'s channels followed by ``b``'s."""
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels needs equal spatial shapes, got {a.shape[1:]} and {b.shape[1:]}")
    ca = a.shape[0]
    return _result(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        "concat",
        lambda g: (g[:ca], g[ca:]),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sum_all(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _result(total, (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    total = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _result(total, (x,), "mean", lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel axis, independently at each voxel."""
    if logits.shape[0] < 2:
        raise ValueError("softmax_channels needs at least 2 channels")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def _bw(g):
        # float64 avoids cancellation in g - sum(g p) when one p is close to 1
        p64, g64 = p.astype(np.float64), g.astype(np.float64)
        return ((p64 * (g64 - (g64 * p64).sum(axis=0, keepdims=True))).astype(p.dtype),)

    return _result(p, (logits,), "softmax", _bw)


def scalar_loss(x: Tensor, fn: Callable[[np.ndarray], tuple[float, np.ndarray]], op: str = "loss") -> Tensor:
    """Attach a loss with an analytic gradient to the graph.

    ``fn(values) -> (loss, d loss / d values)``.  The loss node is float64.
    """
    value, grad = fn(x.data)
    grad = np.asarray(grad)

    def _bw(g):
        return ((grad * g).astype(x.dtype),)

    return _result(np.asarray(value, dtype=np.float64), (x,), op, _bw)


# ---------------------------------------------------------------------------
# regularisation layers


def gaussian_noise(x: Tensor, rng: np.random.Generator, sigma: float, training: bool) -> Tensor:
    """Add i.i.d. N(0, sigma^2) noise in training mode; identity otherwise."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if not training or sigma == 0:
        return x
    noise = rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)
    return _result(x.data + noise, (x,), "noise", lambda g: (g,))


def dropout(x: Tensor, rng: np.random.Generator, rate: float, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), "dropout", lambda g: (g * keep,))
