"""Array-level reverse-mode differentiation for a fixed set of layer primitives.

Values are float64 numpy arrays wrapped in :class:`Var` nodes. Each primitive
computes its output eagerly and, unless recording is disabled with
:func:`no_grad`, stores a closure mapping the upstream gradient to gradients
for its inputs. :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients into the leaves.

The primitives are fused (attention and the GELU feed-forward are single
nodes with hand-written backward rules) because only one architecture is
ever built from them.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError, StateError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, value, parents: Sequence["Var"] = (), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Parameter(Var):
    """A trainable leaf whose gradient persists until :func:`zero_grads`."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64, copy=True))
        self.name = name
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward) -> Var:
    if not _recording():
        return Var(value)
    return Var(value, parents, backward)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


# --------------------------------------------------------------------------
# elementwise and structural primitives
# --------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def lerp(a, b, w: float) -> Var:
    """``a + w * (b - a)`` with a constant weight ``w``."""
    a, b = as_var(a), as_var(b)
    w = float(w)
    return _node(a.value + w * (b.value - a.value), (a, b),
                 lambda g: (g * (1.0 - w), g * w))


def total(a) -> Var:
    a = as_var(a)
    shape = a.shape
    return _node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_sum_to(g * bv, av.shape), _sum_to(g * av, bv.shape)))


def tanh(a) -> Var:
    a = as_var(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def select(a, index: int, axis: int = -2) -> Var:
    """Pick one slice along ``axis`` (used for first/last-position pooling)."""
    a = as_var(a)
    shape = a.shape
    ax = axis % a.value.ndim

    def back(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(a.value, index, axis=ax), (a,), back)


def embed(ids: np.ndarray, table) -> Var:
    """Row lookup ``table[ids]``; the backward pass scatter-adds."""
    table = as_var(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"token id out of range for table of shape {table.shape}")

    def back(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), _flat2(g))
        return (out,)

    return _node(table.value[ids], (table,), back)


# --------------------------------------------------------------------------
# layer primitives
# --------------------------------------------------------------------------

def _check_last(x: np.ndarray, n: int, what: str):
    if x.shape[-1] != n:
        raise ConfigError(f"{what}: input shape {x.shape} does not end in {n}")


def linear(x, W, b=None) -> Var:
    """``x @ W + b`` over the last axis of ``x``; ``W`` has shape (d_in, d_out)."""
    x, W = as_var(x), as_var(W)
    if W.value.ndim != 2:
        raise ConfigError(f"linear: weight must be 2-D, got {W.shape}")
    _check_last(x.value, W.shape[0], "linear")
    if b is not None:
        b = as_var(b)
        if b.shape != (W.shape[1],):
            raise ConfigError(f"linear: bias shape {b.shape} vs weight {W.shape}")
    xv, Wv = x.value, W.value
    y = xv @ Wv
    if b is not None:
        y = y + b.value

    def back(g):
        g2 = _flat2(g)
        gx = g @ Wv.T
        gW = _flat2(xv).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _node(y, parents, back)


def matmul_t(x, E) -> Var:
    """``x @ E.T``; the tied output projection against an embedding table."""
    x, E = as_var(x), as_var(E)
    _check_last(x.value, E.shape[1], "matmul_t")
    xv, Ev = x.value, E.value

    def back(g):
        return g @ Ev, _flat2(g).T @ _flat2(xv)

    return _node(xv @ Ev.T, (x, E), back)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Var:
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ConfigError(
            f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def back(g):
        dxhat = g * gv
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _flat2(g * xhat).sum(axis=0), _flat2(g).sum(axis=0)

    return _node(xhat * gv + bias.value, (x, gain, bias), back)


def softmax(x) -> Var:
    """Softmax over the last axis."""
    x = as_var(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), back)


def gelu(x) -> Var:
    """Tanh-approximated GELU."""
    x = as_var(x)
    u = x.value
    th = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))

    def back(g):
        du = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * du,)

    return _node(0.5 * u * (1.0 + th), (x,), back)


def feed_forward(x, W1, b1, W2, b2) -> Var:
    """Fused ``gelu(x @ W1 + b1) @ W2 + b2``."""
    x, W1, b1, W2, b2 = map(as_var, (x, W1, b1, W2, b2))
    _check_last(x.value, W1.shape[0], "feed_forward")
    if W2.shape[0] != W1.shape[1]:
        raise ConfigError(f"feed_forward: W1 {W1.shape} incompatible with W2 {W2.shape}")
    xv = x.value
    u = xv @ W1.value + b1.value
    th = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    a = 0.5 * u * (1.0 + th)
    y = a @ W2.value + b2.value

    def back(g):
        g2 = _flat2(g)
        gW2 = _flat2(a).T @ g2
        gb2 = g2.sum(axis=0)
        ga = g @ W2.value.T
        du = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        gu = ga * du
        gu2 = _flat2(gu)
        return gu @ W1.value.T, _flat2(xv).T @ gu2, gu2.sum(axis=0), gW2, gb2

    return _node(y, (x, W1, b1, W2, b2), back)


def causal_mask(seq: int) -> np.ndarray:
    return np.tril(np.ones((seq, seq), dtype=bool))


def attention(x, Wq, bq, Wk, Wv, bv, Wo, bo, n_heads: int, mask=None) -> Var:
    """Fused multi-head scaled dot-product self-attention.

    ``x`` has shape (..., seq, d_model). ``mask`` is an optional boolean
    (seq, seq) array; ``mask[i, j]`` allows query ``i`` to see key ``j``.
    There is no key bias: it shifts every score of a query equally and so
    never changes the output.
    """
    x = as_var(x)
    ws = tuple(map(as_var, (Wq, bq, Wk, Wv, bv, Wo, bo)))
    xv = x.value
    if xv.ndim < 2:
        raise ConfigError(f"attention: input must be (..., seq, d), got {xv.shape}")
    S, D = xv.shape[-2:]
    if D % n_heads:
        raise ConfigError(f"attention: d_model {D} not divisible by n_heads {n_heads}")
    for w in (ws[0], ws[2], ws[3], ws[5]):
        if w.shape != (D, D):
            raise ConfigError(f"attention: projection shape {w.shape}, expected {(D, D)}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (S, S):
            raise ConfigError(f"attention: mask shape {mask.shape} vs sequence length {S}")
        if not mask.any(axis=-1).all():
            raise ConfigError("attention: mask leaves a query with no visible key")
    Wqv, bqv, Wkv, Wvv, bvv, Wov, bov = (w.value for w in ws)
    H, dh = n_heads, D // n_heads
    lead = xv.shape[:-2]
    rt = 1.0 / math.sqrt(dh)

    def split(a):  # (..., S, D) -> (..., H, S, dh)
        return np.swapaxes(a.reshape(*lead, S, H, dh), -2, -3)

    def merge(a):
        return np.swapaxes(a, -2, -3).reshape(*lead, S, D)

    q = split(xv @ Wqv + bqv)
    k = split(xv @ Wkv)
    v = split(xv @ Wvv + bvv)
    sc = (q @ np.swapaxes(k, -1, -2)) * rt
    if mask is not None:
        sc = np.where(mask, sc, -np.inf)
    sc = sc - sc.max(axis=-1, keepdims=True)
    P = np.exp(sc)
    P /= P.sum(axis=-1, keepdims=True)
    o = merge(P @ v)
    y = o @ Wov + bov

    def back(g):
        g2 = _flat2(g)
        gWo = _flat2(o).T @ g2
        gbo = g2.sum(axis=0)
        go = split(g @ Wov.T)
        gP = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(P, -1, -2) @ go
        gs = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * rt
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        gq, gk, gv = merge(gq), merge(gk), merge(gv)
        x2 = _flat2(xv)
        gx = gq @ Wqv.T + gk @ Wkv.T + gv @ Wvv.T
        return (gx,
                x2.T @ _flat2(gq), _flat2(gq).sum(axis=0),
                x2.T @ _flat2(gk),
                x2.T @ _flat2(gv), _flat2(gv).sum(axis=0),
                gWo, gbo)

    return _node(y, (x,) + ws, back)


def cross_entropy(logits, targets, weights=None) -> Var:
    """Weighted mean token cross-entropy (natural log).

    ``weights`` (same shape as ``targets``) selects the predicted positions;
    the mean is taken over the total weight.
    """
    logits = as_var(logits)
    targets = np.asarray(targets)
    lv = logits.value
    if lv.shape[:-1] != targets.shape:
        raise ConfigError(f"cross_entropy: logits {lv.shape} vs targets {targets.shape}")
    V = lv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ConfigError("cross_entropy: target id out of range")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if not wsum > 0:
        raise DomainError("cross_entropy: empty prediction set")
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float((w * nll).sum() / wsum)

    def back(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w / wsum)[..., None] * g,)

    return _node(loss, (logits,), back)


# --------------------------------------------------------------------------
# gradient engine
# --------------------------------------------------------------------------

def _topo(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf reachable from ``loss``."""
    if loss.value.size != 1:
        raise ConfigError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward called twice on the same forward pass")
    if loss._backward is None and not loss._parents and not isinstance(loss, Parameter):
        raise StateError("backward: no recorded forward pass")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._backward = None
        node._parents = ()
    loss._consumed = True


def grad_check(fn: Callable[[Var], Var], point, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` maps a :class:`Var` to a scalar :class:`Var`. The error per coordinate
    is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    point = np.array(point, dtype=np.float64)
    x = Var(point)
    out = fn(x)
    if out._parents:
        backward(out)
    analytic = np.zeros_like(point) if x.grad is None else x.grad
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(Var(point)).value)
            flat[i] = orig - eps
            fm = float(fn(Var(point)).value)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value at coordinate {i}")
            nflat[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")
    return relative_error(analytic, numeric)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.abs(analytic), np.abs(numeric)
    den = np.maximum(np.maximum(a, n), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / den)) if analytic.size else 0.0


def grad_check_params(loss_fn: Callable[[], Var], params, eps: float = 1e-5,
                      max_coords: int | None = None, rng=None) -> float:
    """Like :func:`grad_check` but with respect to the values of ``params``.

    ``loss_fn`` rebuilds the graph from the current parameter values. With
    ``max_coords`` only a random subset of coordinates per parameter is
    perturbed.
    """
    params = list(params)
    zero_grads(params)
    backward(loss_fn())
    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    with no_grad():
        for p in params:
            flat = p.value.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss_fn().value)
                flat[i] = orig - eps
                fm = float(loss_fn().value)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite value in {p.name}[{i}]")
                num[j] = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(p.grad.reshape(-1)[idx], num))
    return worst
