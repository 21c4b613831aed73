"""Differentiable array operations.

Each op computes its forward value with numpy and, when a Tape is active
and some input requires gradients, records a closure mapping the output
gradient to per-input gradients. Constants (plain ndarrays, floats, frozen
Tensors) never receive gradients.

All values are float64. Integer data (token ids, expert indices) travels
as plain ndarrays outside the tape.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, require
from .tape import Tensor, active_tape

__all__ = [
    "add", "sub", "mul", "scale", "mul_const", "matmul", "linear",
    "sum_all", "mean_all", "sum_axis0", "reshape", "softmax",
    "softmax_rows", "topk_renorm", "topk_renorm_rows", "cross_entropy",
    "embedding", "rmsnorm", "silu", "causal_attention", "mask_scale",
    "take_scalar", "take_col", "expert_mix",
]


def _emit(inputs: tuple[Tensor, ...], out_value: np.ndarray, vjp) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit((a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit((a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))

    return _emit((a, b), out, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.value * c

    def vjp(g):
        return (g * c,)

    return _emit((a,), out, vjp)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (mask, weighting)."""
    c = np.asarray(c, dtype=np.float64)
    out = a.value * c

    def vjp(g):
        return (_unbroadcast(g * c, a.shape),)

    return _emit((a,), out, vjp)


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    require(av.ndim in (1, 2) and bv.ndim in (1, 2), ConfigError,
            f"matmul expects 1-D or 2-D operands, got {av.shape} @ {bv.shape}")
    inner_a = av.shape[-1]
    inner_b = bv.shape[0]
    require(inner_a == inner_b, ConfigError,
            f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        g = np.asarray(g)
        if av.ndim == 2 and bv.ndim == 2:
            da = g @ bv.T if a.requires_grad else None
            db = av.T @ g if b.requires_grad else None
        elif av.ndim == 2 and bv.ndim == 1:
            da = np.outer(g, bv) if a.requires_grad else None
            db = av.T @ g if b.requires_grad else None
        elif av.ndim == 1 and bv.ndim == 2:
            da = g @ bv.T if a.requires_grad else None
            db = np.outer(av, g) if b.requires_grad else None
        else:
            da = g * bv if a.requires_grad else None
            db = g * av if b.requires_grad else None
        return da, db

    return _emit((a, b), out, vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T with w stored (n_out, n_in); x is (..., n_in)."""
    xv, wv = x.value, w.value
    require(wv.ndim == 2, ConfigError,
            f"linear weight must be 2-D, got {wv.shape}")
    require(xv.shape[-1] == wv.shape[1], ConfigError,
            f"linear shape mismatch: x {xv.shape} vs w {wv.shape}")
    out = xv @ wv.T

    def vjp(g):
        dx = g @ wv if x.requires_grad else None
        if w.requires_grad:
            g2 = g.reshape(-1, wv.shape[0])
            x2 = xv.reshape(-1, wv.shape[1])
            dw = g2.T @ x2
        else:
            dw = None
        return dx, dw

    return _emit((x, w), out, vjp)


# --------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.value.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(np.float64),)

    return _emit((a,), out, vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    require(n > 0, ConfigError, "mean of empty tensor")
    out = np.asarray(a.value.mean())

    def vjp(g):
        return (np.full(a.shape, float(g) / n),)

    return _emit((a,), out, vjp)


def sum_axis0(a: Tensor) -> Tensor:
    require(a.value.ndim >= 1, ConfigError, "sum_axis0 needs ndim >= 1")
    out = a.value.sum(axis=0)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(np.float64).copy(),)

    return _emit((a,), out, vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _emit((a,), out, vjp)


# ----------------------------------------------------------------- softmax

def _softmax_last(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v: Tensor) -> Tensor:
    """Softmax of a 1-D vector, max-subtracted for stability."""
    require(v.value.ndim == 1, ConfigError,
            f"softmax expects a 1-D vector, got shape {v.shape}")
    require(np.all(np.isfinite(v.value)), DataError,
            "softmax input contains non-finite entries")
    s = _softmax_last(v.value)

    def vjp(g):
        return (s * (g - float(g @ s)),)

    return _emit((v,), s, vjp)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a 2-D (or higher) array."""
    require(m.value.ndim >= 2, ConfigError,
            f"softmax_rows expects ndim >= 2, got shape {m.shape}")
    require(np.all(np.isfinite(m.value)), DataError,
            "softmax_rows input contains non-finite entries")
    s = _softmax_last(m.value)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit((m,), s, vjp)


# ------------------------------------------------------------- top-k gating

def _topk_indices_rows(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lowest index,
    returned in ascending index order. Shape (rows, k)."""
    order = np.argsort(-p, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def topk_renorm(probs: Tensor, k: int) -> tuple[np.ndarray, Tensor]:
    """Select the k largest entries of a 1-D probability vector and
    renormalize them to sum to one.

    Returns (indices ascending, scores aligned with indices). Ties break
    toward the lower index. Gradients flow to the selected entries only,
    through the exact renormalization Jacobian.
    """
    p = probs.value
    require(p.ndim == 1, ConfigError,
            f"topk_renorm expects a 1-D vector, got shape {probs.shape}")
    n = p.shape[0]
    require(1 <= k <= n, ConfigError,
            f"k must be in [1, {n}], got {k}")
    idx = _topk_indices_rows(p[None, :], k)[0]
    sel = p[idx]
    z = sel.sum()
    require(z > 0, DataError, "top-k mass is zero; cannot renormalize")
    scores = sel / z

    def vjp(g):
        dp = np.zeros_like(p)
        dp[idx] = (g - float(g @ scores)) / z
        return (dp,)

    return idx, _emit((probs,), scores, vjp)


def topk_renorm_rows(probs: Tensor, k: int) -> tuple[np.ndarray, Tensor]:
    """Row-wise top-k renormalization for a (rows, n) probability matrix.

    Returns (indices (rows, k) ascending per row, weights (rows, n)) where
    weights holds the renormalized scores at selected columns and exact
    zeros elsewhere. The zeros are structural: no gradient flows through
    unselected columns.
    """
    p = probs.value
    require(p.ndim == 2, ConfigError,
            f"topk_renorm_rows expects 2-D, got shape {probs.shape}")
    rows, n = p.shape
    require(1 <= k <= n, ConfigError, f"k must be in [1, {n}], got {k}")
    idx = _topk_indices_rows(p, k)
    sel = np.take_along_axis(p, idx, axis=1)
    z = sel.sum(axis=1, keepdims=True)
    require(np.all(z > 0), DataError, "top-k mass is zero in some row")
    w = np.zeros_like(p)
    np.put_along_axis(w, idx, sel / z, axis=1)

    def vjp(g):
        gsel = np.take_along_axis(g, idx, axis=1)
        wsel = np.take_along_axis(w, idx, axis=1)
        dot = (gsel * wsel).sum(axis=1, keepdims=True)
        dp = np.zeros_like(p)
        np.put_along_axis(dp, idx, (gsel - dot) / z, axis=1)
        return (dp,)

    return idx, _emit((probs,), w, vjp)


# ----------------------------------------------------------------- indexing

def take_scalar(v: Tensor, i: int) -> Tensor:
    """Extract entry i of a 1-D vector as a differentiable scalar."""
    require(v.value.ndim == 1, ConfigError,
            f"take_scalar expects a 1-D vector, got shape {v.shape}")
    require(0 <= i < v.value.shape[0], ConfigError,
            f"index {i} out of range [0, {v.value.shape[0]})")
    out = np.asarray(v.value[i])

    def vjp(g):
        d = np.zeros_like(v.value)
        d[i] = float(g)
        return (d,)

    return _emit((v,), out, vjp)


def take_col(m: Tensor, j: int) -> Tensor:
    """Extract column j of a 2-D matrix as a differentiable vector."""
    require(m.value.ndim == 2, ConfigError,
            f"take_col expects 2-D, got shape {m.shape}")
    require(0 <= j < m.value.shape[1], ConfigError,
            f"column {j} out of range [0, {m.value.shape[1]})")
    out = m.value[:, j].copy()

    def vjp(g):
        d = np.zeros_like(m.value)
        d[:, j] = g
        return (d,)

    return _emit((m,), out, vjp)


# ------------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over rows of (positions, vocab) logits.

    targets holds one class id per row. With a mask, rows where mask is 0
    contribute nothing and the mean runs over the masked-in rows only.
    """
    lv = logits.value
    require(lv.ndim == 2, ConfigError,
            f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    t = np.asarray(targets)
    require(t.shape == (lv.shape[0],), ConfigError,
            f"targets shape {t.shape} does not match logits rows {lv.shape[0]}")
    vocab = lv.shape[1]
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise DataError(f"target id out of range [0, {vocab})")
    if mask is None:
        m = np.ones(lv.shape[0], dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        require(m.shape == (lv.shape[0],), ConfigError,
                f"mask shape {m.shape} does not match logits rows")
    denom = m.sum()
    require(denom > 0, ConfigError, "cross_entropy mask selects no rows")

    mx = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - mx)
    z = e.sum(axis=1)
    p = e / z[:, None]
    rows = np.arange(lv.shape[0])
    nll = np.log(z) + mx[:, 0] - lv[rows, t]
    out = np.asarray((m * nll).sum() / denom)

    def vjp(g):
        d = p.copy()
        d[rows, t] -= 1.0
        d *= (m / denom)[:, None] * float(g)
        return (d,)

    return _emit((logits,), out, vjp)


# -------------------------------------------------------------- model parts

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    tv = table.value
    require(tv.ndim == 2, ConfigError,
            f"embedding table must be 2-D, got shape {table.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise DataError(f"id out of range [0, {tv.shape[0]})")
    out = tv[ids]

    def vjp(g):
        if not table.requires_grad:
            return (None,)
        dt = np.zeros_like(tv)
        np.add.at(dt, ids, g)
        return (dt,)

    return _emit((table,), out, vjp)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    xv, gv = x.value, gain.value
    require(gv.ndim == 1 and xv.shape[-1] == gv.shape[0], ConfigError,
            f"rmsnorm gain shape {gain.shape} does not match x {x.shape}")
    ms = (xv * xv).mean(axis=-1, keepdims=True) + eps
    r = np.sqrt(ms)
    u = xv / r
    out = u * gv

    def vjp(g):
        du = g * gv
        if x.requires_grad:
            dot = (du * u).mean(axis=-1, keepdims=True)
            dx = (du - u * dot) / r
        else:
            dx = None
        if gain.requires_grad:
            dgain = (g * u).reshape(-1, gv.shape[0]).sum(axis=0)
        else:
            dgain = None
        return dx, dgain

    return _emit((x, gain), out, vjp)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xv = x.value
    sig = 1.0 / (1.0 + np.exp(-xv))
    out = xv * sig

    def vjp(g):
        return (g * sig * (1.0 + xv * (1.0 - sig)),)

    return _emit((x,), out, vjp)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    q, k, v are (batch, time, dim); dim must divide evenly into n_heads.
    Position i attends to positions <= i.
    """
    qv, kv, vv = q.value, k.value, v.value
    require(qv.ndim == 3, ConfigError,
            f"attention expects (batch, time, dim), got {q.shape}")
    require(qv.shape == kv.shape == vv.shape, ConfigError,
            f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    b, t, d = qv.shape
    require(d % n_heads == 0, ConfigError,
            f"dim {d} not divisible by n_heads {n_heads}")
    hd = d // n_heads

    def split(a):
        return a.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(qv), split(kv), split(vv)
    inv = 1.0 / np.sqrt(hd)
    scores = (qh @ kh.swapaxes(-1, -2)) * inv
    neg = np.triu(np.full((t, t), -np.inf), k=1)
    w = _softmax_last(scores + neg)
    outh = w @ vh
    out = outh.transpose(0, 2, 1, 3).reshape(b, t, d)

    def vjp(g):
        gh = g.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)
        dw = gh @ vh.swapaxes(-1, -2)
        dvh = w.swapaxes(-1, -2) @ gh
        dot = (dw * w).sum(axis=-1, keepdims=True)
        ds = w * (dw - dot) * inv
        dqh = ds @ kh
        dkh = ds.swapaxes(-1, -2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(b, t, d)

        return (merge(dqh) if q.requires_grad else None,
                merge(dkh) if k.requires_grad else None,
                merge(dvh) if v.requires_grad else None)

    return _emit((q, k, v), out, vjp)


def expert_mix(code: Tensor, weights: Tensor, experts: list[Tensor]) -> Tensor:
    """Row-weighted sum of per-expert up-projections of a shared code.

    out[t] = sum_e weights[t, e] * (experts[e] @ code[t]); code is
    (rows, r), weights is (rows, n_experts), each expert matrix is
    (d_out, r). Fused form of the mixture loop: one tape record instead
    of four per expert, same values and gradients.
    """
    cv, wv = code.value, weights.value
    require(cv.ndim == 2 and wv.ndim == 2, ConfigError,
            f"expert_mix expects 2-D code/weights, got {code.shape}, "
            f"{weights.shape}")
    require(wv.shape == (cv.shape[0], len(experts)), ConfigError,
            f"weights shape {weights.shape} does not match "
            f"{cv.shape[0]} rows x {len(experts)} experts")
    ups = []
    out = None
    for e, b in enumerate(experts):
        require(b.value.shape[1] == cv.shape[1], ConfigError,
                f"expert {e} rank {b.value.shape[1]} does not match "
                f"code rank {cv.shape[1]}")
        up = cv @ b.value.T
        ups.append(up)
        term = wv[:, e:e + 1] * up
        out = term if out is None else out + term

    def vjp(g):
        dcode = None
        dweights = np.empty_like(wv) if weights.requires_grad else None
        dbs = []
        for e, b in enumerate(experts):
            col = wv[:, e:e + 1]
            gw = g * col
            if code.requires_grad:
                part = gw @ b.value
                dcode = part if dcode is None else dcode + part
            if dweights is not None:
                dweights[:, e] = (g * ups[e]).sum(axis=1)
            dbs.append(gw.T @ cv if b.requires_grad else None)
        return (dcode, dweights, *dbs)

    return _emit((code, weights, *experts), out, vjp)


def mask_scale(x: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Apply a fixed 0/1 mask and rescale by 1/keep_prob.

    The mask is a constant for differentiation: gradients pass through the
    kept entries scaled the same way the forward values were.
    """
    require(0.0 < keep_prob <= 1.0, ConfigError,
            f"keep_prob must be in (0, 1], got {keep_prob}")
    m = np.asarray(mask, dtype=np.float64)
    factor = m / keep_prob
    out = x.value * factor

    def vjp(g):
        return (_unbroadcast(g * factor, x.shape),)

    return _emit((x,), out, vjp)
