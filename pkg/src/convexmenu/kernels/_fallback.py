"""Pure-numpy versions of the hot loops.

Every function works on a *weight pack*: the effective affine maps of one
Partial GroupMax Network, flattened per sample. ``pack`` is either 1-D
(one set of maps shared by every row of the batch) or 2-D ``(B, P)``.
The layout is described by ``(K, d_x, G, E)``; see :func:`pack_size`.
"""
from __future__ import annotations

import numpy as np

TIE_TOL = 1e-9


def pack_size(K: int, dx: int, G: int, E: int) -> int:
    h = G * E
    size = 0
    for k in range(K):
        din = dx if k == 0 else G
        size += h * din + h
        if k >= 1:
            size += h * dx
    dlast = G if K >= 1 else dx
    return size + dlast + dx + 1


def unpack(pack: np.ndarray, layout):
    """Split a pack into ``[(Wx, Wr or None, b), ...]`` and ``(wx, wr, b)`` views."""
    K, dx, G, E = layout
    h = G * E
    lead = pack.shape[:-1]
    i = 0

    def cut(*shape):
        nonlocal i
        n = int(np.prod(shape))
        out = pack[..., i : i + n].reshape(lead + shape)
        i += n
        return out

    layers = []
    for k in range(K):
        Wx = cut(h, dx if k == 0 else G)
        Wr = cut(h, dx) if k >= 1 else None
        b = cut(h)
        layers.append((Wx, Wr, b))
    wx = cut(G if K >= 1 else dx)
    wr = cut(dx)
    b = cut(1)
    if i != pack.shape[-1]:
        raise ValueError(f"pack has {pack.shape[-1]} entries, layout needs {i}")
    return layers, (wx, wr, b)


def _apply(W, v):
    if W.ndim == 2:
        return v @ W.T
    return np.einsum("bij,bj->bi", W, v)


def _apply_t(W, g):
    if W.ndim == 2:
        return g @ W
    return np.einsum("bij,bi->bj", W, g)


def value_and_xgrad(pack, layout, x, soft_beta=np.inf):
    """Network value ``f(x)`` and ``df/dx`` for every row of ``x``."""
    K, dx, G, E = layout
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    layers, (wx, wr, b) = unpack(np.asarray(pack, dtype=np.float64), layout)
    cur = x
    weights = []
    for Wx, Wr, bk in layers:
        hk = _apply(Wx, cur) + bk
        if Wr is not None:
            hk = hk + _apply(Wr, x)
        hg = hk.reshape(B, G, E)
        if np.isinf(soft_beta):
            idx = np.argmax(hg, axis=-1)
            out = np.take_along_axis(hg, idx[..., None], axis=-1)[..., 0]
            w = np.zeros_like(hg)
            np.put_along_axis(w, idx[..., None], 1.0, axis=-1)
        else:
            m = hg.max(axis=-1, keepdims=True)
            e = np.exp(soft_beta * (hg - m))
            s = e.sum(axis=-1, keepdims=True)
            out = m[..., 0] + np.log(s[..., 0]) / soft_beta
            w = e / s
        weights.append(w)
        cur = out
    f = np.sum(wx * cur, axis=-1) + np.sum(wr * x, axis=-1) + b[..., 0]
    gcur = np.broadcast_to(wx, cur.shape).copy()
    gx = np.broadcast_to(wr, x.shape).copy()
    for (Wx, Wr, _), w in zip(reversed(layers), reversed(weights)):
        gh = (gcur[:, :, None] * w).reshape(B, G * E)
        if Wr is not None:
            gx += _apply_t(Wr, gh)
        gcur = _apply_t(Wx, gh)
    gx += gcur
    return np.broadcast_to(f, (B,)).copy(), gx


def _rows(pack, idx):
    return pack if pack.ndim == 1 else pack[idx]


def ascend(fgrad, t, x0, iters, lr0, lr1, momentum):
    """Projected momentum ascent of ``<t, x> - f(x)`` over ``[0, 1]^d``.

    ``fgrad(x, rows)`` returns ``(f, df/dx)`` for the given rows of the batch.
    Rows whose iterate provably cannot move again are retired early; the
    result is identical to running every row for ``iters`` steps. A final
    pass raises each coordinate to 1 when that does not lower the utility
    by more than ``TIE_TOL``.
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    v = np.zeros_like(x)
    active = np.arange(x.shape[0])
    decay = (lr1 / lr0) ** (1.0 / max(iters - 1, 1))
    lr = lr0
    for _ in range(iters):
        if active.size == 0:
            break
        xa = x[active]
        _, gf = fgrad(xa, active)
        g = t[active] - gf
        va = momentum * v[active] + lr * g
        xn = np.clip(xa + va, 0.0, 1.0)
        v[active] = va
        x[active] = xn
        frozen = (
            ((xn >= 1.0) & (va >= 0) & (g >= 0))
            | ((xn <= 0.0) & (va <= 0) & (g <= 0))
            | ((va == 0) & (g == 0))
        )
        done = np.all(frozen & (xn == xa), axis=1)
        active = active[~done]
        lr *= decay
    rows = np.arange(x.shape[0])
    for j in range(x.shape[1]):
        cand = x.copy()
        cand[:, j] = 1.0
        u = np.sum(t * x, axis=-1) - fgrad(x, rows)[0]
        uc = np.sum(t * cand, axis=-1) - fgrad(cand, rows)[0]
        take = uc >= u - TIE_TOL
        x[take] = cand[take]
    return x


def best_response(pack, layout, t, x0, iters, lr0, lr1, momentum, soft_beta=np.inf):
    """:func:`ascend` on the network described by ``pack``."""
    pack = np.asarray(pack, dtype=np.float64)

    def fgrad(x, rows):
        return value_and_xgrad(_rows(pack, rows), layout, x, soft_beta)

    return ascend(fgrad, t, x0, iters, lr0, lr1, momentum)


def reflect_unit(y):
    """Fold values back into ``[0, 1]`` by mirroring at the faces."""
    y = np.mod(y, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def langevin(pack, layout, t, y, noise, eta, beta, soft_beta=np.inf, reflect=True):
    """``len(noise)`` Euler-Maruyama steps on ``beta * (<t, y> - f(y))``."""
    pack = np.asarray(pack, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    sigma = np.sqrt(2.0 * eta / beta) if np.isfinite(beta) else 0.0
    for eps in noise:
        _, gf = value_and_xgrad(pack, layout, y, soft_beta)
        y = y + eta * (t - gf) + sigma * eps
        y = reflect_unit(y) if reflect else np.clip(y, 0.0, 1.0)
    return y
