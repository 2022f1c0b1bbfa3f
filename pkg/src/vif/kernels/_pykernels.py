"""NumPy reference kernels.

Same signatures and results as the compiled module; used when the extension
is not built and as the comparison side of the kernel benchmark.
"""

import numpy as np

NEG_FILL = -np.finfo(np.float64).max


def masked_softmax_fwd(x, mask):
    """Row softmax over the last axis of ``x`` (R, C).

    ``mask`` is (Rm, C) with R % Rm == 0; row r of ``x`` uses mask row
    r % Rm. Returns (y, bad_row) with bad_row = -1 unless some row is fully
    masked, in which case y is undefined.
    """
    R, C = x.shape
    Rm = mask.shape[0]
    xr = x.reshape(R // Rm, Rm, C)
    m = mask.astype(bool)[None]
    visible_any = m.any(axis=-1)
    if not visible_any.all():
        bad = np.argwhere(~np.broadcast_to(visible_any, xr.shape[:2]).reshape(-1))
        return np.empty_like(x), int(bad[0, 0])
    z = np.where(m, xr, NEG_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(z)
    e = np.where(m, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return y.reshape(R, C), -1


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gamma):
    C = xhat.shape[1]
    gxhat = g * gamma
    gx = (rstd[:, None] / C) * (
        C * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def inject_fwd(P, bias, alpha, vis):
    """Add ``alpha * bias`` to every row of ``P``, zero invisible entries, renormalize.

    P is (B, R, T), bias is (B, T), vis is (Tq, T) with row r using vis[r % Tq].
    Returns (out, rowsum, bad_row).
    """
    B, R, T = P.shape
    Tq = vis.shape[0]
    v = np.tile(vis.astype(np.float64), (R // Tq, 1))
    pre = (P + alpha * bias[:, None, :]) * v[None]
    s = pre.sum(axis=-1)
    if not (s > 0).all():
        bad = np.argwhere((s <= 0).reshape(-1))
        return np.empty_like(P), s, int(bad[0, 0])
    return pre / s[..., None], s, -1


def inject_bwd(g, out, rowsum, bias, vis):
    """Returns (grad wrt P, grad wrt bias before the alpha factor, grad wrt alpha)."""
    B, R, T = g.shape
    Tq = vis.shape[0]
    v = np.tile(vis.astype(np.float64), (R // Tq, 1))
    gpre = (g - (g * out).sum(axis=-1, keepdims=True)) / rowsum[..., None] * v[None]
    gb = gpre.sum(axis=1)
    return gpre, gb, float((gb * bias).sum())


def gmm_render_fwd(centers, spreads, grid):
    """Isotropic Gaussian responses g[b, k, n] of every component at every grid point."""
    dx = grid[None, None, :, 0] - centers[:, :, 0, None]
    dy = grid[None, None, :, 1] - centers[:, :, 1, None]
    d2 = dx * dx + dy * dy
    s2 = spreads * spreads
    return np.exp(-d2 / (2.0 * s2[:, :, None]))


def gmm_render_bwd(gg, g, centers, spreads, grid):
    dx = grid[None, None, :, 0] - centers[:, :, 0, None]
    dy = grid[None, None, :, 1] - centers[:, :, 1, None]
    s2 = (spreads * spreads)[:, :, None]
    w = gg * g
    gc = np.empty_like(centers)
    gc[:, :, 0] = (w * dx / s2).sum(axis=-1)
    gc[:, :, 1] = (w * dy / s2).sum(axis=-1)
    gs = (w * (dx * dx + dy * dy) / (s2 * spreads[:, :, None])).sum(axis=-1)
    return gc, gs


_GELU_C = 0.7978845608028654


def gelu_fwd(x):
    """tanh-approximate GELU on a flat array; also returns the tanh term for backward."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x * x))
