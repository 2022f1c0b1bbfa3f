"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops and the ``math`` module,
on purpose: none of it shares code with the package, so agreement between
the two is evidence rather than tautology.
"""

import math


def softmax_row(xs, visible=None):
    if visible is None:
        visible = [True] * len(xs)
    top = max(x for x, v in zip(xs, visible) if v)
    exps = [math.exp(x - top) if v else 0.0 for x, v in zip(xs, visible)]
    s = math.fsum(exps)
    return [e / s for e in exps]


def layer_norm_row(xs, gamma, beta, eps=1e-5):
    n = len(xs)
    mu = math.fsum(xs) / n
    var = math.fsum((x - mu) ** 2 for x in xs) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(x - mu) * inv * g + b for x, g, b in zip(xs, gamma, beta)]


def cell_center(r, c, grid_h, grid_w):
    return ((c + 0.5) / grid_w, (r + 0.5) / grid_h)


def gmm_importance(pi, centers, spreads, grid_h, grid_w, scale=1.0):
    """Importance map: softmax over cells of sum_k pi_k exp(-|u - c_k|^2 / (2 s_k^2))."""
    raw = []
    for r in range(grid_h):
        for c in range(grid_w):
            ux, uy = cell_center(r, c, grid_h, grid_w)
            acc = 0.0
            for p, (cx, cy), s in zip(pi, centers, spreads):
                d2 = (ux - cx) ** 2 + (uy - cy) ** 2
                acc += p * math.exp(-d2 / (2.0 * s * s))
            raw.append(acc)
    return softmax_row([scale * v for v in raw]), raw


def sparsity(pi, spreads):
    K = len(pi)
    ent = -math.fsum(p * math.log(p) for p in pi if p > 0)
    vol = math.fsum(p * s * s for p, s in zip(pi, spreads)) / K
    return ent + vol


def kl_diag(mu_q, lv_q, mu_p, lv_p):
    total = 0.0
    for a, la, b, lb in zip(mu_q, lv_q, mu_p, lv_p):
        total += 0.5 * (lb - la + (math.exp(la) + (a - b) ** 2) / math.exp(lb) - 1.0)
    return total


def log_normal_diag(x, mu, lv):
    return math.fsum(-0.5 * (math.log(2 * math.pi) + l + (v - m) ** 2 / math.exp(l)) for v, m, l in zip(x, mu, lv))


def inject_row(p_row, bias, alpha, visible):
    """Add alpha * bias, zero invisible entries, renormalize."""
    q = [(p + alpha * b) if v else 0.0 for p, b, v in zip(p_row, bias, visible)]
    s = math.fsum(q)
    return [x / s for x in q]


def entropy(ps):
    return -math.fsum(p * math.log(p) for p in ps if p > 0)


def visual_entropy_row(row, n_visual):
    v = row[:n_visual]
    s = math.fsum(v)
    return entropy([x / s for x in v])
