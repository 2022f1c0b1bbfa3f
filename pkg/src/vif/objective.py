"""Training objective: answer reconstruction, prior/posterior KL and mixture sparsity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import ModalityLayout
from .errors import ContractError, NumericError
from .render import SpatialMixture
from .tensor import Tensor, as_tensor, log_softmax, xlogx


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    sparsity: float
    beta: float
    gamma: float
    total: float
    total_tensor: Tensor | None = None

    def row(self) -> tuple:
        return (self.recon, self.kl, self.sparsity, self.total)


def recon_loss(logits: Tensor, targets, layout: ModalityLayout) -> Tensor:
    """Mean next-token negative log-likelihood over the answer span only."""
    a0, a1 = layout.answer_span
    if a1 == a0:
        raise ContractError("reconstruction needs a nonempty answer span", module="objective")
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape((1,) + logits.shape)
        targets = targets.reshape(1, -1)
    B = logits.shape[0]
    logp = log_softmax(logits[:, a0 - 1:a1 - 1, :])
    n = a1 - a0
    tgt = targets[:, a0:a1]
    picked = logp[np.arange(B)[:, None], np.arange(n)[None, :], tgt]
    return -picked.mean()


def sparsity_loss(mix: SpatialMixture) -> Tensor:
    """Entropy of the mixture weights plus (1/K) sum_k pi_k * spread_k^2, averaged over the batch."""
    pi, s = mix.pi, mix.spreads
    K = pi.shape[-1]
    entropy = -xlogx(pi).sum(axis=-1)
    volume = (pi * s * s).sum(axis=-1) * (1.0 / K)
    per_item = entropy + volume
    return per_item.mean() if per_item.ndim else per_item


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(recon, kl, sparsity, beta: float, gamma: float) -> LossBreakdown:
    """recon + beta * kl + gamma * sparsity, with every term checked for finiteness."""
    if beta < 0 or gamma < 0:
        raise ContractError("loss weights must be nonnegative", module="objective")
    for name, term in (("recon", recon), ("kl", kl), ("sparsity", sparsity)):
        if not math.isfinite(_value(term)):
            raise NumericError(f"non-finite {name} term", module="objective")
    total_t = None
    if any(isinstance(t, Tensor) for t in (recon, kl, sparsity)):
        total_t = as_tensor(recon) + as_tensor(kl) * beta + as_tensor(sparsity) * gamma
    r, k, s = _value(recon), _value(kl), _value(sparsity)
    total = _value(total_t) if total_t is not None else r + beta * k + gamma * s
    return LossBreakdown(r, k, s, float(beta), float(gamma), total, total_t)


def elbo(recon, kl) -> float:
    """Per-batch ELBO estimate -(recon + kl); with beta=1, gamma=0 the total loss is its negative."""
    return -(_value(recon) + _value(kl))


def beta_schedule(step: int, total_steps: int, beta: float, warmup_frac: float = 0.1) -> float:
    """Linear KL warm-up over the first ``warmup_frac`` of training."""
    warm = warmup_frac * total_steps
    if warm <= 0:
        return beta
    return beta * min(1.0, step / warm)
