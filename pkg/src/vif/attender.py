"""CVAE attender: prior p(z | V, Q) and posterior q(z | V, Q, A) branches.

Both branches share one architecture with separate parameters: a
bidirectional cross-attention between visual and text tokens, a fusion
self-attention over the joined sequence, mean pooling, a feed-forward block
and two linear heads for the diagonal Gaussian. The heads emit ``K * D_z``
values so slice k of a sample is the latent of mixture component k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, clip, concat, exp, mean

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 10.0


@dataclass
class DiagGaussian:
    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_var.data / 2.0)


@dataclass
class LatentSample:
    z: Tensor
    epsilon: np.ndarray


def _batched(x: Tensor) -> Tensor:
    return x if x.ndim == 3 else x.reshape((1,) + x.shape)


class Branch:
    """One encoder branch; ``encode`` maps (visual, text) hidden states to a DiagGaussian."""

    def __init__(self, d_model: int, latent_dim: int, n_heads: int, rng, prefix: str, zero_heads: bool = False):
        self.prefix = prefix
        self.n_heads = n_heads
        self.d_model = d_model
        self.latent_dim = latent_dim
        p: dict[str, Tensor] = {}
        for part in ("vt", "tv", "fuse"):
            nn.init_ln(p, f"ln_{part}_q", d_model)
            nn.init_mha(p, part, d_model, rng)
        nn.init_ln(p, "ln_vt_kv", d_model)
        nn.init_ln(p, "ln_tv_kv", d_model)
        nn.init_ln(p, "ln_ffn", d_model)
        nn.init_ffn(p, "ffn", d_model, 2 * d_model, rng)
        head_std = 0.0 if zero_heads else 0.02
        p["mu.w"] = nn.normal(rng, (d_model, latent_dim), head_std, "mu.w")
        p["mu.b"] = nn.zeros(latent_dim, "mu.b")
        p["lv.w"] = nn.normal(rng, (d_model, latent_dim), head_std, "lv.w")
        p["lv.b"] = nn.zeros(latent_dim, "lv.b")
        self.params = p

    def named_params(self) -> dict:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def encode(self, V: Tensor, text: Tensor) -> DiagGaussian:
        single = V.ndim == 2
        V, text = _batched(V), _batched(text)
        if text.shape[1] == 0:
            raise ContractError("text input is empty", module="attender")
        if V.shape[-1] != self.d_model or text.shape[-1] != self.d_model:
            raise DimensionError(f"attender expects width {self.d_model}", module="attender")
        p, H = self.params, self.n_heads
        v1 = V + nn.mha(nn.ln(V, p, "ln_vt_q"), nn.ln(text, p, "ln_vt_kv"), p, "vt", H)
        t1 = text + nn.mha(nn.ln(text, p, "ln_tv_q"), nn.ln(V, p, "ln_tv_kv"), p, "tv", H)
        x = concat([v1, t1], axis=1)
        h = nn.ln(x, p, "ln_fuse_q")
        x = x + nn.mha(h, h, p, "fuse", H)
        pooled = mean(x, axis=1)
        pooled = pooled + nn.ffn(nn.ln(pooled, p, "ln_ffn"), p, "ffn")
        mu = nn.linear(pooled, p["mu.w"], p["mu.b"])
        log_var = clip(nn.linear(pooled, p["lv.w"], p["lv.b"]), LOG_VAR_MIN, LOG_VAR_MAX)
        if single:
            mu, log_var = mu[0], log_var[0]
        return DiagGaussian(mu, log_var)


class Attender:
    """Prior and posterior branches for one (extraction, injection) layer pair."""

    def __init__(self, d_model: int, n_components: int = 16, latent_dim: int = 32, n_heads: int = 4,
                 seed: int = 0, prefix: str = "attender", zero_heads: bool = False):
        rng = np.random.default_rng(seed)
        self.n_components = n_components
        self.latent_dim = latent_dim
        total = n_components * latent_dim
        self.prior = Branch(d_model, total, n_heads, rng, prefix + ".prior", zero_heads)
        self.posterior = Branch(d_model, total, n_heads, rng, prefix + ".posterior", zero_heads)

    def named_params(self, include_posterior: bool = True) -> dict:
        out = self.prior.named_params()
        if include_posterior:
            out.update(self.posterior.named_params())
        return out

    def encode_prior(self, V: Tensor, Q: Tensor) -> DiagGaussian:
        if Q.shape[-2] == 0:
            raise ContractError("question span is empty", module="attender")
        return self.prior.encode(V, Q)

    def encode_posterior(self, V: Tensor, Q: Tensor, A: Tensor) -> DiagGaussian:
        if A.shape[-2] == 0:
            raise ContractError("posterior needs a nonempty answer span (training only)", module="attender")
        if Q.shape[-2] == 0:
            raise ContractError("question span is empty", module="attender")
        return self.posterior.encode(V, concat([Q, A], axis=-2))


def reparameterize(g: DiagGaussian, seed=None, rng: np.random.Generator | None = None) -> LatentSample:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I); eps carries no gradient."""
    if rng is None:
        rng = np.random.default_rng(seed)
    eps = rng.standard_normal(g.mu.shape)
    z = g.mu + exp(g.log_var * 0.5) * Tensor(eps)
    return LatentSample(z, eps)


def mean_sample(g: DiagGaussian) -> LatentSample:
    """The eps = 0 sample, used for deterministic inference."""
    return LatentSample(g.mu, np.zeros(g.mu.shape))


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over latent dims and averaged over the batch."""
    if q.mu.shape != p.mu.shape or q.log_var.shape != p.log_var.shape:
        raise DimensionError("KL needs matching latent shapes", module="attender")
    for t in (q.mu, q.log_var, p.mu, p.log_var):
        if not t.is_valid():
            raise NumericError("non-finite Gaussian parameters", module="attender")
    d = q.mu - p.mu
    terms = (p.log_var - q.log_var) + (exp(q.log_var) + d * d) / exp(p.log_var) - 1.0
    per_item = terms.sum(axis=-1) * 0.5
    return per_item.mean() if per_item.ndim else per_item
