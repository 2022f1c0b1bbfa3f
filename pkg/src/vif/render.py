"""Decode latents into a spatial Gaussian mixture and render it over the token grid.

Grid coordinates live in the unit square: cell (r, c) of an h x w grid sits
at ((c + 0.5) / w, (r + 0.5) / h). Each component k contributes an isotropic
response ``exp(-|u - center_k|^2 / (2 spread_k^2))``; the weighted sum of
responses is softmax-normalized into the importance map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from .attender import LatentSample
from .errors import DimensionError
from .tensor import Tensor, as_tensor, gelu, make_op, matmul, reshape, sigmoid, softmax, softplus

SPREAD_FLOOR = 0.02
N_COMPONENTS = 16


@dataclass
class SpatialMixture:
    pi: Tensor  # [B, K]
    centers: Tensor  # [B, K, 2]
    spreads: Tensor  # [B, K]

    @property
    def K(self) -> int:
        return self.pi.shape[-1]


@dataclass
class ImportanceMap:
    v_hat: Tensor  # [B, N]
    raw_map: Tensor  # [B, N]


def grid_coords(grid_h: int, grid_w: int) -> np.ndarray:
    r, c = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.stack([(c + 0.5) / grid_w, (r + 0.5) / grid_h], axis=1).astype(np.float64)


class MixtureDecoder:
    """Per-slice MLP shared across components: z_k -> (center, spread, weight logit)."""

    def __init__(self, latent_dim: int = 32, hidden: int = 32, n_components: int = N_COMPONENTS,
                 seed: int = 0, prefix: str = "decoder", zero_init: bool = False, out_std: float = 0.5):
        rng = np.random.default_rng(seed)
        self.prefix = prefix
        self.latent_dim = latent_dim
        self.n_components = n_components
        std = 0.0 if zero_init else 1.0 / np.sqrt(latent_dim)
        ostd = 0.0 if zero_init else out_std / np.sqrt(hidden)
        self.params = {
            "w1": nn.normal(rng, (latent_dim, hidden), std, "w1"),
            "b1": nn.zeros(hidden, "b1"),
            "w2": nn.normal(rng, (hidden, 4), ostd, "w2"),
            "b2": nn.zeros(4, "b2"),
        }

    def named_params(self) -> dict:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def decode(self, z_set) -> SpatialMixture:
        z = z_set.z if isinstance(z_set, LatentSample) else as_tensor(z_set)
        single = z.ndim == 1
        if single:
            z = z.reshape(1, -1)
        B = z.shape[0]
        K, D = self.n_components, self.latent_dim
        if z.shape[1] != K * D:
            raise DimensionError(f"expected {K} latent slices of width {D}, got {z.shape[1]} values", module="gmm-render")
        p = self.params
        zk = reshape(z, (B, K, D))
        out = nn.linear(gelu(nn.linear(zk, p["w1"], p["b1"])), p["w2"], p["b2"])  # [B, K, 4]
        centers = sigmoid(out[:, :, 0:2])
        spreads = softplus(out[:, :, 2]) + SPREAD_FLOOR
        pi = softmax(out[:, :, 3])
        return SpatialMixture(pi, centers, spreads)


def render_components(mix: SpatialMixture, grid: np.ndarray) -> Tensor:
    """All component responses g[b, k, n]."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    c, s = mix.centers, mix.spreads
    cd, sd = c.data, s.data
    g = kernels.gmm_render_fwd(cd, sd, grid)

    def bw(gg):
        gc, gs = kernels.gmm_render_bwd(np.ascontiguousarray(gg), g, cd, sd, grid)
        return gc, gs

    return make_op(g, (c, s), bw, "gmm_render")


def render_component(k: int, mix: SpatialMixture, grid: np.ndarray) -> Tensor:
    """Response of component k at every grid point, [B, N]."""
    return render_components(mix, grid)[:, k, :]


def aggregate_and_normalize(mix: SpatialMixture, grid: np.ndarray, scale: float = 1.0) -> ImportanceMap:
    """Mixture-weighted map and its softmax.

    ``scale`` multiplies the map before the softmax; 1.0 is the plain softmax.
    """
    g = render_components(mix, grid)  # [B, K, N]
    B, K, N = g.shape
    raw = reshape(matmul(reshape(mix.pi, (B, 1, K)), g), (B, N))
    logits = raw if scale == 1.0 else raw * scale
    return ImportanceMap(softmax(logits), raw)


def map_entropy(v_hat: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each importance map row."""
    p = np.asarray(v_hat)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
