"""Toy decoder-only multimodal transformer.

Sequences are laid out as ``[visual grid | question | answer]``. The visual
prefix attends bidirectionally within itself; every text position is causal
and sees the whole visual prefix. The forward pass exposes post-softmax
attention probabilities and lets a patch callback replace them at chosen
layers before value aggregation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigError, InvariantError, LayoutError, VocabError
from .tensor import Tensor, concat, embedding, matmul

ROWSUM_TOL = 1e-6


@dataclass(frozen=True)
class ModalityLayout:
    visual_span: tuple
    question_span: tuple
    answer_span: tuple
    grid_h: int
    grid_w: int

    def __post_init__(self):
        spans = (self.visual_span, self.question_span, self.answer_span)
        for s in spans:
            if len(s) != 2 or s[0] > s[1]:
                raise LayoutError(f"bad span {s}", module="backbone")
        if self.visual_span[0] != 0:
            raise LayoutError("visual span must start the sequence", module="backbone")
        if self.visual_span[1] != self.question_span[0] or self.question_span[1] != self.answer_span[0]:
            raise LayoutError("spans must be contiguous and ordered visual < question < answer", module="backbone")
        if self.grid_h <= 0 or self.grid_w <= 0:
            raise LayoutError("grid dims must be positive", module="backbone")
        if self.grid_h * self.grid_w != self.n_visual:
            raise LayoutError(
                f"grid {self.grid_h}x{self.grid_w} does not match {self.n_visual} visual tokens", module="backbone"
            )

    @classmethod
    def build(cls, grid_h: int, grid_w: int, n_question: int, n_answer: int = 0) -> "ModalityLayout":
        nv = grid_h * grid_w
        return cls((0, nv), (nv, nv + n_question), (nv + n_question, nv + n_question + n_answer), grid_h, grid_w)

    @property
    def T(self) -> int:
        return self.answer_span[1]

    @property
    def n_visual(self) -> int:
        return self.visual_span[1] - self.visual_span[0]

    @property
    def n_question(self) -> int:
        return self.question_span[1] - self.question_span[0]

    @property
    def n_answer(self) -> int:
        return self.answer_span[1] - self.answer_span[0]

    def without_answer(self) -> "ModalityLayout":
        return ModalityLayout(self.visual_span, self.question_span, (self.question_span[1],) * 2, self.grid_h, self.grid_w)

    def visibility(self) -> np.ndarray:
        """Boolean [T, T]; entry (i, j) says whether query i may attend to key j."""
        T, nv = self.T, self.n_visual
        vis = np.tril(np.ones((T, T), dtype=bool))
        vis[:nv, :nv] = True
        return vis

    def generation_rows(self) -> np.ndarray:
        """Query rows whose next-token logits produce the answer."""
        if self.n_answer == 0:
            return np.array([self.T - 1])
        return np.arange(self.answer_span[0] - 1, self.answer_span[1] - 1)

    def text_rows(self) -> np.ndarray:
        return np.arange(self.question_span[0], self.answer_span[1])

    def cell_coords(self) -> np.ndarray:
        """(row, col) of every visual token in raster order."""
        r, c = np.divmod(np.arange(self.n_visual), self.grid_w)
        return np.stack([r, c], axis=1)


@dataclass
class BackboneConfig:
    vocab_size: int
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    max_seq: int = 96
    grid_h: int = 8
    grid_w: int = 8
    ff_mult: int = 4
    n_features: int = 0
    grid_row_feature: int = -1
    grid_col_feature: int = -1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads", module="backbone")
        if min(self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.max_seq, self.grid_h, self.grid_w) <= 0:
            raise ConfigError("config sizes must be positive", module="backbone")
        if self.grid_h * self.grid_w > self.max_seq:
            raise ConfigError("visual grid does not fit in max_seq", module="backbone")
        if self.grid_row_feature >= 0 and self.grid_row_feature + self.grid_h > self.n_features:
            raise ConfigError("row features exceed the feature table", module="backbone")
        if self.grid_col_feature >= 0 and self.grid_col_feature + self.grid_w > self.n_features:
            raise ConfigError("column features exceed the feature table", module="backbone")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: int(d[k]) for k in keys if k in d})


@dataclass
class AttentionTensor:
    """Post-softmax attention probabilities [B, H, T, T] plus the visibility mask [T, T]."""

    probs: Tensor
    mask: np.ndarray

    def check(self, tol: float = ROWSUM_TOL) -> float:
        """Validate the simplex invariants; returns the max row-sum deviation."""
        p = self.probs.data
        if p.shape[-2:] != self.mask.shape:
            raise InvariantError(f"attention shape {p.shape} does not match mask {self.mask.shape}", module="backbone")
        if not np.isfinite(p).all():
            raise InvariantError("attention has non-finite entries", module="backbone")
        if (p < 0).any():
            raise InvariantError("attention has negative entries", module="backbone")
        if (p[..., ~self.mask] != 0).any():
            raise InvariantError("attention is nonzero at masked positions", module="backbone")
        dev = float(np.abs(p.sum(axis=-1) - 1.0).max())
        if dev > tol:
            raise InvariantError(f"attention rows deviate from 1 by {dev:.3g}", module="backbone")
        return dev


@dataclass
class LayerTrace:
    """Hidden states entering each hooked layer and the attention it used."""

    hidden: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    original_attention: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.hidden)


PatchFn = Callable[[int, AttentionTensor], AttentionTensor]
ResidualFn = Callable[[int, Tensor], Tensor]


class Backbone:
    """Pre-norm transformer over [visual | question | answer] sequences.

    With ``n_features > 0`` every token also embeds a multi-hot row of
    ``token_features`` through a shared feature table, and visual cell (r, c)
    additionally embeds features ``grid_row_feature + r`` and
    ``grid_col_feature + c``; this lets symbolic attributes (a patch's color,
    a question's row word, a cell's row) share one embedding.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, token_features=None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        p = self.params
        # one scale, 1/sqrt(d_model), for every matrix. The GPT-style 0.02 leaves
        # query-key products so small at d_model=64 that content lookups stall at
        # the answer-type prior for thousands of steps.
        std = 1.0 / np.sqrt(d)
        p["tok_emb"] = nn.normal(rng, (c.vocab_size, d), std, "tok_emb")
        p["pos_emb"] = nn.normal(rng, (c.max_seq, d), std, "pos_emb")
        p["grid_row"] = nn.normal(rng, (c.grid_h, d), std, "grid_row")
        p["grid_col"] = nn.normal(rng, (c.grid_w, d), std, "grid_col")
        for i in range(c.n_layers):
            nn.init_ln(p, f"l{i}.ln1", d)
            nn.init_mha(p, f"l{i}.attn", d, rng, std=std)
            nn.init_ln(p, f"l{i}.ln2", d)
            nn.init_ffn(p, f"l{i}.ffn", d, c.ff_mult * d, rng, std=std)
        nn.init_ln(p, "ln_f", d)
        p["head"] = nn.normal(rng, (d, c.vocab_size), std, "head")
        self.token_features = None
        if c.n_features:
            p["feat_emb"] = nn.normal(rng, (c.n_features, d), std, "feat_emb")
            f = np.zeros((c.vocab_size, c.n_features)) if token_features is None else np.asarray(token_features, float)
            if f.shape != (c.vocab_size, c.n_features):
                raise ConfigError(f"token feature matrix must be {c.vocab_size}x{c.n_features}", module="backbone")
            self.token_features = f

    def named_params(self, prefix: str = "backbone.") -> dict:
        return {prefix + k: v for k, v in self.params.items()}

    def check_layout(self, layout: ModalityLayout):
        c = self.config
        if (layout.grid_h, layout.grid_w) != (c.grid_h, c.grid_w):
            raise LayoutError(
                f"layout grid {layout.grid_h}x{layout.grid_w} does not match model grid {c.grid_h}x{c.grid_w}",
                module="backbone",
            )
        if layout.T > c.max_seq:
            raise LayoutError(f"sequence length {layout.T} exceeds max_seq {c.max_seq}", module="backbone")

    def embed(self, tokens, layout: ModalityLayout) -> Tensor:
        """Token lookup plus learned position code; visual positions also get a row+column code."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        self.check_layout(layout)
        if tokens.shape[1] != layout.T:
            raise LayoutError(f"{tokens.shape[1]} tokens for a layout of length {layout.T}", module="backbone")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabError(f"token id out of range [0, {self.config.vocab_size})")
        p = self.params
        T, nv = layout.T, layout.n_visual
        rc = layout.cell_coords()
        grid_code = embedding(p["grid_row"], rc[:, 0]) + embedding(p["grid_col"], rc[:, 1])
        pos = p["pos_emb"][:T]
        if T > nv:
            grid_code = concat([grid_code, Tensor(np.zeros((T - nv, self.config.d_model)))], axis=0)
        out = embedding(p["tok_emb"], tokens) + (pos + grid_code)
        if self.token_features is not None:
            c = self.config
            feats = self.token_features[tokens]
            if c.grid_row_feature >= 0:
                feats[:, np.arange(nv), c.grid_row_feature + rc[:, 0]] += 1.0
            if c.grid_col_feature >= 0:
                feats[:, np.arange(nv), c.grid_col_feature + rc[:, 1]] += 1.0
            out = out + matmul(Tensor(feats), p["feat_emb"])
        return out

    def attention_probs(self, hidden: Tensor, layer: int, mask) -> AttentionTensor:
        if not 0 <= layer < self.config.n_layers:
            raise ConfigError(f"layer {layer} out of range", module="backbone")
        x = nn.ln(hidden, self.params, f"l{layer}.ln1")
        probs = nn.attention_probs(x, x, self.params, f"l{layer}.attn", self.config.n_heads, mask)
        return AttentionTensor(probs, np.asarray(mask, dtype=bool))

    def run_layers(
        self,
        x: Tensor,
        layout: ModalityLayout,
        hooks=(),
        patch: PatchFn | None = None,
        trace: LayerTrace | None = None,
        residual_patch: ResidualFn | None = None,
        patch_layers=None,
        start_layer: int = 0,
        stop_layer: int | None = None,
    ) -> Tensor:
        """Run blocks ``start_layer``..``stop_layer - 1`` on the residual stream ``x``.

        Without ``stop_layer`` the result is the output logits; with it, the
        residual stream entering block ``stop_layer``.
        """
        c = self.config
        mask = layout.visibility()
        hooks = set(hooks)
        end = c.n_layers if stop_layer is None else stop_layer
        for i in range(start_layer, end):
            if residual_patch is not None:
                x = residual_patch(i, x)
            if i in hooks and trace is not None:
                trace.hidden[i] = x
            h = nn.ln(x, self.params, f"l{i}.ln1")
            att = AttentionTensor(nn.attention_probs(h, h, self.params, f"l{i}.attn", c.n_heads, mask), mask)
            if patch is not None and (patch_layers is None or i in patch_layers):
                new = patch(i, att)
                if new is not att:
                    new.check()
                    if trace is not None and i in hooks:
                        trace.original_attention[i] = att
                att = new
            if i in hooks and trace is not None:
                trace.attention[i] = att
            x = x + nn.attend(att.probs, h, self.params, f"l{i}.attn", c.n_heads)
            x = x + nn.ffn(nn.ln(x, self.params, f"l{i}.ln2"), self.params, f"l{i}.ffn")
        if stop_layer is not None:
            if stop_layer in hooks and trace is not None:
                trace.hidden[stop_layer] = x
            return x
        return nn.linear(nn.ln(x, self.params, "ln_f"), self.params["head"])

    def forward(self, tokens, layout: ModalityLayout, hooks=(), patch: PatchFn | None = None, **kwargs):
        """Returns (logits, trace). 1-D ``tokens`` give logits [T, vocab], 2-D give [B, T, vocab]."""
        single = np.asarray(tokens).ndim == 1
        trace = kwargs.pop("trace", None)
        if trace is None:
            trace = LayerTrace()
        logits = self.run_layers(self.embed(tokens, layout), layout, hooks, patch, trace, **kwargs)
        if single:
            logits = logits[0]
        return logits, trace
