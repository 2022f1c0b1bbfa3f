"""Focal-bias injection into deep-layer attention.

For each (extraction layer l, injection layer l') pair, the hidden states
entering layer l are encoded by that pair's attender, decoded into an
importance map over the visual grid, and added to the post-softmax
attention of layer l' before masked row renormalization.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import flowstat, kernels
from .attender import Attender, DiagGaussian, LatentSample, mean_sample, reparameterize
from .backbone import AttentionTensor, Backbone, LayerTrace, ModalityLayout
from .errors import ContractError, DimensionError, LayoutError, PlanError
from .render import ImportanceMap, MixtureDecoder, SpatialMixture, aggregate_and_normalize, grid_coords
from .tensor import Tensor, as_tensor, concat, make_op

# layer pairing for a 32-layer model; shallower models use it rescaled by depth
REFERENCE_PLAN = ((11, 25), (13, 27), (15, 29), (17, 31))
REFERENCE_DEPTH = 32
DEFAULT_ALPHA = 0.5


@dataclass
class LayerPatchPlan:
    pairs: tuple
    alpha: tuple
    allow_same_layer: bool = False

    def __post_init__(self):
        self.pairs = tuple(tuple(int(x) for x in p) for p in self.pairs)
        if isinstance(self.alpha, (int, float)):
            self.alpha = (float(self.alpha),) * len(self.pairs)
        self.alpha = tuple(float(a) for a in self.alpha)
        if len(self.alpha) != len(self.pairs):
            raise PlanError("one alpha per pair is required")
        seen = set()
        for l, lp in self.pairs:
            if l > lp or (l == lp and not self.allow_same_layer):
                raise PlanError(f"extraction layer {l} must precede injection layer {lp}")
            if min(l, lp) < 0:
                raise PlanError("negative layer index")
            if lp in seen:
                raise PlanError(f"injection layer {lp} appears twice")
            seen.add(lp)
        if any(a < 0 for a in self.alpha):
            raise PlanError("alpha must be nonnegative")

    def validate(self, n_layers: int):
        for l, lp in self.pairs:
            if lp >= n_layers:
                raise PlanError(f"layer {lp} out of range for a {n_layers}-layer model")

    @property
    def extraction_layers(self) -> set:
        return {l for l, _ in self.pairs}

    @property
    def injection_layers(self) -> set:
        return {lp for _, lp in self.pairs}

    def with_alpha(self, alpha) -> "LayerPatchPlan":
        return LayerPatchPlan(self.pairs, alpha, self.allow_same_layer)

    def to_str(self) -> str:
        return ",".join(f"{l}-{lp}" for l, lp in self.pairs)

    @classmethod
    def from_str(cls, s: str, alpha=DEFAULT_ALPHA, allow_same_layer: bool = False) -> "LayerPatchPlan":
        pairs = [tuple(int(v) for v in item.split("-")) for item in s.split(",") if item.strip()] if s else []
        return cls(tuple(pairs), alpha, allow_same_layer)


def remap_layer(idx: int, n_layers: int) -> int:
    return idx * n_layers // REFERENCE_DEPTH


def default_plan(n_layers: int, alpha=DEFAULT_ALPHA, deep_only: bool = False) -> LayerPatchPlan:
    """Scale the 32-layer pairing to ``n_layers``, keeping the first pair for each injection layer."""
    pairs, seen = [], set()
    for l, lp in REFERENCE_PLAN:
        ml, mlp = remap_layer(l, n_layers), remap_layer(lp, n_layers)
        if mlp in seen:
            continue
        seen.add(mlp)
        pairs.append((mlp, mlp) if deep_only else (ml, mlp))
    return LayerPatchPlan(tuple(pairs), alpha, allow_same_layer=deep_only)


@dataclass
class PairReport:
    pair: tuple
    alpha: float
    pre_entropy: float
    post_entropy: float
    pre_ratio: float
    post_ratio: float
    max_rowsum_dev: float


@dataclass
class InjectionReport:
    pairs: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "alpha", "pre_entropy", "post_entropy", "pre_ratio", "post_ratio", "max_rowsum_dev"])
        for r in self.pairs:
            w.writerow([f"{r.pair[0]}-{r.pair[1]}", repr(r.alpha), repr(r.pre_entropy), repr(r.post_entropy),
                        repr(r.pre_ratio), repr(r.post_ratio), repr(r.max_rowsum_dev)])
        return buf.getvalue()


def build_bias(v_hat, layout: ModalityLayout, T: int | None = None, full_seq: bool = False) -> Tensor:
    """Length-T key bias: the importance map on visual columns, zero elsewhere.

    With ``full_seq`` every text column also receives the mean visual
    importance 1/N_v and the whole row is rescaled to sum to 1.
    """
    v = v_hat.v_hat if isinstance(v_hat, ImportanceMap) else as_tensor(v_hat)
    T = layout.T if T is None else T
    nv = layout.n_visual
    single = v.ndim == 1
    if single:
        v = v.reshape(1, -1)
    if v.shape[1] != nv:
        raise LayoutError(f"importance map has {v.shape[1]} cells, layout has {nv} visual tokens", module="flow-inject")
    if T < nv:
        raise LayoutError("sequence shorter than visual span", module="flow-inject")
    B = v.shape[0]
    if nv == 0:
        out = Tensor(np.zeros((B, T)))
    elif T == nv:
        out = v
    else:
        fill = 1.0 / nv if full_seq else 0.0
        out = concat([v, Tensor(np.full((B, T - nv), fill))], axis=1)
        if full_seq:
            out = out * (1.0 / (1.0 + (T - nv) / nv))
    return out[0] if single else out


def inject(flow: AttentionTensor, bias, alpha) -> AttentionTensor:
    """Add ``alpha * bias`` to every query row and head, zero invisible entries, renormalize rows."""
    P = flow.probs
    bias = as_tensor(bias)
    alpha_t = as_tensor(alpha)
    if P.ndim == 3:
        P4 = P.reshape((1,) + P.shape)
    else:
        P4 = P
    B, H, Tq, T = P4.shape
    b2 = bias.reshape(1, -1) if bias.ndim == 1 else bias
    if b2.shape != (B, T) and b2.shape != (1, T):
        raise DimensionError(f"bias shape {bias.shape} does not fit attention {P.shape}", module="flow-inject")
    if b2.shape[0] != B:
        b2 = concat([b2] * B, axis=0)
    a = float(alpha_t.data)
    if a < 0:
        raise ContractError("alpha must be nonnegative", module="flow-inject")
    vis = np.ascontiguousarray(flow.mask, dtype=bool).view(np.uint8)
    Pd = P4.data.reshape(B, H * Tq, T)
    bd = b2.data
    out, rowsum, bad = kernels.inject_fwd(Pd, bd, a, vis)
    if bad >= 0:
        raise ContractError(f"row {bad} has no visible mass after masking", module="flow-inject")
    if a == 0.0:
        out = Pd.copy()

    def bw(g):
        gp, gb, ga = kernels.inject_bwd(np.ascontiguousarray(g).reshape(B, H * Tq, T), out, rowsum, bd, vis)
        return gp.reshape(P4.shape), gb * a, np.asarray(ga)

    res = make_op(out.reshape(P4.shape), (P4, b2, alpha_t), bw, "inject")
    if P.ndim == 3:
        res = res[0]
    return AttentionTensor(res, flow.mask)


@dataclass
class PairModule:
    """Attender, decoder and injection strength owned by one layer pair."""

    attender: Attender
    decoder: MixtureDecoder
    alpha: Tensor

    def named_params(self, include_posterior: bool = True, include_alpha: bool = False) -> dict:
        out = self.attender.named_params(include_posterior)
        out.update(self.decoder.named_params())
        if include_alpha:
            out[self.attender.prior.prefix.rsplit(".", 1)[0] + ".alpha"] = self.alpha
        return out


def make_pair_module(pair, d_model: int, alpha: float = DEFAULT_ALPHA, n_components: int = 16,
                     latent_dim: int = 32, n_heads: int = 4, seed: int = 0, learnable_alpha: bool = False) -> PairModule:
    tag = f"{pair[0]}-{pair[1]}"
    att = Attender(d_model, n_components, latent_dim, n_heads, seed=seed, prefix=f"attender.{tag}")
    dec = MixtureDecoder(latent_dim, n_components=n_components, seed=seed + 7919, prefix=f"decoder.{tag}")
    return PairModule(att, dec, Tensor(np.asarray(float(alpha)), requires_grad=learnable_alpha, name=f"alpha.{tag}"))


@dataclass
class PairOutcome:
    prior: DiagGaussian | None = None
    posterior: DiagGaussian | None = None
    sample: LatentSample | None = None
    mixture: SpatialMixture | None = None
    importance: ImportanceMap | None = None


@dataclass
class InjectedPass:
    logits: Tensor
    trace: LayerTrace
    report: InjectionReport
    outcomes: dict


def run_injected(backbone: Backbone, tokens, layout: ModalityLayout, plan: LayerPatchPlan, modules: dict, *,
                 z_source: str = "prior-mean", rng=None, full_seq: bool = False, alpha_override=None,
                 with_report: bool = True, map_scale: float = 1.0, encode_prior_always: bool = True,
                 prefix=None, trace_layers=()) -> InjectedPass:
    """One forward pass with the plan applied.

    ``prefix`` = (x, hidden, start) resumes from a precomputed residual stream
    ``x`` entering block ``start``; ``hidden`` supplies the extraction-layer
    states below ``start``. The layers below ``start`` must not be patched.

    ``z_source`` picks the latent fed to the decoder: ``posterior`` (training),
    ``prior`` (sampled) or ``prior-mean`` (deterministic inference).
    """
    plan.validate(backbone.config.n_layers)
    hooks = plan.extraction_layers | plan.injection_layers | set(trace_layers)
    for pair in plan.pairs:
        if pair not in modules:
            raise PlanError(f"no attender for pair {pair}")
    alphas = dict(zip(plan.pairs, plan.alpha))
    by_injection = {lp: (l, lp) for l, lp in plan.pairs}
    grid = grid_coords(layout.grid_h, layout.grid_w)
    trace = LayerTrace()
    report = InjectionReport()
    outcomes: dict = {}
    vs, ve = layout.visual_span
    qs, qe = layout.question_span
    as_, ae = layout.answer_span

    def patch(layer: int, att: AttentionTensor) -> AttentionTensor:
        pair = by_injection[layer]
        l = pair[0]
        if l not in trace.hidden:
            raise PlanError(f"extraction layer {l} was not hooked before layer {layer}")
        mod = modules[pair]
        h = trace.hidden[l]
        V, Q = h[:, vs:ve, :], h[:, qs:qe, :]
        out = PairOutcome()
        if z_source == "posterior":
            out.posterior = mod.attender.encode_posterior(V, Q, h[:, as_:ae, :])
            if encode_prior_always:
                out.prior = mod.attender.encode_prior(V, Q)
            out.sample = reparameterize(out.posterior, rng=rng)
        elif z_source == "prior":
            out.prior = mod.attender.encode_prior(V, Q)
            out.sample = reparameterize(out.prior, rng=rng)
        elif z_source == "prior-mean":
            out.prior = mod.attender.encode_prior(V, Q)
            out.sample = mean_sample(out.prior)
        else:
            raise ContractError(f"unknown z source {z_source!r}", module="flow-inject")
        out.mixture = mod.decoder.decode(out.sample)
        out.importance = aggregate_and_normalize(out.mixture, grid, map_scale)
        outcomes[pair] = out
        if alpha_override is not None:
            alpha = float(alpha_override)
        elif mod.alpha.requires_grad:
            alpha = mod.alpha
        else:
            alpha = alphas[pair]
        bias = build_bias(out.importance, layout, layout.T, full_seq=full_seq)
        new = inject(att, bias, alpha)
        if with_report:
            dev = float(np.abs(new.probs.data.sum(axis=-1) - 1.0).max())
            report.pairs.append(PairReport(
                pair, float(as_tensor(alpha).data),
                flowstat.visual_attention_entropy(att, layout, "gen"),
                flowstat.visual_attention_entropy(new, layout, "gen"),
                flowstat.vision_attention_ratio(att, layout, "gen"),
                flowstat.vision_attention_ratio(new, layout, "gen"),
                dev,
            ))
        return new

    if prefix is None:
        x, start = backbone.embed(tokens, layout), 0
    else:
        x, hidden, start = prefix
        if plan.injection_layers and min(plan.injection_layers) < start:
            raise PlanError(f"cannot resume at layer {start}: injection happens earlier")
        trace.hidden.update(hidden)
    logits = backbone.run_layers(x, layout, hooks, patch if plan.pairs else None, trace,
                                 patch_layers=plan.injection_layers, start_layer=start)
    report.pairs.sort(key=lambda r: r.pair)
    return InjectedPass(logits, trace, report, outcomes)


def apply_plan(backbone: Backbone, tokens, layout: ModalityLayout, plan: LayerPatchPlan, modules: dict, **kwargs):
    """Returns (logits, InjectionReport) for one injected forward pass."""
    res = run_injected(backbone, tokens, layout, plan, modules, **kwargs)
    return res.logits, res.report


def feature_residual(plan: LayerPatchPlan, layout: ModalityLayout, saved: dict | None = None):
    """Residual callback adding layer-l visual states into layer-l' visual states (weight alpha).

    ``saved`` may pre-seed the layer-l states when the pass resumes past layer l.
    """
    saved = {} if saved is None else dict(saved)
    src = plan.extraction_layers
    targets = {lp: (l, a) for (l, lp), a in zip(plan.pairs, plan.alpha)}
    vs, ve = layout.visual_span

    def residual(layer: int, x: Tensor) -> Tensor:
        if layer in targets:
            l, a = targets[layer]
            vis = saved[l][:, vs:ve, :]
            pad = Tensor(np.zeros((x.shape[0], x.shape[1] - ve, x.shape[2])))
            x = x + concat([vis, pad], axis=1) * a
        if layer in src:
            saved[layer] = x
        return x

    return residual
