"""End-to-end gradient checks for the loss terms.

Each check builds backbone + attenders + decoders + injector from a seed
(either the default toy model or a tiny 4-layer one),
backpropagates one loss term, and compares sampled coordinates of the
gradient against central differences. All four terms share the perturbed
forward passes, so one pair of evaluations per coordinate serves every term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attender import kl_divergence
from .backbone import Backbone, BackboneConfig, ModalityLayout
from .inject import default_plan, make_pair_module, run_injected
from .objective import recon_loss, sparsity_loss, total_loss
from .tensor import backward, no_grad

TERMS = ("recon", "kl", "sparsity", "total")


@dataclass
class ToySetup:
    backbone: Backbone
    modules: dict
    plan: object
    layout: ModalityLayout
    tokens: np.ndarray
    seed: int

    def groups(self) -> dict:
        """Parameters grouped by role, so sampling covers every component."""
        out = {"backbone": self.backbone.named_params(), "prior": {}, "posterior": {}, "decoder": {}, "alpha": {}}
        for mod in self.modules.values():
            out["prior"].update(mod.attender.prior.named_params())
            out["posterior"].update(mod.attender.posterior.named_params())
            out["decoder"].update(mod.decoder.named_params())
            out["alpha"][mod.alpha.name] = mod.alpha
        return out

    def terms(self, beta: float = 0.1, gamma: float = 0.01) -> dict:
        # fixed noise per evaluation so perturbed passes see the same epsilon
        rng = np.random.default_rng([self.seed, 99])
        res = run_injected(self.backbone, self.tokens, self.layout, self.plan, self.modules,
                           z_source="posterior", rng=rng, with_report=False)
        outs = [res.outcomes[p] for p in self.plan.pairs]
        recon = recon_loss(res.logits, self.tokens, self.layout)
        # averaged over layer pairs, as in training
        kl = sum((kl_divergence(o.posterior, o.prior) for o in outs[1:]), kl_divergence(outs[0].posterior, outs[0].prior))
        sp = sum((sparsity_loss(o.mixture) for o in outs[1:]), sparsity_loss(outs[0].mixture))
        kl, sp = kl * (1.0 / len(outs)), sp * (1.0 / len(outs))
        total = total_loss(recon, kl, sp, beta, gamma).total_tensor
        return {"recon": recon, "kl": kl, "sparsity": sp, "total": total}


def toy_setup(seed: int, batch: int = 1, tiny: bool = False) -> ToySetup:
    """The default toy model (8 layers, width 64, 8x8 grid, pairs (2, 6) and (3, 7)) on generated instances.

    ``tiny`` swaps in a 4-layer, width-8 backbone on a 3x3 grid with one layer
    pair, 4 components and random tokens, for quick checks.
    """
    if not tiny:
        from .harness import TrainConfig, VIFModel
        from .tasks import TaskConfig, batch_tokens, generate, layout_for

        task = TaskConfig(seed=seed)
        model = VIFModel.create(TrainConfig(seed=seed, learnable_alpha=True), task)
        tokens = batch_tokens(generate(task, batch))
        return ToySetup(model.backbone, model.modules, model.plan, layout_for(task), tokens, seed)
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(vocab_size=12, n_layers=4, n_heads=2, d_model=8, max_seq=16, grid_h=3, grid_w=3)
    bb = Backbone(cfg, seed)
    # larger weights than the training init so every path carries signal
    for t in bb.params.values():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    plan = default_plan(cfg.n_layers, alpha=0.7)
    modules = {}
    for pair in plan.pairs:
        mod = make_pair_module(pair, cfg.d_model, 0.7, n_components=4, latent_dim=3, n_heads=2,
                               seed=seed + 1, learnable_alpha=True)
        for t in mod.named_params(include_alpha=True).values():
            if t.ndim:
                t.data = t.data + rng.normal(0.0, 0.3, t.shape)
        modules[pair] = mod
    layout = ModalityLayout.build(3, 3, n_question=2, n_answer=1)
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, layout.T))
    return ToySetup(bb, modules, plan, layout, tokens, seed)


@dataclass
class CheckResult:
    seed: int
    errors: dict  # term -> max relative error
    n_probes: int

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def check_seed(seed: int, per_group: int = 2, h: float = 1e-5, tiny: bool = False) -> CheckResult:
    setup = toy_setup(seed, tiny=tiny)
    groups = setup.groups()
    params = {f"{g}:{k}": t for g, d in groups.items() for k, t in d.items()}
    for t in params.values():
        t.requires_grad = True
    analytic = {}
    for term in TERMS:
        for t in params.values():
            t.grad = None
        backward(setup.terms()[term])
        analytic[term] = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in params.items()}
    rng = np.random.default_rng([seed, 7])
    # probe 0 of each group is a dense random unit direction over all of the
    # group's entries; the remaining probes are single coordinates
    probes = []
    for g, d in groups.items():
        names = sorted(d)
        sizes = np.array([d[n].size for n in names])
        dense = {f"{g}:{n}": rng.standard_normal(d[n].shape) for n in names}
        norm = np.sqrt(sum((v * v).sum() for v in dense.values()))
        probes.append({k: v / norm for k, v in dense.items()})
        picks = rng.choice(sizes.sum(), size=min(per_group - 1, int(sizes.sum())), replace=False) if per_group > 1 else []
        offsets = np.cumsum(sizes) - sizes
        for p in picks:
            j = int(np.searchsorted(offsets, p, side="right") - 1)
            one = np.zeros(d[names[j]].shape)
            one.reshape(-1)[int(p - offsets[j])] = 1.0
            probes.append({f"{g}:{names[j]}": one})
    errors = dict.fromkeys(TERMS, 0.0)
    with no_grad():
        for probe in probes:
            orig = {k: params[k].data.copy() for k in probe}
            for k, v in probe.items():
                params[k].data = orig[k] + h * v
            fp = {k: v.item() for k, v in setup.terms().items()}
            for k, v in probe.items():
                params[k].data = orig[k] - h * v
            fm = {k: v.item() for k, v in setup.terms().items()}
            for k in probe:
                params[k].data = orig[k]
            for term in TERMS:
                num = (fp[term] - fm[term]) / (2.0 * h)
                ana = sum(float((analytic[term][k] * v).sum()) for k, v in probe.items())
                errors[term] = max(errors[term], abs(ana - num) / max(1.0, abs(num)))
    return CheckResult(seed, errors, len(probes))


def run_checks(seeds=range(100), tol: float = 1e-4, per_group: int = 2, log=None, tiny: bool = False):
    """Returns (all passed, results, seconds)."""
    t0 = time.perf_counter()
    results = []
    for s in seeds:
        r = check_seed(int(s), per_group, tiny=tiny)
        results.append(r)
        if log:
            log(r)
    ok = all(r.worst < tol for r in results)
    return ok, results, time.perf_counter() - t0
