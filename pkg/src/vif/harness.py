"""Training, evaluation and ablation runs for the VIF model on synthetic tasks."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import flowstat
from .attender import kl_divergence
from .backbone import Backbone, BackboneConfig, LayerTrace
from .errors import ConfigError, ContractError, NumericError
from .inject import (DEFAULT_ALPHA, InjectedPass, InjectionReport, LayerPatchPlan, default_plan,
                     feature_residual, make_pair_module, run_injected)
from .objective import LossBreakdown, beta_schedule, recon_loss, sparsity_loss, total_loss
from .render import map_entropy
from .tasks import (TaskConfig, Vocab, batch_tokens, content_hash, generate, layout_for,
                    localization_score)
from .tensor import Tensor, backward, no_grad

MODES = ("full", "no-ap", "no-sp", "full-seq", "deep-only", "mid-deep-feature")
ABLATIONS = MODES[1:]
LOG_COLUMNS = ("step", "recon", "kl", "sparsity", "total", "beta_effective")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    beta: float = 0.1
    warmup_frac: float = 0.1
    gamma: float = 0.01
    mode: str = "full"
    freeze_backbone: bool = False
    freeze_prefix: bool = False
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    plan: str = ""  # empty -> default plan for the depth and mode
    alpha: float = DEFAULT_ALPHA
    learnable_alpha: bool = False
    map_scale: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    n_train: int = 4000
    n_eval: int = 200

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}", module="harness")
        for name in ("beta", "gamma", "warmup_frac", "lr", "pretrain_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative", module="harness")
        if self.steps < 0 or self.pretrain_steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be nonnegative and batch size positive", module="harness")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment coefficients must lie in [0, 1)", module="harness")

    def layer_plan(self) -> LayerPatchPlan:
        deep_only = self.mode == "deep-only"
        if self.plan:
            return LayerPatchPlan.from_str(self.plan, self.alpha, allow_same_layer=deep_only)
        return default_plan(self.n_layers, self.alpha, deep_only=deep_only)


# -- config files -----------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected key=value", module="harness")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, typ):
    if isinstance(value, str):
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"not a boolean: {value!r}", module="harness")
        try:
            return typ(value)
        except ValueError:
            raise ConfigError(f"cannot read {value!r} as {typ.__name__}", module="harness") from None
    return typ(value)


def build_configs(values: dict):
    """Split a flat key/value mapping into (TrainConfig, TaskConfig); unknown keys are rejected."""
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kfields = {f.name: f for f in dataclasses.fields(TaskConfig)}
    tk, kk = {}, {}
    for key, value in values.items():
        if key == "seed":
            tk["seed"] = kk["seed"] = _coerce(value, int)
        elif key in tfields:
            tk[key] = _coerce(value, type(tfields[key].default))
        elif key in kfields:
            kk[key] = _coerce(value, type(kfields[key].default))
        else:
            raise ConfigError(f"unknown config key {key!r}", module="harness")
    train = TrainConfig(**tk)
    train.validate()
    return train, TaskConfig(**kk)


# -- model bundle ----------------------------------------------------------

class VIFModel:
    """Backbone plus one attender/decoder per layer pair."""

    def __init__(self, backbone: Backbone, plan: LayerPatchPlan, mode: str, task: TaskConfig,
                 learnable_alpha: bool = False, map_scale: float = 1.0, seed: int = 0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}", module="harness")
        plan.validate(backbone.config.n_layers)
        self.backbone = backbone
        self.plan = plan
        self.mode = mode
        self.task = task
        self.learnable_alpha = learnable_alpha
        self.map_scale = float(map_scale)
        self.seed = seed
        self.train_hashes: np.ndarray = np.zeros(0)
        self.modules: dict = {}
        if mode != "mid-deep-feature":
            for i, (pair, a) in enumerate(zip(plan.pairs, plan.alpha)):
                self.modules[pair] = make_pair_module(pair, backbone.config.d_model, a, seed=seed * 1009 + 17 * (i + 1),
                                                      learnable_alpha=learnable_alpha)

    @classmethod
    def create(cls, train: TrainConfig, task: TaskConfig) -> "VIFModel":
        train.validate()
        task.validate()
        vocab = Vocab(task)
        cfg = BackboneConfig(vocab.size, train.n_layers, train.n_heads, train.d_model,
                             max_seq=layout_for(task).T, grid_h=task.grid_h, grid_w=task.grid_w,
                             n_features=vocab.n_features, grid_row_feature=vocab.row_feature,
                             grid_col_feature=vocab.col_feature)
        return cls(Backbone(cfg, train.seed, vocab.feature_matrix()), train.layer_plan(), train.mode, task,
                   train.learnable_alpha, train.map_scale, train.seed)

    @property
    def uses_posterior(self) -> bool:
        return self.mode not in ("no-ap", "mid-deep-feature")

    def named_params(self, include_backbone: bool = True) -> dict:
        out = self.backbone.named_params() if include_backbone else {}
        for mod in self.modules.values():
            out.update(mod.named_params(include_posterior=True, include_alpha=self.learnable_alpha))
        return out

    @property
    def resume_layer(self) -> int:
        """First block whose computation depends on the attenders."""
        return min(self.plan.injection_layers) if self.plan.pairs else self.backbone.config.n_layers

    def prefix_param_names(self) -> set:
        s = self.resume_layer
        names = {k for k in ("tok_emb", "pos_emb", "grid_row", "grid_col", "feat_emb") if k in self.backbone.params}
        for k in self.backbone.params:
            m = re.match(r"l(\d+)\.", k)
            if m and int(m.group(1)) < s:
                names.add(k)
        return {"backbone." + k for k in names}

    def trainable_params(self, freeze_backbone: bool, freeze_prefix: bool = False) -> dict:
        out = self.named_params(include_backbone=not freeze_backbone)
        if freeze_prefix:
            drop = self.prefix_param_names()
            out = {k: v for k, v in out.items() if k not in drop}
        if not self.uses_posterior:
            out = {k: v for k, v in out.items() if ".posterior." not in k}
        return out

    def forward(self, tokens, layout, z_source: str = "prior-mean", rng=None, alpha_override=None,
                with_report: bool = False, prefix=None, trace_layers=()) -> InjectedPass:
        """Injected forward pass; ``prefix`` is an (x, hidden, start) triple from a PrefixCache."""
        if self.mode == "mid-deep-feature":
            plan = self.plan if alpha_override is None else self.plan.with_alpha(float(alpha_override))
            trace = LayerTrace()
            if prefix is None:
                x, saved, start = self.backbone.embed(tokens, layout), None, 0
            else:
                x, saved, start = prefix
            logits = self.backbone.run_layers(x, layout, plan.injection_layers | set(trace_layers), None, trace,
                                              residual_patch=feature_residual(plan, layout, saved), start_layer=start)
            return InjectedPass(logits, trace, InjectionReport(), {})
        return run_injected(self.backbone, tokens, layout, self.plan, self.modules, z_source=z_source, rng=rng,
                            full_seq=self.mode == "full-seq", alpha_override=alpha_override,
                            with_report=with_report, map_scale=self.map_scale,
                            encode_prior_always=True, prefix=prefix, trace_layers=trace_layers)

    # -- persistence --
    def config_dict(self) -> dict:
        d = {f"backbone.{k}": v for k, v in self.backbone.config.to_dict().items()}
        d.update({f"task.{f.name}": getattr(self.task, f.name) for f in dataclasses.fields(TaskConfig)})
        d.update({
            "mode": self.mode,
            "plan": self.plan.to_str(),
            "plan.alpha": ",".join(repr(float(a)) for a in self.plan.alpha),
            "plan.allow_same_layer": int(self.plan.allow_same_layer),
            "learnable_alpha": int(self.learnable_alpha),
            "map_scale": repr(self.map_scale),
            "seed": self.seed,
        })
        return d

    def state(self) -> dict:
        params = {k: v.data for k, v in self.named_params().items()}
        params["meta.train_hashes"] = np.asarray(self.train_hashes, dtype=np.float64)
        return params

    def save(self, path):
        ckpt.save(path, self.config_dict(), self.state())

    def to_bytes(self) -> bytes:
        return ckpt.to_bytes(self.config_dict(), self.state())

    @classmethod
    def from_state(cls, config: dict, params: dict) -> "VIFModel":
        try:
            bcfg = BackboneConfig.from_dict({k[len("backbone."):]: v for k, v in config.items()
                                             if k.startswith("backbone.")})
            tfields = {f.name: f for f in dataclasses.fields(TaskConfig)}
            task = TaskConfig(**{k[5:]: _coerce(v, type(tfields[k[5:]].default)) for k, v in config.items()
                                 if k.startswith("task.")})
            alphas = tuple(float(a) for a in config["plan.alpha"].split(",")) if config["plan.alpha"] else ()
            plan = LayerPatchPlan.from_str(config["plan"], alphas, allow_same_layer=bool(int(config["plan.allow_same_layer"])))
            feats = Vocab(task).feature_matrix() if bcfg.n_features else None
            model = cls(Backbone(bcfg, int(config["seed"]), feats), plan, config["mode"], task,
                        bool(int(config["learnable_alpha"])), float(config["map_scale"]), int(config["seed"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"checkpoint config incomplete or invalid: {exc}", module="harness") from None
        named = model.named_params()
        for name, t in named.items():
            if name not in params:
                raise ConfigError(f"checkpoint lacks parameter {name!r}", module="harness")
            if params[name].shape != t.data.shape:
                raise ConfigError(f"shape mismatch for {name!r}", module="harness")
            t.data = np.ascontiguousarray(params[name], dtype=np.float64)
        extra = set(params) - set(named) - {"meta.train_hashes"}
        if extra:
            raise ConfigError(f"unexpected checkpoint records: {sorted(extra)[:3]}", module="harness")
        model.train_hashes = params.get("meta.train_hashes", np.zeros(0))
        return model

    @classmethod
    def load(cls, path) -> "VIFModel":
        return cls.from_state(*ckpt.load(path))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "VIFModel":
        return cls.from_state(*ckpt.from_bytes(buf))


# -- data -------------------------------------------------------------------

def make_splits(task: TaskConfig, n_train: int, n_eval: int):
    """Train and held-out instances from one generated pool; held-out items duplicating a train item are dropped."""
    pool = generate(task, n_train + n_eval)
    train = pool[:n_train]
    seen = {content_hash(x) for x in train}
    held = [x for x in pool[n_train:] if content_hash(x) not in seen]
    return train, held


class PrefixCache:
    """Residual streams of a frozen backbone prefix, precomputed once per instance.

    Holds the stream entering block ``start`` plus the extraction-layer states
    below it, so training can resume at ``start`` without re-running the prefix.
    """

    def __init__(self, x: np.ndarray, hidden: dict, start: int):
        self.x, self.hidden, self.start = x, hidden, start

    @classmethod
    def build(cls, backbone: Backbone, instances, layout, start: int, extraction=(), chunk: int = 64) -> "PrefixCache":
        keep = sorted(l for l in set(extraction) if l < start)
        xs, hs = [], {l: [] for l in keep}
        with no_grad():
            for s in range(0, len(instances), chunk):
                tokens = batch_tokens(instances[s:s + chunk])
                trace = LayerTrace()
                x = backbone.run_layers(backbone.embed(tokens, layout), layout, keep, None, trace, stop_layer=start)
                xs.append(x.data)
                for l in keep:
                    hs[l].append(trace.hidden[l].data)
        return cls(np.concatenate(xs), {l: np.concatenate(v) for l, v in hs.items()}, start)

    def batch(self, idx):
        return (Tensor(self.x[idx]), {l: Tensor(h[idx]) for l, h in self.hidden.items()}, self.start)


# -- optimizer ----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: VIFModel
    log: list = field(default_factory=list)  # LossBreakdown per step

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for i, r in enumerate(rows):
        w.writerow(_log_row(i, r))
    return buf.getvalue()


def _log_row(step: int, r: LossBreakdown) -> list:
    return [step, repr(r.recon), repr(r.kl), repr(r.sparsity), repr(r.total), repr(r.beta)]


def loss_terms(model: VIFModel, tokens, layout, rng, beta: float, gamma: float, prefix=None) -> LossBreakdown:
    """Forward one training batch and assemble the loss for the model's mode."""
    z_source = "posterior" if model.uses_posterior else "prior"
    res = model.forward(tokens, layout, z_source=z_source, rng=rng, prefix=prefix)
    recon = recon_loss(res.logits, tokens, layout)
    outs = [res.outcomes[p] for p in model.plan.pairs if p in res.outcomes]
    if outs and model.uses_posterior:
        kl = sum((kl_divergence(o.posterior, o.prior) for o in outs[1:]), kl_divergence(outs[0].posterior, outs[0].prior))
        kl = kl * (1.0 / len(outs))
    else:
        kl = 0.0
    if outs:
        sp = sum((sparsity_loss(o.mixture) for o in outs[1:]), sparsity_loss(outs[0].mixture)) * (1.0 / len(outs))
    else:
        sp = 0.0
    if model.mode == "no-sp":
        gamma = 0.0
    return total_loss(recon, kl, sp, beta, gamma)


def pretrain_backbone(backbone: Backbone, instances, layout, steps: int, batch_size: int, lr: float, seed: int,
                      betas=(0.9, 0.999)) -> list:
    """Warm-up stage of the two-stage recipe: plain next-token training of the backbone on answers."""
    params = backbone.named_params()
    opt = Adam(params, lr, betas[0], betas[1], 1e-8)
    rng = np.random.default_rng([seed, 0xBB])
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(instances), size=batch_size)
        tokens = batch_tokens([instances[i] for i in idx])
        logits, _ = backbone.forward(tokens, layout)
        loss = recon_loss(logits, tokens, layout)
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite loss during backbone warm-up", module="harness")
        backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return losses


def train(config: TrainConfig, task: TaskConfig, corpus, checkpoint_path=None, log_path=None,
          model: VIFModel | None = None, pretrained: Backbone | None = None,
          cache: PrefixCache | None = None) -> TrainResult:
    """Optimize the total loss with Adam. Deterministic in ``config.seed``.

    With ``freeze_backbone`` the backbone is held fixed; with ``freeze_prefix``
    only the blocks below the first injection layer (and the embeddings) are.
    ``pretrained`` (or ``pretrain_steps`` of warm-up) supplies the backbone
    weights. Frozen prefixes are run once per instance and cached.
    """
    config.validate()
    if not corpus:
        raise ContractError("training corpus is empty", module="harness")
    if model is None:
        model = VIFModel.create(config, task)
    layout = layout_for(task)
    if pretrained is not None:
        for k, v in pretrained.params.items():
            model.backbone.params[k].data = v.data.copy()
    elif config.pretrain_steps:
        pretrain_backbone(model.backbone, corpus, layout, config.pretrain_steps, config.batch_size,
                          config.pretrain_lr, config.seed)
    model.train_hashes = np.array(sorted({content_hash(x) for x in corpus}), dtype=np.float64)
    params = model.trainable_params(config.freeze_backbone, config.freeze_prefix)
    frozen = {k: v for k, v in model.backbone.named_params().items() if k not in params}
    for t in frozen.values():
        t.requires_grad = False
    if cache is None and (config.freeze_backbone or config.freeze_prefix) and config.steps:
        cache = PrefixCache.build(model.backbone, corpus, layout, model.resume_layer, model.plan.extraction_layers)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 0xA11])
    result = TrainResult(model)
    log_fh = open(log_path, "w", encoding="utf-8", newline="") if log_path else None
    try:
        if log_fh:
            log_fh.write(",".join(LOG_COLUMNS) + "\n")
        for step in range(config.steps):
            idx = rng.integers(len(corpus), size=config.batch_size)
            tokens = batch_tokens([corpus[i] for i in idx])
            beta_eff = beta_schedule(step, config.steps, config.beta, config.warmup_frac)
            try:
                prefix = cache.batch(idx) if cache is not None else None
                br = loss_terms(model, tokens, layout, rng, beta_eff, config.gamma, prefix)
                backward(br.total_tensor)
                bad = [k for k, p in params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
                if bad:
                    raise NumericError(f"non-finite gradient for {bad[0]} at step {step}", module="harness")
            except NumericError:
                opt.zero_grad()
                if checkpoint_path:
                    model.save(checkpoint_path)
                raise
            opt.step()
            opt.zero_grad()
            br.total_tensor = None
            result.log.append(br)
            if log_fh:
                log_fh.write(",".join(map(str, _log_row(step, br))) + "\n")
            if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                model.save(checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
        for t in frozen.values():
            t.requires_grad = True
    if checkpoint_path:
        model.save(checkpoint_path)
    return result


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    accuracy: float
    ambiguous_accuracy: float
    unambiguous_accuracy: float
    localization: float
    map_entropy: float
    deep_entropy: float
    baseline_entropy: float
    deltas: dict = field(default_factory=dict)

    METRICS = ("accuracy", "ambiguous_accuracy", "unambiguous_accuracy", "localization", "map_entropy",
               "deep_entropy", "baseline_entropy")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("n",) + self.METRICS}


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def evaluate(model: VIFModel, corpus, batch_size: int = 50, check_disjoint: bool = True) -> EvalReport:
    """Constrained greedy answers, localization and deep-layer entropy on a held-out corpus."""
    if not corpus:
        raise ContractError("evaluation corpus is empty", module="harness")
    task = model.task
    first = corpus[0]
    cfg = model.backbone.config
    if any((x.grid_h, x.grid_w) != (cfg.grid_h, cfg.grid_w) for x in corpus):
        raise ConfigError(f"corpus grid {first.grid_h}x{first.grid_w} does not match checkpoint grid "
                          f"{cfg.grid_h}x{cfg.grid_w}", module="harness")
    layout = layout_for(task, with_answer=False)
    if any(len(x.question) != layout.n_question for x in corpus):
        raise ConfigError("question length does not match checkpoint layout", module="harness")
    if check_disjoint and model.train_hashes.size:
        train = set(model.train_hashes.astype(np.int64).tolist())
        overlap = sum(content_hash(x) in train for x in corpus)
        if overlap:
            raise ContractError(f"{overlap} evaluation instances also occur in the training split", module="harness")
    answers = Vocab(task).answer_tokens
    if (answers >= cfg.vocab_size).any():
        raise ConfigError("answer vocabulary exceeds checkpoint vocabulary", module="harness")
    deep = sorted(model.plan.injection_layers)
    correct, amb, loc, ment, ent, base = [], [], [], [], [], []
    with no_grad():
        for s in range(0, len(corpus), batch_size):
            chunk = corpus[s:s + batch_size]
            tokens = batch_tokens(chunk, with_answer=False)
            res = model.forward(tokens, layout, z_source="prior-mean")
            ref = model.forward(tokens, layout, z_source="prior-mean", alpha_override=0.0)
            logits = res.logits.data[:, -1, :]
            pred = answers[np.argmax(logits[:, answers], axis=-1)]
            for b, inst in enumerate(chunk):
                correct.append(pred[b] == inst.answer[0])
                amb.append(inst.ambiguous)
            maps = [res.outcomes[p].importance.v_hat.data for p in model.plan.pairs if p in res.outcomes]
            if maps:
                for b, inst in enumerate(chunk):
                    loc.append(np.mean([localization_score(m[b], inst) for m in maps]))
                    ment.append(np.mean([map_entropy(m[b]) for m in maps]))
            for b in range(len(chunk)):
                one = slice(b, b + 1)
                ent.append(np.mean([flowstat.visual_attention_entropy(res.trace.attention[l].probs.data[one], layout)
                                    for l in deep]))
                base.append(np.mean([flowstat.visual_attention_entropy(ref.trace.attention[l].probs.data[one], layout)
                                     for l in deep]))
    correct = np.array(correct, dtype=float)
    amb = np.array(amb, dtype=bool)
    return EvalReport(len(corpus), float(correct.mean()), _mean(correct[amb]), _mean(correct[~amb]),
                      _mean(loc), _mean(ment), _mean(ent), _mean(base))


def elbo_gap_check(model: VIFModel, tokens, rng=None) -> float:
    """Per-batch ELBO estimate -(recon + kl) with the posterior branch active.

    With beta = 1 and gamma = 0 the total loss is exactly the negative of this.
    """
    if not model.uses_posterior:
        raise ContractError("ELBO needs the posterior branch", module="objective")
    task = model.task
    layout = layout_for(task)
    with no_grad():
        br = loss_terms(model, np.asarray(tokens), layout, rng if rng is not None else np.random.default_rng(0), 1.0, 0.0)
    return -(br.recon + br.kl)


# -- ablation ---------------------------------------------------------------

ABLATE_COLUMNS = ("mode",) + EvalReport.METRICS + ("delta_accuracy", "delta_ambiguous_accuracy", "delta_localization",
                                                    "final_recon", "final_kl", "final_sparsity")


def ablate(config: TrainConfig, task: TaskConfig, modes=MODES, progress=None,
           pretrained: Backbone | None = None) -> list:
    """Train and evaluate every mode under one seed; returns [(mode, EvalReport, TrainResult)].

    Every mode starts from the same backbone: ``pretrained`` if given, else,
    with a frozen backbone or prefix and ``pretrain_steps``, one warm-up run
    shared by all modes.
    """
    train_set, held = make_splits(task, config.n_train, config.n_eval)
    shared = pretrained
    if shared is None and (config.freeze_backbone or config.freeze_prefix) and config.pretrain_steps:
        base = VIFModel.create(dataclasses.replace(config, mode="full"), task)
        pretrain_backbone(base.backbone, train_set, layout_for(task), config.pretrain_steps, config.batch_size,
                          config.pretrain_lr, config.seed)
        shared = base.backbone
    caches: dict = {}
    rows = []
    for mode in modes:
        cfg = dataclasses.replace(config, mode=mode, plan=config.plan if mode != "deep-only" else "")
        model = VIFModel.create(cfg, task)
        if shared is not None:
            for k, v in shared.params.items():
                model.backbone.params[k].data = v.data.copy()
        cache = None
        if (cfg.freeze_backbone or cfg.freeze_prefix) and cfg.steps:
            start = model.resume_layer
            keep = tuple(sorted(l for l in model.plan.extraction_layers if l < start))
            if (start, keep) not in caches:
                caches[(start, keep)] = PrefixCache.build(model.backbone, train_set, layout_for(task), start, keep)
            cache = caches[(start, keep)]
        res = train(cfg, task, train_set, model=model, cache=cache)
        rep = evaluate(res.model, held)
        rows.append((mode, rep, res))
        if progress:
            progress(mode, rep)
    ref = next((r for m, r, _ in rows if m == "full"), None)
    for _, rep, _ in rows:
        if ref is not None:
            rep.deltas = {k: getattr(rep, k) - getattr(ref, k) for k in ("accuracy", "ambiguous_accuracy", "localization")}
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_COLUMNS)
    for mode, rep, res in rows:
        last = res.log[-1] if res.log else None
        vals = [getattr(rep, k) for k in EvalReport.METRICS]
        vals += [rep.deltas.get(k, float("nan")) for k in ("accuracy", "ambiguous_accuracy", "localization")]
        vals += [last.recon, last.kl, last.sparsity] if last else [float("nan")] * 3
        w.writerow([mode] + [f"{v:.6f}" for v in vals])
    return buf.getvalue()


def report_csv(rep: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = rep.as_dict()
    w.writerow(list(d))
    w.writerow([d["n"]] + [f"{d[k]:.6f}" for k in EvalReport.METRICS])
    return buf.getvalue()


def zero_init_modules(model: VIFModel):
    """Zero the decoders and the attender mean/log-variance heads (prior = posterior = N(0, I))."""
    for mod in model.modules.values():
        for t in mod.decoder.params.values():
            t.data = np.zeros_like(t.data)
        for br in (mod.attender.prior, mod.attender.posterior):
            for k in ("mu.w", "mu.b", "lv.w", "lv.b"):
                br.params[k].data = np.zeros_like(br.params[k].data)


def map_for_instance(model: VIFModel, inst, pair):
    """(v_hat, raw_map) of one pair's importance map at inference (prior mean)."""
    layout = layout_for(model.task, with_answer=False)
    with no_grad():
        res = model.forward(batch_tokens([inst], with_answer=False), layout, z_source="prior-mean")
    imp = res.outcomes[pair].importance
    return imp.v_hat.data[0].copy(), imp.raw_map.data[0].copy()
