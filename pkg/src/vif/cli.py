"""Command-line entry point: ``vif <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 validation or invariant failure,
3 numeric failure. Files are written only to the paths given by ``--out``
(and ``--log`` / ``--csv`` where a subcommand declares them).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from .errors import UsageError, VifError

SUBCOMMANDS = ("gen", "train", "eval", "ablate", "analyze", "render-map", "dump-attn", "gradcheck")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}", module="cli")


# flags that map onto config keys; value None means "take from config file / default"
_TASK_FLAGS = (("--grid-h", int), ("--grid-w", int), ("--n-colors", int), ("--n-shapes", int),
               ("--n-objects", int), ("--ambiguity-rate", float), ("--mark-rate", float))
_TRAIN_FLAGS = (("--steps", int), ("--batch-size", int), ("--lr", float), ("--beta", float), ("--gamma", float),
                ("--warmup-frac", float), ("--mode", str), ("--plan", str), ("--alpha", float),
                ("--map-scale", float), ("--pretrain-steps", int), ("--pretrain-lr", float),
                ("--checkpoint-every", int), ("--n-train", int), ("--n-eval", int), ("--n-layers", int),
                ("--n-heads", int), ("--d-model", int))
_BOOL_FLAGS = ("--freeze-backbone", "--freeze-prefix", "--learnable-alpha")


def _add_config_flags(p, train: bool = True):
    p.add_argument("--config", help="flat key=value config file; flags override its keys")
    p.add_argument("--seed", type=int)
    for flag, typ in _TASK_FLAGS:
        p.add_argument(flag, type=typ)
    if train:
        for flag, typ in _TRAIN_FLAGS:
            p.add_argument(flag, type=typ)
        for flag in _BOOL_FLAGS:
            p.add_argument(flag, action="store_true", default=None)


def _configs(args):
    from .harness import build_configs, parse_config_text

    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}", module="cli") from None
    for key, val in vars(args).items():
        if val is None or key in ("config", "cmd", "out", "log", "csv", "corpus", "ckpt", "dump", "scope", "n",
                                  "index", "pair", "init", "alpha_zero", "seeds", "tol", "per_group"):
            continue
        values[key] = val
    return build_configs(values)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vif", description="Variational information flow on a toy multimodal transformer.")
    sub = p.add_subparsers(dest="cmd", metavar="|".join(SUBCOMMANDS), parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    _add_config_flags(g, train=False)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(t)
    t.add_argument("--corpus", help="training corpus (default: generate n_train instances)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-step loss CSV path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a held-out corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", help="report CSV path (default: stdout)")

    a = sub.add_parser("ablate", help="train and evaluate every ablation mode under one seed")
    _add_config_flags(a)
    a.add_argument("--out", help="comparison CSV path (default: stdout)")

    an = sub.add_parser("analyze", help="layer-wise statistics of an attention dump")
    an.add_argument("--dump", required=True)
    an.add_argument("--scope", choices=("gen", "text"), default="gen")
    an.add_argument("--out", help="stats CSV path (default: stdout)")

    r = sub.add_parser("render-map", help="write the importance map of one instance as PGM (+ CSV)")
    _add_config_flags(r)
    r.add_argument("--ckpt", help="checkpoint (default: a freshly initialized model)")
    r.add_argument("--init", choices=("random", "zero"), default="random",
                   help="initialization when no checkpoint is given")
    r.add_argument("--corpus", help="corpus to take the instance from (default: generate one)")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--pair", help="layer pair as l-l' (default: first pair of the plan)")
    r.add_argument("--out", required=True, help="PGM path")
    r.add_argument("--csv", help="optional CSV path")

    d = sub.add_parser("dump-attn", help="write attention probabilities of every layer as an AttentionDump")
    _add_config_flags(d)
    d.add_argument("--ckpt")
    d.add_argument("--init", choices=("random", "zero"), default="random")
    d.add_argument("--corpus")
    d.add_argument("--n", type=int, default=8, help="number of instances (one record each)")
    d.add_argument("--alpha-zero", action="store_true", help="baseline pass with injection strength 0")
    d.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="end-to-end gradient checks of every loss term")
    gc.add_argument("--seeds", type=int, default=100)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--per-group", type=int, default=2,
                    help="probes per parameter group: one random direction, the rest single coordinates")
    return p


def _write_text(path, text: str):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _model_for(args):
    from .harness import VIFModel, zero_init_modules

    if args.ckpt:
        return VIFModel.load(args.ckpt)
    train, task = _configs(args)
    model = VIFModel.create(train, task)
    if args.init == "zero":
        zero_init_modules(model)
    return model


def _instances(args, model, n):
    from .tasks import generate, read_corpus

    if args.corpus:
        insts = read_corpus(args.corpus, model.task.grid_h, model.task.grid_w)
    else:
        insts = generate(dataclasses.replace(model.task, seed=model.task.seed + 1), max(n, 1))
    return insts


def cmd_gen(args):
    from .tasks import write_corpus, generate

    _, task = _configs(args)
    write_corpus(args.out, generate(task, args.n))
    print(f"wrote {args.n} instances to {args.out}", file=sys.stderr)


def cmd_train(args):
    from .harness import make_splits, train
    from .tasks import read_corpus

    cfg, task = _configs(args)
    if args.corpus:
        corpus = read_corpus(args.corpus, task.grid_h, task.grid_w)
    else:
        corpus, _ = make_splits(task, cfg.n_train, cfg.n_eval)
    t0 = time.perf_counter()
    res = train(cfg, task, corpus, checkpoint_path=args.out, log_path=args.log)
    last = res.log[-1] if res.log else None
    msg = f"trained {cfg.steps} steps in {time.perf_counter() - t0:.1f}s"
    if last:
        msg += f"; final recon {last.recon:.4f} kl {last.kl:.4f} sparsity {last.sparsity:.4f}"
    print(msg, file=sys.stderr)


def cmd_eval(args):
    from .harness import VIFModel, evaluate, report_csv
    from .tasks import read_corpus

    model = VIFModel.load(args.ckpt)
    corpus = read_corpus(args.corpus, model.task.grid_h, model.task.grid_w)
    rep = evaluate(model, corpus)
    _write_text(args.out, report_csv(rep))


def cmd_ablate(args):
    from .harness import ablate, ablation_csv

    cfg, task = _configs(args)

    def progress(mode, rep):
        print(f"{mode}: accuracy {rep.accuracy:.4f} ambiguous {rep.ambiguous_accuracy:.4f}", file=sys.stderr)

    rows = ablate(cfg, task, progress=progress)
    _write_text(args.out, ablation_csv(rows))


def cmd_analyze(args):
    from .flowstat import layer_profile, read_dumps, stats_csv

    try:
        dumps = read_dumps(args.dump)
    except OSError as exc:
        raise UsageError(f"cannot read dump: {exc}", module="cli") from None
    _write_text(args.out, stats_csv(layer_profile(dumps, args.scope)))


def pgm_bytes(v_hat: np.ndarray, grid_h: int, grid_w: int) -> bytes:
    """P5 image of a map; values scaled so the largest cell is 255."""
    v = np.asarray(v_hat, dtype=np.float64).reshape(grid_h, grid_w)
    n = v.size
    rel = v * n  # mass relative to uniform
    top = rel.max()
    pix = np.zeros_like(rel) if top <= 0 else np.rint(rel * 255.0 / top)
    header = f"P5\n{grid_w} {grid_h}\n255\n".encode("ascii")
    return header + np.clip(pix, 0, 255).astype(np.uint8).tobytes()


def cmd_render_map(args):
    from .harness import map_for_instance
    from .inject import LayerPatchPlan

    model = _model_for(args)
    if not model.modules:
        raise UsageError(f"mode {model.mode} has no importance map", module="cli")
    insts = _instances(args, model, args.index + 1)
    if not 0 <= args.index < len(insts):
        raise UsageError(f"index {args.index} outside corpus of {len(insts)}", module="cli")
    pair = model.plan.pairs[0] if not args.pair else LayerPatchPlan.from_str(args.pair, 0.0, True).pairs[0]
    if pair not in model.modules:
        raise UsageError(f"pair {pair} is not part of the plan {model.plan.to_str()}", module="cli")
    v_hat, raw = map_for_instance(model, insts[args.index], pair)
    h, w = model.task.grid_h, model.task.grid_w
    with open(args.out, "wb") as fh:
        fh.write(pgm_bytes(v_hat, h, w))
    if args.csv:
        lines = ["row,col,v_hat,raw_map"]
        for n in range(h * w):
            r, c = divmod(n, w)
            lines.append(f"{r},{c},{float(v_hat[n])!r},{float(raw[n])!r}")
        _write_text(args.csv, "\n".join(lines) + "\n")


def cmd_dump_attn(args):
    from .flowstat import AttentionDump, write_dumps
    from .tasks import batch_tokens, layout_for
    from .tensor import no_grad

    model = _model_for(args)
    insts = _instances(args, model, args.n)[: args.n]
    layout = layout_for(model.task)
    L = model.backbone.config.n_layers
    dumps = []
    with no_grad():
        for inst in insts:
            res = model.forward(batch_tokens([inst]), layout, alpha_override=0.0 if args.alpha_zero else None,
                                trace_layers=range(L))
            probs = np.stack([res.trace.attention[l].probs.data[0] for l in range(L)])
            dumps.append(AttentionDump(L, model.backbone.config.n_heads, layout.T, layout.visual_span,
                                       layout.question_span, layout.answer_span, layout.grid_h, layout.grid_w,
                                       probs.astype(np.float32)))
    write_dumps(args.out, dumps)


def cmd_gradcheck(args):
    from .gradcheck import run_checks

    def log(r):
        status = "ok" if r.worst < args.tol else "FAIL"
        print(f"seed {r.seed}: " + " ".join(f"{k}={v:.2e}" for k, v in r.errors.items()) + f" {status}",
              file=sys.stderr)

    ok, results, secs = run_checks(range(args.seeds), args.tol, args.per_group, log)
    worst = max(r.worst for r in results) if results else 0.0
    print(f"gradcheck: {len(results)} seeds, worst relative error {worst:.3e}, {secs:.1f}s -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise VifError(f"gradient check failed: worst relative error {worst:.3e} >= {args.tol}", module="tensor-autodiff")


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "analyze": cmd_analyze,
             "render-map": cmd_render_map, "dump-attn": cmd_dump_attn, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError("a subcommand is required: " + ", ".join(SUBCOMMANDS), module="cli")
        _COMMANDS[args.cmd](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except VifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: [cli] {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
