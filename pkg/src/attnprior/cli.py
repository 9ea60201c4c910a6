"""Command-line pipeline: data generation through evaluation and plots.

Every command takes ``--config`` (key = value file) plus ``--set
key=value`` overrides, funnels all randomness through the configured
seed, and writes its artifacts under a run directory:

    runs/<name>/
        config            # canonical echo of the effective config
        checkpoints/      # grounder / pretrained / fine-tuned weights
        priors/           # per-split prior exports (JSON-lines)
        metrics.json      # evaluation report
        log.jsonl         # per-stage training logs
        curves.csv/.png   # sweep outputs

Exit code 0 on success; failures print a single machine-readable JSON
line to stderr: {"error": <class>, "message": <detail>}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import grounder as grounder_mod
from . import metrics as metrics_mod
from . import models as models_mod
from . import plotting, priors as priors_mod, worldgen
from .config import ConfigError, RunConfig, apply_overrides, load_config


class MissingArtifactError(FileNotFoundError):
    pass


def _load_cfg(args):
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise MissingArtifactError(f"config file not found: {args.config}")
        cfg = load_config(args.config, args.set or ())
    else:
        cfg = apply_overrides(RunConfig(), args.set or ())
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "run", None):
        cfg.run_dir = args.run
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _ensure_run_dir(cfg):
    os.makedirs(os.path.join(cfg.run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(cfg.run_dir, "priors"), exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config"), "w") as fh:
        fh.write(cfg.to_text())


def _write_stage_log(run_dir, stage, records):
    """Per-stage sections of log.jsonl; rewriting a stage is idempotent."""
    path = os.path.join(run_dir, "log.jsonl")
    kept = []
    if os.path.exists(path):
        with open(path) as fh:
            kept = [line for line in fh if json.loads(line).get("stage") != stage]
    with open(path, "w") as fh:
        for line in kept:
            fh.write(line)
        for rec in records:
            fh.write(json.dumps({"stage": stage, **rec}, sort_keys=True) + "\n")


def _require(path, what):
    if not os.path.exists(path):
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _load_instances(cfg, split):
    _require(os.path.join(cfg.data_dir, f"{split}.jsonl"), f"dataset split {split!r}")
    return worldgen.load_split(cfg.data_dir, split)


def _world_config(cfg):
    return worldgen.WorldConfig(
        grid_size=cfg.grid_size,
        n_regions=cfg.n_regions,
        dim=cfg.dim,
        feature_noise=cfg.feature_noise,
        train_count=cfg.train_count,
        val_count=cfg.val_count,
        box_jitter=cfg.box_jitter,
    )


def _build_model(cfg, meta, seed):
    return models_mod.build_model(
        cfg.model,
        meta["vocab"],
        meta["answers"],
        cfg.dim,
        seed=seed,
        refine_mode=cfg.effective_refine_mode,
        steps=cfg.steps if cfg.model == "multistep" else 1,
        refine_steps=cfg.refine_steps if cfg.model == "multistep" else (1,),
        fixed_gate=cfg.effective_fixed_gate,
    )


def cmd_gen(args):
    cfg = _load_cfg(args)
    splits = worldgen.generate_world(_world_config(cfg), cfg.seed)
    worldgen.save_dataset(cfg.data_dir, splits, _world_config(cfg))
    counts = {split: len(insts) for split, insts in splits.items()}
    print(json.dumps({"written": cfg.data_dir, "counts": counts}, sort_keys=True))
    return 0


def cmd_train_ground(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    instances = _load_instances(cfg, "train")
    triples = grounder_mod.grounding_dataset_from_instances(
        instances, whole_query=cfg.no_re_grounding
    )
    net, log = grounder_mod.train_grounder(triples, cfg, cfg.seed)
    ckpt = os.path.join(cfg.run_dir, "checkpoints", "grounder.pt")
    grounder_mod.save_grounder(ckpt, net, config_echo={"hash": cfg.hash()})
    _write_stage_log(cfg.run_dir, "grounder", log)
    print(json.dumps({"checkpoint": ckpt, "final_loss": log[-1]["loss"] if log else None}, sort_keys=True))
    return 0


def _synthesize_priors(cfg, instances, kind):
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for inst in instances:
        T, N = len(inst.tokens), inst.region_set().count
        if kind == "uniform":
            out[inst.id] = priors_mod.uniform_prior_for(T, N)
        else:
            out[inst.id] = priors_mod.random_prior_for(T, N, rng)
    return out


def _grounder_priors(cfg, net, instances):
    out = {}
    for inst in instances:
        qa = grounder_mod.ground_query(
            inst.tokens,
            inst.parse_tree(),
            inst.region_set(),
            net,
            divisor=cfg.re_divisor,
            whole_query=cfg.no_re_grounding,
        )
        out[inst.id] = priors_mod.compute_prior(qa.logits)
    return out


def cmd_export_priors(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    net = None
    if not (cfg.uniform_prior or cfg.random_prior):
        ckpt = args.grounder or os.path.join(cfg.run_dir, "checkpoints", "grounder.pt")
        net = grounder_mod.load_grounder(_require(ckpt, "grounder checkpoint"))
    written = {}
    for split in args.splits.split(","):
        instances = _load_instances(cfg, split)
        if cfg.uniform_prior:
            priors = _synthesize_priors(cfg, instances, "uniform")
        elif cfg.random_prior:
            priors = _synthesize_priors(cfg, instances, "random")
        else:
            priors = _grounder_priors(cfg, net, instances)
        path = os.path.join(cfg.run_dir, "priors", f"{split}.jsonl")
        priors_mod.save_priors(path, priors)
        written[split] = path
    print(json.dumps({"priors": written}, sort_keys=True))
    return 0


def _load_split_priors(cfg, priors_dir, split):
    path = os.path.join(priors_dir, f"{split}.jsonl")
    return priors_mod.load_priors(_require(path, f"prior export for split {split!r}"))


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    instances = _load_instances(cfg, "train")
    meta = worldgen.load_meta(cfg.data_dir)
    priors_dir = args.priors or os.path.join(cfg.run_dir, "priors")
    priors = _load_split_priors(cfg, priors_dir, "train")
    model = _build_model(cfg, meta, cfg.seed)
    log = models_mod.pretrain_attention(model, instances, priors, cfg, cfg.seed)
    ckpt = os.path.join(cfg.run_dir, "checkpoints", "pretrained.pt")
    models_mod.save_model(ckpt, model, config_echo={"hash": cfg.hash()})
    _write_stage_log(cfg.run_dir, "pretrain", log)
    print(json.dumps({"checkpoint": ckpt, "final_loss": log[-1]["loss"] if log else None}, sort_keys=True))
    return 0


def cmd_finetune(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    instances = _load_instances(cfg, "train")
    meta = worldgen.load_meta(cfg.data_dir)
    priors = None
    if not cfg.no_prior:
        priors_dir = args.priors or os.path.join(cfg.run_dir, "priors")
        priors = _load_split_priors(cfg, priors_dir, "train")
    if args.init:
        model = models_mod.load_model(_require(args.init, "initial checkpoint"))
        model.fixed_gate = cfg.effective_fixed_gate
    else:
        model = _build_model(cfg, meta, cfg.seed)
    log = models_mod.finetune_vqa(
        model, instances, priors, cfg, cfg.seed,
        supervision_fraction=cfg.supervision_fraction,
    )
    ckpt = os.path.join(cfg.run_dir, "checkpoints", "model.pt")
    models_mod.save_model(ckpt, model, config_echo={"hash": cfg.hash()})
    _write_stage_log(cfg.run_dir, "finetune", log)
    print(json.dumps({"checkpoint": ckpt, "final": log[-1] if log else None}, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    ckpt = args.model or os.path.join(cfg.run_dir, "checkpoints", "model.pt")
    model = models_mod.load_model(_require(ckpt, "model checkpoint"))
    model.fixed_gate = cfg.effective_fixed_gate
    instances = _load_instances(cfg, args.split)
    priors = None
    if not cfg.no_prior:
        priors_dir = args.priors or os.path.join(cfg.run_dir, "priors")
        priors = _load_split_priors(cfg, priors_dir, args.split)
    grounder_net = None
    if args.grounder:
        grounder_net = grounder_mod.load_grounder(_require(args.grounder, "grounder checkpoint"))
    report = metrics_mod.evaluate(
        model, instances, priors=priors, grounder=grounder_net,
        seed=cfg.seed, config_hash=cfg.hash(),
    )
    out_path = args.out or os.path.join(cfg.run_dir, "metrics.json")
    with open(out_path, "w") as fh:
        fh.write(report.to_json())
    plotting.plot_per_type_accuracy(
        report.per_type_accuracy, os.path.splitext(out_path)[0] + "_per_type.png"
    )
    print(report.to_json(), end="")
    return 0


def cmd_sweep(args):
    cfg = _load_cfg(args)
    _ensure_run_dir(cfg)
    train = _load_instances(cfg, "train")
    val = _load_instances(cfg, "val")
    meta = worldgen.load_meta(cfg.data_dir)
    priors_dir = args.priors or os.path.join(cfg.run_dir, "priors")
    train_priors = _load_split_priors(cfg, priors_dir, "train")
    val_priors = _load_split_priors(cfg, priors_dir, "val")
    fractions = [float(f) for f in args.fractions.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds)

    def factory(seed):
        return _build_model(cfg, meta, seed)

    rows = metrics_mod.sample_efficiency_sweep(
        factory, train, val, train_priors, val_priors, cfg, fractions, seeds,
    )
    csv_path = os.path.join(cfg.run_dir, "curves.csv")
    with open(csv_path, "w") as fh:
        fh.write(metrics_mod.sweep_rows_to_csv(rows))
    fig_path = os.path.join(cfg.run_dir, "curves.png")
    plotting.plot_sweep_curves(rows, fig_path)
    print(json.dumps({"rows": len(rows), "csv": csv_path, "figure": fig_path}, sort_keys=True))
    return 0


def cmd_verify(args):
    from .refine import aggregate_numeric_oracle, refine_additive, refine_multiplicative

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.cases):
        n = int(rng.integers(2, 9))
        att = rng.dirichlet(np.ones(n))
        prior = rng.dirichlet(np.ones(n))
        gate = float(rng.uniform(0.02, 0.98))
        weights = [gate, 1.0 - gate]
        add = refine_additive(
            torch.tensor(att), torch.tensor(prior), torch.tensor(gate)
        ).numpy()
        mul = refine_multiplicative(
            torch.tensor(att), torch.tensor(prior), torch.tensor(gate)
        ).numpy()
        oracle_add = aggregate_numeric_oracle([att, prior], weights, "euclidean")
        oracle_mul = aggregate_numeric_oracle([att, prior], weights, "kl")
        worst = max(
            worst,
            float(np.max(np.abs(add - oracle_add))),
            float(np.max(np.abs(mul - oracle_mul))),
        )
    passed = worst <= args.tol
    print(
        f"oracle equivalence {'PASS' if passed else 'FAIL'}, "
        f"max Linf {'<' if passed else '>='} {args.tol:g} "
        f"(observed {worst:.3e} over {args.cases} cases)"
    )
    return 0 if passed else 1


def cmd_plot(args):
    rows = []
    with open(_require(args.rows, "curve table")) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            rows.append(dict(zip(header, parts)))
    plotting.plot_sweep_curves(rows, args.out, metric=args.metric)
    print(json.dumps({"figure": args.out}, sort_keys=True))
    return 0


def _add_common(parser, data=True, run=True):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    if data:
        parser.add_argument("--data", help="dataset directory")
    if run:
        parser.add_argument("--run", help="run directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="attnprior",
        description="Grounded attention priors for toy VQA models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    _add_common(p, run=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-ground", help="train the contrastive grounder")
    _add_common(p)
    p.set_defaults(func=cmd_train_ground)

    p = sub.add_parser("export-priors", help="materialize attention priors per split")
    _add_common(p)
    p.add_argument("--grounder", help="grounder checkpoint (defaults to the run's)")
    p.add_argument("--splits", default="train,val")
    p.set_defaults(func=cmd_export_priors)

    p = sub.add_parser("pretrain", help="stage 1: align attention with priors")
    _add_common(p)
    p.add_argument("--priors", help="priors directory (defaults to the run's)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: train on answers")
    _add_common(p)
    p.add_argument("--priors", help="priors directory (defaults to the run's)")
    p.add_argument("--init", help="checkpoint to start from (e.g. the pretrained one)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--model", help="model checkpoint (defaults to the run's)")
    p.add_argument("--priors", help="priors directory (defaults to the run's)")
    p.add_argument("--grounder", help="grounder checkpoint for recall@k")
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="metrics output path (defaults to run/metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="supervision-fraction sweep, baseline vs guided")
    _add_common(p)
    p.add_argument("--priors", help="priors directory (defaults to the run's)")
    p.add_argument("--fractions", default="0.1,0.5,1.0")
    p.add_argument("--seeds", help="comma list; defaults to config seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="refinement vs numeric-minimizer equivalence")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="render curves from a sweep table")
    p.add_argument("--rows", required=True, help="curves.csv from a sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="accuracy")
    p.set_defaults(func=cmd_plot)

    return parser


ERROR_CLASSES = (
    (ConfigError, "config_error"),
    (MissingArtifactError, "missing_artifact"),
    (FileNotFoundError, "missing_artifact"),
    (KeyError, "lookup_error"),
    (ValueError, "value_error"),
    (RuntimeError, "runtime_error"),
)


def main(argv=None):
    torch.set_num_threads(1)  # bitwise-reproducible reductions
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single funnel to the error contract
        for klass, name in ERROR_CLASSES:
            if isinstance(exc, klass):
                print(json.dumps({"error": name, "message": str(exc)}), file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
