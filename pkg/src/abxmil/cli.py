"""Command-line entry point.

Commands: gen-data, train, eval, analyze, sweep, grad-check. Every command
resolves one configuration document (defaults < --config file < ABX_SEED <
flags), echoes it into its output artifacts, and is deterministic for a
fixed (config, seed).

Exit codes: 0 success, 1 failed check, 2 config/validation error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig, load_config, set_path
from .errors import ConfigError, DivergenceError, ShapeError, ValidationError
from .synthdata import load_dataset, make_dataset, save_dataset
from .trainer import (
    evaluate,
    grad_check_pipeline,
    load_checkpoint,
    make_pipeline,
    restore_pipeline,
    save_checkpoint,
    train,
)

_SWEEP_AXES = {
    "m": [2, 4, 8, 16],
    "alpha-mode": ["fixed-zero", "fixed-one", "learnable"],
    "sample-count": [64, 128, 512],
    "sampling-strategy": ["mris", "random", "regional-2", "regional-4", "regional-8"],
    "ffn": ["off", "on"],
}


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the run seed")


_FLAG_PATHS = {
    "slides": ("data.n_slides", int),
    "witness_rate": ("data.witness_rate", float),
    "separation": ("data.separation", float),
    "variant": ("model.variant", str),
    "heads": ("model.heads", int),
    "alpha_mode": ("model.alpha_mode", str),
    "epochs": ("train.epochs", int),
    "lr": ("train.lr", float),
    "optimizer": ("train.optimizer", str),
    "batch_size": ("train.batch_size", int),
    "sample_count": ("sampling.count", int),
    "strategy": ("sampling.strategy", str),
    "regions": ("sampling.regions", int),
    "eval_samples": ("eval.samples", int),
    "bootstrap": ("eval.bootstrap", int),
}


def _resolve(args) -> RunConfig:
    overrides = {}
    for flag, (dotted, cast) in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = cast(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    if getattr(args, "ffn", None) is not None:
        overrides["model.ffn"] = args.ffn == "on"
    if getattr(args, "freeze_encoder", False):
        overrides["model.freeze_encoder"] = True
    return load_config(getattr(args, "config", None), overrides)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output dir {out} is not empty (use --force)")
    ds = make_dataset(cfg.dataset_config())
    save_dataset(ds, out)
    _write_json(out / "run_config.json", cfg.to_dict())
    m = ds.manifest
    print(f"dataset: {m['n_train']} train / {m['n_test']} test slides, "
          f"config hash {m['config_hash'][:12]}")
    roles = sum(e["n_discriminative"] for e in m["slides"])
    total = sum(e["n_instances"] for e in m["slides"])
    print(f"instances: {total} total, {roles} discriminative")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.dataset)
    log_path = Path(args.log if args.log else cfg["paths"]["log"])
    ckpt_path = Path(args.checkpoint if args.checkpoint else cfg["paths"]["checkpoint"])
    try:
        ckpt, records = train(cfg, dataset)
    except DivergenceError as exc:
        with open(log_path, "w") as fh:
            for rec in exc.records:
                fh.write(rec.to_json() + "\n")
        diag = {"error": "non-finite loss", "slide": exc.slide_id, "epoch": exc.epoch}
        _write_json(str(log_path) + ".diagnostic.json", diag)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    with open(log_path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    _write_json(str(log_path) + ".config.json", cfg.to_dict())
    save_checkpoint(ckpt, ckpt_path)
    last = records[-1]
    print(f"trained {cfg['model']['variant']} for {last.epoch + 1} epochs: "
          f"loss {last.loss:.4f} acc {last.acc:.3f} risk {last.risk_mean:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _summarize(records, cfg, rng_seed):
    labels = np.array([r.label for r in records])
    probs = np.stack([r.probs for r in records])
    n_boot = int(cfg["eval"]["bootstrap"])
    acc = analysis.bootstrap_ci(labels, probs, "acc", n_boot,
                                rng=np.random.default_rng([rng_seed, 50]))
    out = {
        "n_slides": len(records),
        "acc": {"mean": acc.mean, "lo": acc.lo, "hi": acc.hi},
        "sparsity": float(np.mean([analysis.sparsity_score(r.report.pooled)
                                   for r in records])),
        "risk": float(np.mean([
            analysis.multi_head_risk(r.report.post, r.noisy_in_bag).combined
            for r in records])),
    }
    try:
        auc = analysis.bootstrap_ci(labels, probs, "auc", n_boot,
                                    rng=np.random.default_rng([rng_seed, 51]))
        out["auc"] = {"mean": auc.mean, "lo": auc.lo, "hi": auc.hi,
                      "skipped_resamples": auc.skipped}
    except ValueError:
        out["auc"] = None
    return out


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.dataset)
    pipeline = restore_pipeline(load_checkpoint(args.checkpoint))
    records = evaluate(pipeline, dataset.test, cfg)
    summary = _summarize(records, cfg, cfg.seed)
    summary["config"] = cfg.to_dict()
    summary["checkpoint"] = str(args.checkpoint)
    _write_json(args.out, summary)
    acc, auc = summary["acc"], summary["auc"]
    line = f"acc {acc['mean']:.4f} [{acc['lo']:.4f}, {acc['hi']:.4f}]"
    if auc:
        line += f"  auc {auc['mean']:.4f} [{auc['lo']:.4f}, {auc['hi']:.4f}]"
    print(line)
    print(f"sparsity {summary['sparsity']:.2f}  risk {summary['risk']:.4f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    pipeline = restore_pipeline(ckpt)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alpha = pipeline.aggregator.alpha_value()
    records = evaluate(pipeline, dataset.test, cfg, retain_similarity=True)

    with open(out_dir / "analysis.jsonl", "w") as fh:
        for rec in records:
            report = rec.report
            risk_rep = analysis.multi_head_risk(report.post, rec.noisy_in_bag)
            heads = []
            lams = []
            for j, post in enumerate(report.post):
                head = {"risk": analysis.optimization_risk(post, rec.noisy_in_bag)}
                U = report.similarity[j]
                if U is not None and rec.noisy_in_bag:
                    noisy = np.asarray(rec.noisy_in_bag)
                    worst = int(noisy[np.argmax(report.post[j][noisy])])
                    orig, lam, product = analysis.decompose_refined_attention(
                        report.raw[j], U, alpha, worst)
                    head.update({"decomp_original": orig, "lam": lam,
                                 "decomp_product": product})
                    lams.append(lam)
                heads.append(head)
            edges, counts = analysis.attention_histogram(report.pooled, args.bins)
            fh.write(json.dumps({
                "slide": rec.slide_id,
                "label": rec.label,
                "pred": int(rec.probs.argmax()),
                "sparsity": analysis.sparsity_score(report.pooled),
                "risk": risk_rep.combined,
                "risk_bound": risk_rep.bound,
                "lam": (float(np.mean(lams)) if lams and alpha not in (None, 0.0)
                        else None),
                "heads": heads,
                "histogram": {"edges": edges.tolist(),
                              "counts": counts.tolist()},
            }) + "\n")

    analysis.export_features(pipeline, dataset.test, out_dir / "features.tsv")
    _write_json(out_dir / "analysis_meta.json",
                {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint),
                 "alpha": alpha, "n_slides": len(records)})
    print(f"wrote {out_dir}/analysis.jsonl, features.tsv, analysis_meta.json")
    return 0


def _sweep_setting(doc: dict, axis: str, value):
    doc = json.loads(json.dumps(doc))  # deep copy
    if axis == "m":
        set_path(doc, "model.heads", int(value))
    elif axis == "alpha-mode":
        set_path(doc, "model.alpha_mode", str(value))
    elif axis == "sample-count":
        set_path(doc, "sampling.count", int(value))
    elif axis == "ffn":
        set_path(doc, "model.ffn", value in ("on", True, "true"))
    elif axis == "sampling-strategy":
        v = str(value)
        if v == "mris":
            set_path(doc, "sampling.strategy", "mris")
            set_path(doc, "sampling.ratios", None)
        elif v == "random":
            t = int(doc["data"]["n_scales"])
            set_path(doc, "sampling.strategy", "mris")
            set_path(doc, "sampling.ratios", [1.0] + [0.0] * (t - 1))
        elif v.startswith("regional-"):
            set_path(doc, "sampling.strategy", "regional")
            set_path(doc, "sampling.regions", int(v.split("-", 1)[1]))
        else:
            raise ConfigError(f"unknown sampling strategy {v!r}")
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return doc


def _sweep_run(doc: dict, axis: str, value, run_seed: int) -> dict:
    doc = _sweep_setting(doc, axis, value)
    doc["seed"] = run_seed
    cfg = RunConfig(doc).validate()
    dataset = make_dataset(cfg.dataset_config())
    ckpt, records = train(cfg, dataset)
    summary = _summarize(evaluate(restore_pipeline(ckpt), dataset.test, cfg),
                         cfg, run_seed)
    auc = summary["auc"] or {"mean": float("nan"), "lo": float("nan"),
                             "hi": float("nan")}
    return {
        "axis": axis, "value": str(value), "seed": run_seed,
        "acc": summary["acc"]["mean"], "acc_lo": summary["acc"]["lo"],
        "acc_hi": summary["acc"]["hi"],
        "auc": auc["mean"], "auc_lo": auc["lo"], "auc_hi": auc["hi"],
        "sparsity": summary["sparsity"], "risk": summary["risk"],
        "train_loss": records[-1].loss, "alpha": records[-1].alpha,
    }


_SWEEP_COLUMNS = ["axis", "value", "seed", "acc", "acc_lo", "acc_hi",
                  "auc", "auc_lo", "auc_hi", "sparsity", "risk",
                  "train_loss", "alpha"]


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    values = args.values.split(",") if args.values else _SWEEP_AXES[args.axis]
    doc = cfg.to_dict()
    jobs = [(doc, args.axis, v, cfg.seed * 1009 + i) for i, v in enumerate(values)]
    # settings are validated before any training happens
    for job in jobs:
        RunConfig(_sweep_setting(job[0], job[1], job[2])).validate()
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_run_star, jobs))
    else:
        rows = [_sweep_run(*job) for job in jobs]
    with open(args.out, "w") as fh:
        fh.write("\t".join(_SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(row[c]) for c in _SWEEP_COLUMNS) + "\n")
    _write_json(str(args.out) + ".config.json", cfg.to_dict())
    for row in rows:
        print(f"{args.axis}={row['value']}: acc {row['acc']:.4f} "
              f"sparsity {row['sparsity']:.2f} risk {row['risk']:.4f}")
    return 0


def _sweep_run_star(job):
    return _sweep_run(*job)


def _cell(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_GRAD_CHECK_GRID = ([("abmil", {})]
                    + [("abmilx", {"heads": m, "alpha_mode": a, "ffn": f})
                       for m in (1, 4, 8)
                       for a in ("fixed-zero", "fixed-one", "learnable")
                       for f in (False, True)]
                    + [("global-attn", {})])


def cmd_grad_check(args) -> int:
    """Check every parameter group of every aggregator configuration against
    central differences, at init and after 5 optimizer steps.

    Pipelines are built at unit scorer gain: the production init saturates
    the instance softmax, where the finite-difference oracle sits below its
    numeric noise floor; the backward rules under test are the same.
    """
    from . import aggregators as agg_module
    from .config import DEFAULTS

    doc = json.loads(json.dumps(DEFAULTS))
    doc["data"].update({"n_slides": 7, "instances_min": 8, "instances_max": 12,
                        "witness_rate": 0.3, "raw_dim": 5, "separation": 3.0,
                        "n_scales": 2, "region_grid": 1, "bg_components": 2})
    doc["sampling"]["count"] = 6
    doc["train"].update({"epochs": 1, "batch_size": 1, "lr": 1e-3})
    doc["eval"]["samples"] = 6
    doc["model"].update({"dim": 8, "attn_hidden": 8})
    doc["seed"] = args.seed if args.seed is not None else 1

    rng = np.random.default_rng(doc["seed"])
    bag = rng.standard_normal((6, 5))
    saved_gain = agg_module.ATTN_INIT_GAIN
    agg_module.ATTN_INIT_GAIN = 1.0
    try:
        failures = _grad_check_grid(doc, bag, args)
    finally:
        agg_module.ATTN_INIT_GAIN = saved_gain
    print(f"grad-check: {'all groups passed' if failures == 0 else f'{failures} failures'}")
    return 0 if failures == 0 else 1


def _grad_check_grid(doc, bag, args) -> int:
    failures = 0
    for variant, model_over in _GRAD_CHECK_GRID:
        vdoc = json.loads(json.dumps(doc))
        vdoc["model"]["variant"] = variant
        vdoc["model"].update(model_over)
        cfg = RunConfig(vdoc).validate()
        tag = variant
        if variant == "abmilx":
            tag += (f"(m={model_over['heads']},alpha={model_over['alpha_mode']},"
                    f"ffn={'on' if model_over['ffn'] else 'off'})")

        fresh = make_pipeline(cfg["model"], 5, 2,
                              np.random.default_rng([cfg.seed, 3]))
        dataset = make_dataset(cfg.dataset_config())
        ckpt, _ = train(cfg, dataset)  # 5 train slides, batch 1 -> 5 steps
        stepped = restore_pipeline(ckpt)

        for phase, pipeline in (("init", fresh), ("step5", stepped)):
            errors = grad_check_pipeline(pipeline, bag, label=1, step=args.step)
            for group, err in errors.items():
                ok = err <= args.tol
                failures += 0 if ok else 1
                print(f"{'PASS' if ok else 'FAIL'} {phase:5s} {tag} "
                      f"{group} rel_err={err:.2e}")
    return failures


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abxmil",
        description="Desk-scale end-to-end multiple-instance-learning lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--slides", type=int)
    p.add_argument("--witness-rate", dest="witness_rate", type=float)
    p.add_argument("--separation", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model end to end")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--log")
    p.add_argument("--variant")
    p.add_argument("--heads", type=int)
    p.add_argument("--alpha-mode", dest="alpha_mode")
    p.add_argument("--ffn", choices=["on", "off"])
    p.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--sample-count", dest="sample_count", type=int)
    p.add_argument("--strategy")
    p.add_argument("--regions", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bootstrap metrics of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.add_argument("--bootstrap", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention/risk/decomposition artifacts")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train/eval a table of settings")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(_SWEEP_AXES))
    p.add_argument("--values", help="comma-separated override of the axis values")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--variant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--slides", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of all variants")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
