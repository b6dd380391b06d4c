"""Command-line front-end: ``nocdda <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .classifier import TimeAwareClassifier, make_classifier, train_supervised
from .diffusion import EpsilonNet, NoiseSchedule
from .mlp import load_params, save_params
from .pipeline import (VARIANTS, PipelineConfig, PipelineError, evaluate_accuracy, grid_csv, load_dataset,
                       run_ablation_grid, run_nocdda_with_state, write_run_artifacts)
from .plotting import PlotDimensionError, plot_trajectories
from .sampler import ClassPrior, SamplerConfig, class_purity, generate, save_trajectories_csv


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _default_seed() -> int:
    return int(os.environ.get("NOCDDA_SEED", "0"))


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_config(args) -> PipelineConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    d["seed"] = args.seed
    if getattr(args, "data", None):
        d["dataset"] = {"csv": str(args.data)}
    for flag, key in (("samples_per_class", "samples_per_class"), ("tds_fraction", "tds_fraction"),
                      ("guidance_scale", "guidance_scale")):
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    cfg = PipelineConfig.from_dict(d)
    if getattr(args, "variant", None):
        cfg = cfg.with_variant(args.variant)
    return cfg


def _load_classifier(path) -> TimeAwareClassifier:
    params, meta = load_params(path)
    return TimeAwareClassifier(params, meta["C"], meta["T"], meta["emb_dim"])


def cmd_gen_data(args) -> int:
    if args.generator == "two-moons":
        bundle = data_mod.gen_two_moons_shift(args.n, args.rotation, args.noise_sd, args.seed)
    else:
        translation = _floats(args.translation) if args.translation else None
        bundle = data_mod.gen_gaussian_blobs_shift(args.classes, args.dim, translation, args.scale, args.seed,
                                                   args.n_per_class)
    out = args.out_dir / "data.csv"
    data_mod.save_csv(bundle, out)
    print(out)
    return 0


def cmd_train_source(args) -> int:
    bundle = data_mod.load_csv(args.data)
    rng = np.random.default_rng([args.seed, 1])
    clf = make_classifier(bundle.d, bundle.C, args.T, np.random.default_rng([args.seed, 0]), _ints(args.hidden))
    trace = train_supervised(clf, bundle.source_train.X, bundle.source_train.y, args.epochs, args.batch,
                             args.lr, rng)
    save_params(clf.net, args.out_dir / "classifier.json",
                {"C": clf.C, "T": clf.T, "emb_dim": clf.emb_dim, "seed": args.seed})
    report = {"seed": args.seed, "loss_trace": trace,
              "source_accuracy": evaluate_accuracy(clf, bundle.source_test) if len(bundle.source_test) else None}
    (args.out_dir / "train_source.json").write_text(json.dumps(report, indent=2))
    print(args.out_dir / "classifier.json")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    try:
        report, state = run_nocdda_with_state(cfg)
    except PipelineError as exc:
        write_run_artifacts(exc.report, None, cfg, args.out_dir)
        raise StageFailure(exc.stage, str(exc)) from exc
    run_dir = write_run_artifacts(report, state, cfg, args.out_dir)
    print(run_dir / "report.json")
    return 0


def cmd_sample(args) -> int:
    run_dir = Path(args.run_dir)
    sched = NoiseSchedule.from_json((run_dir / "schedule.json").read_text())
    guide_path = run_dir / "guide.json"
    clf = _load_classifier(guide_path if guide_path.exists() else run_dir / "classifier.json")
    eps_params, meta = load_params(run_dir / "epsilon.json")
    eps_net = EpsilonNet(eps_params, meta["T"], meta["emb_dim"])
    priors = {}
    if (run_dir / "priors.json").exists():
        for p in json.loads((run_dir / "priors.json").read_text()):
            priors[p["class_id"]] = ClassPrior(p["class_id"], np.asarray(p["mu"]), p["sigma_scale"],
                                               p["support_count"])
    cfg = SamplerConfig(sched.T, args.active_steps, args.jump, args.guidance_scale, args.seed)
    classes = _ints(args.classes) if args.classes else list(range(clf.C))
    all_X, all_y, trajs, purity = [], [], [], {}
    for c in classes:
        prior = priors.get(c) if args.init == "prior" else None
        if args.init == "prior" and prior is None:
            raise StageFailure("sample", f"no class prior stored for class {c}")
        X, tr, _ = generate(eps_net, clf, prior, cfg, args.n, sched, class_id=c, record=True)
        all_X.append(X)
        all_y.append(np.full(len(X), c))
        trajs.extend(tr)
        purity[str(c)] = class_purity(clf, X, c)
    data_mod.save_samples_csv(np.vstack(all_X), np.concatenate(all_y), "generated", args.out_dir / "samples.csv")
    save_trajectories_csv(trajs, args.out_dir / "trajectories.csv")
    (args.out_dir / "sample.json").write_text(json.dumps({"seed": args.seed, "purity": purity}, indent=2))
    print(args.out_dir / "samples.csv")
    return 0


def cmd_eval(args) -> int:
    clf = _load_classifier(args.checkpoint)
    bundle = data_mod.load_csv(args.data)
    split = getattr(bundle, args.split)
    acc = evaluate_accuracy(clf, split)
    out = args.out_dir / "eval.json"
    out.write_text(json.dumps({"split": args.split, "accuracy": acc, "n": len(split)}, indent=2))
    print(f"{args.split} accuracy {acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    seeds = _ints(args.seeds) if args.seeds else [base.seed]
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise StageFailure("ablate", f"unknown variant {v!r}")
    cells = run_ablation_grid(base, _floats(args.tds), _ints(args.gen), variants, seeds, args.workers)
    (args.out_dir / "grid.csv").write_text(grid_csv(cells))
    (args.out_dir / "cells.json").write_text(json.dumps(
        [{k: c[k] for k in ("tds", "gen", "variant", "seed", "accuracy")} for c in cells], indent=2))
    (args.out_dir / "config.json").write_text(json.dumps(base.to_dict(), indent=2, sort_keys=True))
    print(args.out_dir / "grid.csv")
    return 0


def cmd_plot(args) -> int:
    dims = tuple(args.dims) if args.dims else None
    try:
        out = plot_trajectories(args.trajectories, args.out or args.out_dir / "trajectories.svg", dims)
    except PlotDimensionError as exc:
        raise StageFailure("plot", str(exc)) from exc
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nocdda", description="Noise-optimized conditional diffusion for DA")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="global seed (falls back to $NOCDDA_SEED, then 0)")
        p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for artifacts")
        p.set_defaults(func=fn)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic domain-shift dataset")
    p.add_argument("--generator", choices=["two-moons", "blobs"], default="two-moons")
    p.add_argument("--n", type=int, default=1000, help="samples per domain (two-moons)")
    p.add_argument("--rotation", type=float, default=30.0)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--translation", default=None, help="comma-separated target offset (blobs)")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--n-per-class", type=int, default=100)

    p = command("train-source", cmd_train_source, "train the classifier on source data at t=0")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=36)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--hidden", default="32,32")

    p = command("adapt", cmd_adapt, "run the full adaptation pipeline")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--tds-fraction", type=float)
    p.add_argument("--guidance-scale", type=float)

    p = command("sample", cmd_sample, "generate class-conditional samples from an adapt run")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--classes", default=None)
    p.add_argument("--init", choices=["prior", "standard"], default="prior")
    p.add_argument("--active-steps", type=int, default=200)
    p.add_argument("--jump", type=int, default=5)
    p.add_argument("--guidance-scale", type=float, default=1.0)

    p = command("eval", cmd_eval, "accuracy of a classifier checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["source_test", "target_test", "source_train", "target_train"],
                   default="target_test")

    p = command("ablate", cmd_ablate, "run the ablation grid")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--tds", default="0.1,0.5,1.0")
    p.add_argument("--gen", default="0,100")
    p.add_argument("--variants", default="G,G+CU,NOCDDA")
    p.add_argument("--seeds", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = command("plot", cmd_plot, "render 2-D trajectories to SVG")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--dims", type=int, nargs=2, metavar=("I", "J"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except StageFailure as exc:
        print(f"nocdda {args.command}: [{exc.stage}] {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, data_mod.CsvFormatError) as exc:
        print(f"nocdda {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
