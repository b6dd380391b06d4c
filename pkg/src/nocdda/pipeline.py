"""End-to-end adaptation runs, evaluation, and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from . import data as data_mod
from .alignment import align, make_discriminator
from .classifier import (PseudoLabeledSet, SelectionRule, TimeAwareClassifier, export_hcpl_csv,
                         make_classifier, predict, select_hcpl, train_supervised, train_unified)
from .diffusion import EpsilonNet, NoiseSchedule, make_epsilon_net, make_linear_schedule, train_epsilon
from .sampler import (ClassPrior, SamplerConfig, class_purity, estimate_class_prior, generate,
                      save_trajectories_csv)

VARIANTS = {
    "source-only": {"adversarial": False, "classifier_unification": False, "noise_optimization": False},
    "G": {"adversarial": True, "classifier_unification": False, "noise_optimization": False},
    "G+CU": {"adversarial": True, "classifier_unification": True, "noise_optimization": False},
    "NOCDDA": {"adversarial": True, "classifier_unification": True, "noise_optimization": True},
}

STAGE_STREAMS = ("init", "pretrain", "adversarial", "tds", "unified", "epsilon", "prior", "sampling",
                 "finetune", "guide")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, report: "RunReport", cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.report = report


@dataclass
class PipelineConfig:
    dataset: dict = field(default_factory=lambda: {"generator": "two-moons", "n_per_domain": 1000,
                                                   "rotation_degrees": 30.0, "noise_sd": 0.1})
    clf_hidden: list = field(default_factory=lambda: [32, 32])
    eps_hidden: list = field(default_factory=lambda: [64, 64])
    disc_hidden: list = field(default_factory=lambda: [32])
    emb_dim: int = 16
    activation: str = "relu"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.005
    selection: dict = field(default_factory=lambda: {"kind": "quantile", "value": 0.5, "min_per_class": 1})
    tds_fraction: float = 1.0
    batch: int = 36
    momentum: float = 0.5
    pretrain_epochs: int = 100
    pretrain_lr: float = 0.02
    adversarial_rounds: int = 300
    adv_lr_G: float = 0.01
    adv_lr_D: float = 0.02
    adv_weight: float = 0.3
    unified_epochs: int = 60
    unified_lr: float = 0.02
    loss_mode: str = "ce"
    eps_epochs: int = 300
    eps_lr: float = 0.02
    eps_momentum: float = 0.9
    eps_batch: int = 64
    active_steps: int = 200
    jump: int = 5
    guidance_scale: float = 1.0
    n_noisings: int = 8
    samples_per_class: int = 800
    finetune_epochs: int = 50
    finetune_lr: float = 0.02
    purity_filter: bool = True
    control_purity: bool = True
    stages: dict = field(default_factory=lambda: dict(VARIANTS["NOCDDA"]))
    realign_after_augmentation: bool = False
    refresh_rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.stages) - set(VARIANTS["NOCDDA"])
        if unknown:
            raise ValueError(f"unknown stage toggles {sorted(unknown)}")
        for k in VARIANTS["NOCDDA"]:
            self.stages.setdefault(k, False)
        if not 0 < self.tds_fraction <= 1:
            raise ValueError("tds_fraction must lie in (0, 1]")
        if self.refresh_rounds < 1:
            raise ValueError("refresh_rounds must be >= 1")
        self.sampler_config()

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.T, self.active_steps, self.jump, self.guidance_scale, self.seed)

    def selection_rule(self) -> SelectionRule:
        return SelectionRule(**self.selection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    def with_variant(self, variant: str, **overrides) -> "PipelineConfig":
        d = self.to_dict()
        d["stages"] = dict(VARIANTS[variant])
        if variant == "source-only":
            d["adversarial_rounds"] = 0
            d["samples_per_class"] = 0
        d.update(overrides)
        return PipelineConfig.from_dict(d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RunReport:
    seed: int
    config: dict
    stage_losses: dict = field(default_factory=dict)
    hcpl_census: list = field(default_factory=list)
    prior_diagnostics: list = field(default_factory=list)
    purity: dict = field(default_factory=dict)
    purity_control: dict = field(default_factory=dict)
    generated_total: int = 0
    generated_kept: int = 0
    source_accuracy: float | None = None
    target_accuracy: float | None = None
    timings: dict = field(default_factory=dict)
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self, include_timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_timings:
            d.pop("timings")
        return d

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)


@dataclass
class PipelineState:
    bundle: data_mod.DatasetBundle
    sched: NoiseSchedule
    clf: TimeAwareClassifier
    guide: TimeAwareClassifier | None = None
    eps_net: EpsilonNet | None = None
    hcpl: PseudoLabeledSet | None = None
    pool: np.ndarray | None = None
    priors: dict = field(default_factory=dict)
    generated_X: np.ndarray | None = None
    generated_y: np.ndarray | None = None
    trajectories: list = field(default_factory=list)
    alignment_logs: list = field(default_factory=list)


def evaluate_accuracy(clf: TimeAwareClassifier, test_set: data_mod.DomainSplit) -> float:
    """Fraction of samples whose t = 0 argmax equals the ground-truth label."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    y = data_mod.reveal_labels(test_set)
    pred = predict(clf, test_set.X, 0).argmax(axis=1)
    return float(np.mean(pred == y))


def load_dataset(spec: dict) -> data_mod.DatasetBundle:
    spec = dict(spec)
    if "csv" in spec:
        return data_mod.load_csv(spec["csv"], spec.get("schema"))
    gen = spec.pop("generator", "two-moons")
    seed = spec.pop("seed", 0)
    if gen == "two-moons":
        return data_mod.gen_two_moons_shift(seed=seed, **spec)
    if gen == "blobs":
        return data_mod.gen_gaussian_blobs_shift(seed=seed, **spec)
    raise ValueError(f"unknown generator {gen!r}")


def _streams(seed: int) -> dict:
    return {name: np.random.default_rng([seed, k]) for k, name in enumerate(STAGE_STREAMS)}


class _Stage:
    def __init__(self, name: str, report: RunReport):
        self.name, self.report = name, report

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.report.timings[self.name] = self.report.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, PipelineError):
            self.report.status = "failed"
            self.report.failed_stage = self.name
            self.report.error = f"{type(exc).__name__}: {exc}"
            raise PipelineError(self.name, self.report, exc) from exc
        return False


def run_nocdda_with_state(cfg: PipelineConfig, bundle: data_mod.DatasetBundle | None = None):
    """Run every enabled stage; returns (RunReport, PipelineState)."""
    report = RunReport(seed=cfg.seed, config=cfg.to_dict())
    rng = _streams(cfg.seed)
    toggles = cfg.stages

    with _Stage("data", report):
        if bundle is None:
            bundle = load_dataset({**cfg.dataset, "seed": cfg.dataset.get("seed", cfg.seed)})
        sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end, seed=cfg.seed)
        C, d = bundle.C, bundle.d
        source = (bundle.source_train.X, bundle.source_train.y)
        clf = make_classifier(d, C, cfg.T, rng["init"], cfg.clf_hidden, cfg.emb_dim, cfg.activation)
        state = PipelineState(bundle, sched, clf)
        pool = bundle.target_train.X
        if cfg.tds_fraction < 1:
            keep = max(1, int(np.ceil(cfg.tds_fraction * len(pool))))
            pool = pool[np.sort(rng["tds"].permutation(len(pool))[:keep])]
        state.pool = pool

    with _Stage("pretrain", report):
        report.stage_losses["pretrain"] = train_supervised(
            clf, *source, cfg.pretrain_epochs, cfg.batch, cfg.pretrain_lr, rng["pretrain"], cfg.momentum)

    disc = None
    for refresh in range(cfg.refresh_rounds):
        tag = "" if refresh == 0 else f"_{refresh}"
        if toggles["adversarial"] and cfg.adversarial_rounds > 0:
            with _Stage("adversarial", report):
                if disc is None:
                    disc = make_discriminator(cfg.clf_hidden[-1], C, rng["init"], cfg.disc_hidden,
                                              cfg.activation)
                log = align(clf, disc, source, bundle.target_train.X, cfg.adversarial_rounds, cfg.batch,
                            cfg.adv_lr_G, cfg.adv_lr_D, rng["adversarial"], cfg.adv_weight, cfg.momentum)
                state.alignment_logs.append(log)
                report.stage_losses["adversarial" + tag] = {
                    "final": log.rows[-1], "saturated": log.saturated,
                    "mean_confusion_last_50": float(np.mean([r["confusion_score"] for r in log.rows[-50:]]))}

        with _Stage("selection", report):
            hcpl = select_hcpl(clf, pool, cfg.selection_rule())
            state.hcpl = hcpl
            report.hcpl_census = hcpl.census(C)

        generating = cfg.samples_per_class > 0
        guide = clf
        if toggles["classifier_unification"]:
            with _Stage("unified", report):
                _, trace = train_unified(clf, source, hcpl, sched, cfg.unified_epochs, cfg.batch,
                                         cfg.unified_lr, rng["unified"], cfg.momentum, cfg.loss_mode)
                report.stage_losses["unified" + tag] = trace
        elif generating:
            with _Stage("unified", report):
                # without unification the diffusion classifier is a separate network on noised data only
                guide = make_classifier(d, C, cfg.T, rng["guide"], cfg.clf_hidden, cfg.emb_dim, cfg.activation)
                _, trace = train_unified(guide, source, hcpl, sched, cfg.unified_epochs, cfg.batch,
                                         cfg.unified_lr, rng["guide"], cfg.momentum, cfg.loss_mode, terms="noised")
                report.stage_losses["guide" + tag] = trace
        state.guide = guide

        if not generating:
            continue

        with _Stage("epsilon", report):
            if state.eps_net is None:
                eps_net = make_epsilon_net(d, cfg.T, rng["init"], cfg.eps_hidden, cfg.emb_dim, cfg.activation)
                _, trace = train_epsilon(pool, sched, eps_net, cfg.eps_epochs, cfg.eps_batch, cfg.eps_lr,
                                         rng["epsilon"], cfg.eps_momentum)
                state.eps_net = eps_net
                report.stage_losses["epsilon"] = trace

        with _Stage("generation", report):
            scfg = cfg.sampler_config()
            gen_X, gen_y, diags = [], [], []
            report.purity = {}
            for c in range(C):
                prior = None
                if toggles["noise_optimization"]:
                    prior = estimate_class_prior(hcpl.class_subset(c), c, C, sched, cfg.n_noisings, rng["prior"])
                    state.priors[c] = prior
                    diags.append(prior.diagnostics())
                Xc, trajs, info = generate(state.eps_net, guide, prior, scfg, cfg.samples_per_class, sched,
                                           class_id=c, record=True, rng=np.random.default_rng([cfg.seed, 99, c]))
                state.trajectories.extend(trajs)
                labels_c = predict(guide, Xc, 0).argmax(axis=1) if len(Xc) else np.zeros(0, dtype=int)
                report.purity[str(c)] = float(np.mean(labels_c == c)) if len(Xc) else None
                if prior is not None and cfg.control_purity:
                    # same nets and noise stream, standard-normal start
                    Xn, _, _ = generate(state.eps_net, guide, None, scfg, cfg.samples_per_class, sched,
                                        class_id=c, rng=np.random.default_rng([cfg.seed, 99, c]))
                    report.purity_control[str(c)] = class_purity(guide, Xn, c) if len(Xn) else None
                if cfg.purity_filter:
                    Xc = Xc[labels_c == c]
                report.generated_total += cfg.samples_per_class
                gen_X.append(Xc)
                gen_y.append(np.full(len(Xc), c))
            report.prior_diagnostics = diags
            state.generated_X = np.vstack(gen_X)
            state.generated_y = np.concatenate(gen_y)
            report.generated_kept = int(len(state.generated_y))

        with _Stage("finetune", report):
            X_aug = np.vstack([source[0], hcpl.X, state.generated_X])
            y_aug = np.concatenate([source[1], hcpl.labels, state.generated_y])
            report.stage_losses["finetune" + tag] = train_supervised(
                clf, X_aug, y_aug, cfg.finetune_epochs, cfg.batch, cfg.finetune_lr, rng["finetune"], cfg.momentum)
            if cfg.realign_after_augmentation and toggles["adversarial"] and cfg.adversarial_rounds > 0:
                log = align(clf, disc, source, bundle.target_train.X, cfg.adversarial_rounds, cfg.batch,
                            cfg.adv_lr_G, cfg.adv_lr_D, rng["adversarial"], cfg.adv_weight, cfg.momentum)
                state.alignment_logs.append(log)

    with _Stage("evaluation", report):
        report.source_accuracy = evaluate_accuracy(clf, bundle.source_test)
        report.target_accuracy = evaluate_accuracy(clf, bundle.target_test)
    report.status = "ok"
    return report, state


def run_nocdda(cfg: PipelineConfig, bundle: data_mod.DatasetBundle | None = None) -> RunReport:
    return run_nocdda_with_state(cfg, bundle)[0]


def run_directory(out_dir, cfg: PipelineConfig) -> Path:
    return Path(out_dir) / f"run-{cfg.digest()}-seed{cfg.seed}"


def write_run_artifacts(report: RunReport, state: PipelineState | None, cfg: PipelineConfig, out_dir) -> Path:
    """Write report, effective config, checkpoints and CSV exports into the run directory."""
    from .mlp import save_params

    run_dir = run_directory(out_dir, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (run_dir / "report.json").write_text(report.to_json())
    if state is None:
        return run_dir
    (run_dir / "schedule.json").write_text(state.sched.to_json())
    clf = state.clf
    save_params(clf.net, run_dir / "classifier.json", {"C": clf.C, "T": clf.T, "emb_dim": clf.emb_dim})
    if state.guide is not None and state.guide is not clf:
        g = state.guide
        save_params(g.net, run_dir / "guide.json", {"C": g.C, "T": g.T, "emb_dim": g.emb_dim})
    if state.eps_net is not None:
        e = state.eps_net
        save_params(e.net, run_dir / "epsilon.json", {"T": e.T, "emb_dim": e.emb_dim})
    if state.priors:
        (run_dir / "priors.json").write_text(json.dumps([p.diagnostics() for p in state.priors.values()]))
    if state.hcpl is not None:
        export_hcpl_csv(state.hcpl, state.pool, run_dir / "hcpl.csv")
    if state.generated_X is not None:
        data_mod.save_samples_csv(state.generated_X, state.generated_y, "generated", run_dir / "generated.csv")
    if state.trajectories:
        save_trajectories_csv(state.trajectories, run_dir / "trajectories.csv")
    for k, log in enumerate(state.alignment_logs):
        log.to_csv(run_dir / f"alignment{'' if k == 0 else k}.csv")
    return run_dir


def _run_cell(args):
    cfg_dict, = args
    cfg = PipelineConfig.from_dict(cfg_dict)
    try:
        return run_nocdda(cfg).to_dict(include_timings=False)
    except PipelineError as exc:
        return exc.report.to_dict(include_timings=False)


def run_ablation_grid(base: PipelineConfig, tds_fractions, gen_counts, variants, seeds, workers: int = 1):
    """Run every (tds, gen_count, variant, seed) cell; failed cells are kept with status "failed".

    Returns the list of cell dicts, each with the cell coordinates and its report.
    """
    if not tds_fractions or not gen_counts or not variants or not seeds:
        raise ValueError("every ablation axis must be nonempty")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    cells, jobs = [], []
    for tds in tds_fractions:
        for gen in gen_counts:
            for v in variants:
                for seed in seeds:
                    cfg = base.with_variant(v, tds_fraction=tds, samples_per_class=gen, seed=seed)
                    if v == "source-only":
                        cfg = base.with_variant(v, tds_fraction=tds, seed=seed)
                    cells.append({"tds": tds, "gen": gen, "variant": v, "seed": seed})
                    jobs.append((cfg.to_dict(),))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    for cell, rep in zip(cells, results):
        cell["report"] = rep
        cell["accuracy"] = rep["target_accuracy"] if rep["status"] == "ok" else None
    return cells


def grid_medians(cells) -> dict:
    groups: dict[tuple, list] = {}
    for c in cells:
        groups.setdefault((c["tds"], c["variant"], c["gen"]), []).append(c["accuracy"])
    return {k: (median(v) if all(a is not None for a in v) else None) for k, v in groups.items()}


def grid_csv(cells) -> str:
    """Rows are TDS fractions; columns are variant@gen_count; values are seed medians."""
    med = grid_medians(cells)
    tds_vals = sorted({k[0] for k in med})
    cols = []
    for c in cells:
        key = (c["variant"], c["gen"])
        if key not in cols:
            cols.append(key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tds"] + [f"{v}@{g}" for v, g in cols])
    for tds in tds_vals:
        row = [repr(tds)]
        for v, g in cols:
            m = med.get((tds, v, g))
            row.append("failed" if m is None else repr(m))
        w.writerow(row)
    return buf.getvalue()
