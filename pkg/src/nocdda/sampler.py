"""Classifier-guided DDIM generation from class-specific terminal distributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .classifier import TimeAwareClassifier, log_prob_input_grad, predict
from .diffusion import EpsilonNet, NoiseSchedule, forward_diffuse_batch


class SamplingError(RuntimeError):
    pass


@dataclass
class ClassPrior:
    class_id: int
    mu: np.ndarray
    sigma_scale: float
    support_count: int
    empirical_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.support_count < 1:
            raise ValueError("support_count must be >= 1")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("prior mean is not finite")

    def diagnostics(self) -> dict:
        return {"class_id": self.class_id, "mu": self.mu.tolist(), "sigma_scale": self.sigma_scale,
                "support_count": self.support_count,
                "empirical_cov": None if self.empirical_cov is None else self.empirical_cov.tolist()}


def estimate_class_prior(subset, class_id: int, C: int, sched: NoiseSchedule, n_noisings: int,
                         rng: np.random.Generator) -> ClassPrior:
    """Mean of the class's samples diffused to step T, ``n_noisings`` draws each.

    The empirical covariance is kept for diagnostics only; the sampling
    covariance is always I / C.
    """
    X = np.asarray(subset, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"class {class_id} has no samples to estimate its prior from")
    if n_noisings < 1:
        raise ValueError("n_noisings must be >= 1")
    reps = np.repeat(X, n_noisings, axis=0)
    xT = forward_diffuse_batch(reps, np.full(len(reps), sched.T), rng.standard_normal(reps.shape), sched)
    cov = np.cov(xT, rowvar=False) if len(xT) > 1 else np.zeros((X.shape[1], X.shape[1]))
    return ClassPrior(class_id, xT.mean(axis=0), 1.0 / C, len(X), np.atleast_2d(cov))


def init_terminal(prior: ClassPrior, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """mu_c + sqrt(sigma_scale) z with z standard normal; ``n`` rows when given."""
    shape = prior.mu.shape if n is None else (n, prior.mu.shape[0])
    return prior.mu + np.sqrt(prior.sigma_scale) * rng.standard_normal(shape)


def guided_epsilon(eps_net: EpsilonNet, clf: TimeAwareClassifier | None, x_t, t: int, c,
                   guidance_scale: float, sched: NoiseSchedule) -> np.ndarray:
    """eps_theta(x_t, t) - scale * sqrt(1 - abar_t) * grad_x log p(c | x_t, t)."""
    if t < 1:
        raise ValueError("guided noise is defined for t >= 1")
    eps = eps_net(x_t, t)
    if guidance_scale == 0 or clf is None:
        return eps
    grad = log_prob_input_grad(clf, x_t, t, c)
    return eps - guidance_scale * np.sqrt(1.0 - sched.alpha_bar(t)) * grad


def ddim_step(x_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from step t to an earlier step t_prev."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps_hat


@dataclass(frozen=True)
class SamplerConfig:
    total_T: int = 1000
    active_steps: int = 200
    jump: int = 5
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.active_steps < 1 or self.jump < 1:
            raise ValueError("active_steps and jump must be positive")
        if self.active_steps * self.jump > self.total_T:
            raise ValueError("active_steps * jump exceeds total_T")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")

    def visited_steps(self) -> list[int]:
        """T, T - jump, ... for ``active_steps`` entries, then 0."""
        return [self.total_T - k * self.jump for k in range(self.active_steps)] + [0]


@dataclass
class Trajectory:
    class_id: int
    states: list[tuple[int, np.ndarray]] = field(default_factory=list)
    terminal_label: int | None = None


def reverse_pass(eps_net: EpsilonNet, clf: TimeAwareClassifier | None, x_T: np.ndarray, steps: list[int],
                 c, guidance_scale: float, sched: NoiseSchedule, record: bool = False):
    """Walk ``steps`` (descending) from x_T; returns final batch and per-step states."""
    x = np.array(x_T, dtype=np.float64, copy=True)
    states = [(steps[0], x.copy())] if record else []
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat = guided_epsilon(eps_net, clf, x, t, c, guidance_scale, sched)
        x = ddim_step(x, t, t_prev, eps_hat, sched)
        if record:
            states.append((t_prev, x.copy()))
    return x, states


def generate(eps_net: EpsilonNet, clf: TimeAwareClassifier, prior: ClassPrior | None, cfg: SamplerConfig,
             n: int, sched: NoiseSchedule, class_id: int | None = None, record: bool = False,
             rng: np.random.Generator | None = None):
    """Draw ``n`` samples for one class by guided DDIM descent.

    With ``prior=None`` the walk starts from N(0, I) (the unoptimized control);
    ``class_id`` must then be given. Samples whose path turns non-finite are
    dropped and reported in the returned diagnostics.
    """
    c = prior.class_id if prior is not None else class_id
    if c is None:
        raise ValueError("class_id is required without a prior")
    if cfg.total_T != sched.T:
        raise ValueError("sampler total_T differs from the schedule's T")
    if n == 0:
        return np.zeros((0, eps_net.data_dim)), [], {"dropped": 0}
    rng = rng or np.random.default_rng([cfg.seed, c])
    if prior is not None:
        x_T = init_terminal(prior, rng, n)
    else:
        x_T = rng.standard_normal((n, eps_net.data_dim))
    with np.errstate(over="ignore", invalid="ignore"):
        x0, states = reverse_pass(eps_net, clf, x_T, cfg.visited_steps(), c, cfg.guidance_scale, sched, record)
    ok = np.all(np.isfinite(x0), axis=1)
    trajectories = []
    if record:
        labels = predict(clf, np.where(ok[:, None], x0, 0.0), 0).argmax(axis=1)
        for i in np.flatnonzero(ok):
            trajectories.append(Trajectory(c, [(t, s[i].copy()) for t, s in states], int(labels[i])))
    return x0[ok], trajectories, {"dropped": int((~ok).sum())}


def class_purity(clf: TimeAwareClassifier, samples: np.ndarray, c: int) -> float:
    if len(samples) == 0:
        return float("nan")
    return float(np.mean(predict(clf, samples, 0).argmax(axis=1) == c))


def save_trajectories_csv(trajectories: list[Trajectory], path) -> None:
    d = trajectories[0].states[0][1].shape[0] if trajectories else 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "class_id", "t"] + [f"x_{j}" for j in range(d)])
        for k, tr in enumerate(trajectories):
            for t, x in tr.states:
                w.writerow([k, tr.class_id, t] + [repr(float(v)) for v in x])


def load_trajectories_csv(path) -> list[Trajectory]:
    out: dict[int, Trajectory] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        for row in reader:
            k, c, t = int(row[0]), int(row[1]), int(row[2])
            tr = out.setdefault(k, Trajectory(c))
            tr.states.append((t, np.array([float(v) for v in row[3:]])))
    return [out[k] for k in sorted(out)]
