"""Noise schedules, forward diffusion, and epsilon-prediction training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mlp import SGD, DimensionError, MlpParams, forward_mlp, init_mlp, leaves, mlp_graph


class ScheduleError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule over steps 1..T. Arrays are indexed by ``t - 1``."""

    T: int
    beta_start: float
    beta_end: float
    seed: int | None = None
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        if np.any(np.diff(betas) <= 0):
            raise ScheduleError("betas are not strictly increasing at this resolution")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t, with alpha_bar(0) = 1."""
        if not 0 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta_start": self.beta_start,
                           "beta_end": self.beta_end, "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        d = json.loads(text)
        return make_linear_schedule(d["T"], d["beta_start"], d["beta_end"], seed=d.get("seed"))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                         seed: int | None = None) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError("T must be an integer >= 2")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ScheduleError("need 0 < beta_start < beta_end < 1")
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), seed)


def time_embedding(t, T: int, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of t / T, interleaved as (sin, cos) pairs.

    Frequencies are geometrically spaced from 1 to 1000 rad per unit of t / T.
    Returns shape (dim,) for scalar t and (n, dim) for an array of steps.
    """
    if dim <= 0 or dim % 2:
        raise ValueError("embedding dimension must be a positive even integer")
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 1000.0 ** (np.arange(half) / max(half - 1, 1))
    angles = (t_arr[..., None] / T) * freqs
    emb = np.empty(t_arr.shape + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


def forward_diffuse(x0, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) z; t = 0 returns x0 unchanged."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise DimensionError(f"noise shape {z.shape} differs from data shape {x0.shape}")
    if not 0 <= t <= sched.T:
        raise ScheduleError(f"step {t} outside [0, {sched.T}]")
    if t == 0:
        return x0.copy()
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def forward_diffuse_batch(x0: np.ndarray, ts: np.ndarray, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Row-wise forward diffusion with per-row steps ``ts`` (all >= 1)."""
    ab = sched.alpha_bars[np.asarray(ts) - 1][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


@dataclass
class EpsilonNet:
    net: MlpParams
    T: int
    emb_dim: int = 16

    @property
    def data_dim(self) -> int:
        return self.net.out_dim

    def __call__(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        ts = np.broadcast_to(np.asarray(t), (xb.shape[0],))
        out = forward_mlp(self.net, np.hstack([xb, time_embedding(ts, self.T, self.emb_dim)]))
        return out[0] if single else out


def make_epsilon_net(data_dim: int, T: int, rng: np.random.Generator, hidden=(64, 64),
                     emb_dim: int = 16, activation: str = "relu", zero_last: bool = True) -> EpsilonNet:
    sizes = [data_dim + emb_dim, *hidden, data_dim]
    return EpsilonNet(init_mlp(sizes, rng, activation, "identity", zero_last=zero_last), T, emb_dim)


def epsilon_loss_graph(net: EpsilonNet, tape: ad.Tape, x_t: np.ndarray, ts: np.ndarray, eps: np.ndarray):
    """Batch mean of ||eps - eps_theta(x_t, t)||^2; returns (loss node, param leaves)."""
    params = leaves(tape, net.net)
    inp = tape.constant(np.hstack([x_t, time_embedding(ts, net.T, net.emb_dim)]))
    pred, _ = mlp_graph(params, inp, net.net.activation)
    resid = ad.sub(pred, eps)
    loss = ad.mul(ad.total(ad.square(resid)), 1.0 / x_t.shape[0])
    return loss, params


def train_epsilon(data, sched: NoiseSchedule, net: EpsilonNet, epochs: int, batch: int, lr: float,
                  rng: np.random.Generator, momentum: float = 0.9) -> tuple[EpsilonNet, list[float]]:
    """Denoising score matching in epsilon form with per-sample uniform steps in 1..T.

    Mutates ``net`` in place; returns it with the per-epoch mean loss trace.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a nonempty (n, d) array")
    if X.shape[1] != net.data_dim:
        raise DimensionError(f"data dimension {X.shape[1]} differs from net output {net.data_dim}")
    opt = SGD(net.net, lr, momentum)
    trace: list[float] = []
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            x0 = X[idx]
            ts = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            tape = ad.Tape()
            loss, params = epsilon_loss_graph(net, tape, forward_diffuse_batch(x0, ts, eps, sched), ts, eps)
            value = float(loss.value)
            if not np.isfinite(value):
                trace.append(value)
                raise DivergenceError("epsilon training diverged", trace)
            opt.step(tape.backward(loss, params))
            losses.append(value * len(idx))
        trace.append(sum(losses) / n)
    return net, trace
