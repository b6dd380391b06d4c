"""Time-aware classifier shared by the DA (t = 0) and diffusion (t > 0) roles."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import DivergenceError, NoiseSchedule, forward_diffuse_batch, time_embedding
from .mlp import SGD, DimensionError, MlpParams, forward_mlp, init_mlp, leaves, mlp_graph

LOG_PROB_FLOOR = float(np.log(1e-12))


class EmptySelectionWarning(UserWarning):
    pass


class LogProbClampWarning(UserWarning):
    pass


@dataclass
class TimeAwareClassifier:
    net: MlpParams
    C: int
    T: int
    emb_dim: int = 16

    @property
    def data_dim(self) -> int:
        return self.net.in_dim - self.emb_dim

    def inputs(self, x: np.ndarray, t) -> np.ndarray:
        ts = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return np.hstack([x, time_embedding(ts, self.T, self.emb_dim)])


def make_classifier(data_dim: int, C: int, T: int, rng: np.random.Generator, hidden=(32, 32),
                    emb_dim: int = 16, activation: str = "relu", zero_last: bool = False) -> TimeAwareClassifier:
    sizes = [data_dim + emb_dim, *hidden, C]
    return TimeAwareClassifier(init_mlp(sizes, rng, activation, "softmax", zero_last=zero_last), C, T, emb_dim)


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def predict(clf: TimeAwareClassifier, x, t=0) -> np.ndarray:
    """Class probabilities for one sample or a batch at diffusion step t."""
    xb, single = _batch(x)
    if xb.shape[1] != clf.data_dim:
        raise DimensionError(f"input has {xb.shape[1]} features, classifier expects {clf.data_dim}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > clf.T):
        raise ValueError(f"step outside [0, {clf.T}]")
    p = forward_mlp(clf.net, clf.inputs(xb, t))
    return p[0] if single else p


def features(clf: TimeAwareClassifier, x, t=0) -> np.ndarray:
    """Penultimate-layer activation (the feature extractor output)."""
    xb, single = _batch(x)
    _, h = forward_mlp(clf.net, clf.inputs(xb, t), return_hidden=True)
    return h[0] if single else h


def classifier_graph(clf: TimeAwareClassifier, tape: ad.Tape, x, t, params=None):
    """Record the classifier on ``x`` (array or node); returns (logits, features, params)."""
    if params is None:
        params = leaves(tape, clf.net)
    if isinstance(x, ad.Node):
        ts = np.broadcast_to(np.asarray(t), (x.value.shape[0],))
        inp = ad.concat([x, tape.constant(time_embedding(ts, clf.T, clf.emb_dim))], axis=1)
    else:
        inp = tape.constant(clf.inputs(np.asarray(x, dtype=np.float64), t))
    logits, feats = mlp_graph(params, inp, clf.net.activation)
    return logits, feats, params


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("entropy expects a single probability vector")
    return float(entropies(p[None, :])[0])


def entropies(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors (nonnegative, summing to 1 within 1e-6)")
    logs = np.log(np.where(P > 0, P, 1.0))
    return np.maximum(-(P * logs).sum(axis=1), 0.0)


@dataclass(frozen=True)
class SelectionRule:
    """Keep the lowest-entropy fraction ``value`` (quantile) or all with entropy <= ``value`` (threshold)."""

    kind: str = "quantile"
    value: float = 0.3
    min_per_class: int = 1

    def __post_init__(self):
        if self.kind not in ("quantile", "threshold"):
            raise ValueError(f"unknown selection rule {self.kind!r}")
        if self.kind == "quantile" and not 0.0 <= self.value <= 1.0:
            raise ValueError("quantile fraction must lie in [0, 1]")
        if self.min_per_class < 0:
            raise ValueError("min_per_class must be >= 0")


@dataclass
class PseudoLabeledSet:
    indices: np.ndarray          # positions in the target pool, ascending entropy
    X: np.ndarray
    labels: np.ndarray
    entropy: np.ndarray
    rule: SelectionRule
    cutoff: float
    forced: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    pool_labels: np.ndarray | None = None
    pool_entropy: np.ndarray | None = None
    empty_warning: bool = False

    def __len__(self) -> int:
        return len(self.indices)

    def census(self, C: int) -> list[int]:
        return np.bincount(self.labels, minlength=C).tolist() if len(self) else [0] * C

    def class_subset(self, c: int) -> np.ndarray:
        return self.X[self.labels == c]

    def samples(self):
        from .data import LabeledSample
        return [LabeledSample(tuple(x), int(y), "target", float(e))
                for x, y, e in zip(self.X, self.labels, self.entropy)]


def select_hcpl(clf: TimeAwareClassifier, target_pool, rule: SelectionRule | None = None) -> PseudoLabeledSet:
    """Select high-confidence pseudo-labelled target samples by prediction entropy at t = 0.

    Ties in entropy are broken by pool index. When ``rule.min_per_class`` is
    positive, classes under quota are topped up with their own lowest-entropy
    samples; those are listed in ``forced``.
    """
    rule = rule or SelectionRule()
    pool = np.asarray(target_pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("target pool is empty")
    probs = predict(clf, pool, 0)
    ent = entropies(probs)
    labels = probs.argmax(axis=1)
    order = np.argsort(ent, kind="stable")
    n = len(pool)
    if rule.kind == "quantile":
        k = int(np.floor(rule.value * n + 1e-9))
        chosen = list(order[:k])
    else:
        chosen = [i for i in order if ent[i] <= rule.value]
    chosen_set = set(chosen)
    forced = []
    if rule.min_per_class and chosen:
        for c in range(clf.C):
            have = sum(1 for i in chosen if labels[i] == c)
            for i in order:
                if have >= rule.min_per_class:
                    break
                if labels[i] == c and i not in chosen_set:
                    chosen_set.add(i)
                    forced.append(i)
                    have += 1
    idx = np.array(sorted(chosen_set, key=lambda i: (ent[i], i)), dtype=int)
    empty = len(idx) == 0
    if empty:
        warnings.warn("selection rule kept no target samples", EmptySelectionWarning, stacklevel=2)
    cutoff = float(ent[idx].max()) if len(idx) else float("-inf")
    return PseudoLabeledSet(idx, pool[idx], labels[idx], ent[idx], rule, cutoff,
                            np.array(forced, dtype=int), labels, ent, empty)


def export_hcpl_csv(hcpl: PseudoLabeledSet, pool, path) -> None:
    pool = np.asarray(pool, dtype=np.float64)
    selected = np.zeros(len(pool), dtype=bool)
    selected[hcpl.indices] = True
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(pool.shape[1])] + ["pseudo_label", "entropy", "selected"])
        for i, x in enumerate(pool):
            w.writerow([repr(float(v)) for v in x]
                       + [int(hcpl.pool_labels[i]), repr(float(hcpl.pool_entropy[i])), int(selected[i])])


def _term_loss(logits: ad.Node, y: np.ndarray, C: int, mode: str) -> ad.Node:
    onehot = np.eye(C)[y]
    n = len(y)
    if mode == "ce":
        return ad.mul(ad.total(ad.mul(ad.log_softmax(logits), onehot)), -1.0 / n)
    if mode == "mse":
        return ad.mul(ad.total(ad.square(ad.sub(ad.softmax(logits), onehot))), 1.0 / n)
    raise ValueError(f"unknown loss mode {mode!r}")


TERMS = ("clean_source", "clean_hcpl", "noised_source", "noised_hcpl")
TERM_SETS = {"all": TERMS, "clean": TERMS[:2], "noised": TERMS[2:]}


def unified_loss(clf: TimeAwareClassifier, tape: ad.Tape, xs, ys, xh, yh, t: int, zs, zh,
                 sched: NoiseSchedule, mode: str = "ce", terms=TERMS):
    """Sum of the clean (t = 0) and noised (shared t) classification terms.

    Returns (total loss node, {term: node}, param leaves). hcpl terms are
    dropped when ``xh`` is empty.
    """
    params = leaves(tape, clf.net)
    parts = {}
    ts_s = np.full(len(xs), t)
    if "clean_source" in terms:
        parts["clean_source"] = _term_loss(classifier_graph(clf, tape, xs, 0, params)[0], ys, clf.C, mode)
    if "noised_source" in terms:
        xs_t = forward_diffuse_batch(xs, ts_s, zs, sched)
        parts["noised_source"] = _term_loss(classifier_graph(clf, tape, xs_t, t, params)[0], ys, clf.C, mode)
    if len(xh):
        if "clean_hcpl" in terms:
            parts["clean_hcpl"] = _term_loss(classifier_graph(clf, tape, xh, 0, params)[0], yh, clf.C, mode)
        if "noised_hcpl" in terms:
            xh_t = forward_diffuse_batch(xh, np.full(len(xh), t), zh, sched)
            parts["noised_hcpl"] = _term_loss(classifier_graph(clf, tape, xh_t, t, params)[0], yh, clf.C, mode)
    loss = None
    for node in parts.values():
        loss = node if loss is None else ad.add(loss, node)
    return loss, parts, params


def train_unified(clf: TimeAwareClassifier, source, hcpl, sched: NoiseSchedule, epochs: int, batch: int,
                  lr: float, rng: np.random.Generator, momentum: float = 0.5, mode: str = "ce",
                  terms: str = "all") -> tuple[TimeAwareClassifier, list[float]]:
    """Train on clean and forward-diffused source and hcpl samples with one shared t per batch.

    ``source`` is an (X, y) pair; ``hcpl`` is a :class:`PseudoLabeledSet`, an
    (X, y) pair, or None. ``terms`` picks "all" four terms, only the "clean"
    (t = 0) pair, or only the "noised" pair.
    """
    Xs, ys = np.asarray(source[0], dtype=np.float64), np.asarray(source[1], dtype=int)
    if len(Xs) == 0:
        raise ValueError("source set is empty")
    if hcpl is None:
        Xh, yh = np.zeros((0, Xs.shape[1])), np.zeros(0, dtype=int)
    elif isinstance(hcpl, PseudoLabeledSet):
        Xh, yh = hcpl.X, hcpl.labels
    else:
        Xh, yh = np.asarray(hcpl[0], dtype=np.float64), np.asarray(hcpl[1], dtype=int)
    use = TERM_SETS[terms]
    opt = SGD(clf.net, lr, momentum)
    trace: list[float] = []
    n = len(Xs)
    for _ in range(epochs):
        order = rng.permutation(n)
        h_order = rng.permutation(len(Xh)) if len(Xh) else order[:0]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch)):
            idx = order[start:start + batch]
            # hcpl batches cycle through a shuffled hcpl order, matching the source batch size
            hidx = h_order[(np.arange(len(idx)) + b * batch) % len(Xh)] if len(Xh) else h_order
            t = int(rng.integers(1, sched.T + 1))
            zs = rng.standard_normal((len(idx), Xs.shape[1]))
            zh = rng.standard_normal((len(hidx), Xs.shape[1]))
            tape = ad.Tape()
            loss, _, params = unified_loss(clf, tape, Xs[idx], ys[idx], Xh[hidx], yh[hidx], t, zs, zh,
                                           sched, mode, use)
            value = float(loss.value)
            if not np.isfinite(value):
                trace.append(value)
                raise DivergenceError("unified classifier training diverged", trace)
            opt.step(tape.backward(loss, params))
            total += value
            count += 1
        trace.append(total / count)
    return clf, trace


def train_supervised(clf: TimeAwareClassifier, X, y, epochs: int, batch: int, lr: float,
                     rng: np.random.Generator, momentum: float = 0.5, weights=None) -> list[float]:
    """Plain cross-entropy training at t = 0 (source pretraining and fine-tuning)."""
    X, y = np.asarray(X, dtype=np.float64), np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ValueError("training set is empty")
    opt = SGD(clf.net, lr, momentum)
    trace = []
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            tape = ad.Tape()
            logits, _, params = classifier_graph(clf, tape, X[idx], 0)
            loss = _term_loss(logits, y[idx], clf.C, "ce")
            value = float(loss.value)
            if not np.isfinite(value):
                trace.append(value)
                raise DivergenceError("supervised training diverged", trace)
            opt.step(tape.backward(loss, params))
            total += value
            count += 1
        trace.append(total / count)
    return trace


def log_prob_input_grad(clf: TimeAwareClassifier, x, t, y, return_clamped: bool = False):
    """Gradient of log p(y | x, t) with respect to x, for one sample or a batch.

    Log-probabilities below log(1e-12) are clamped there (zero gradient) and
    reported through :class:`LogProbClampWarning` or ``return_clamped``.
    """
    xb, single = _batch(x)
    if np.any(np.asarray(y) >= clf.C) or np.any(np.asarray(y) < 0):
        raise ValueError(f"class index outside [0, {clf.C})")
    y = np.broadcast_to(np.asarray(y, dtype=int), (xb.shape[0],))
    tape = ad.Tape()
    xn = tape.leaf(xb, "input")
    logits, _, _ = classifier_graph(clf, tape, xn, t)
    logp = ad.log_softmax(logits)
    picked = ad.row_sum(ad.mul(logp, np.eye(clf.C)[y]))
    clamped = picked.value < LOG_PROB_FLOOR
    if clamped.any():
        warnings.warn("log-probability clamped at log(1e-12)", LogProbClampWarning, stacklevel=2)
    loss = ad.total(ad.clamp_min(picked, LOG_PROB_FLOOR))
    (g,) = tape.backward(loss, [xn])
    g = g[0] if single else g
    if return_clamped:
        return g, (clamped[0] if single else clamped)
    return g
