"""Conditional adversarial alignment on multilinear (feature x prediction) maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classifier import TimeAwareClassifier, _term_loss, classifier_graph
from .mlp import SGD, DimensionError, MlpParams, forward_mlp, init_mlp, leaves, mlp_graph


@dataclass
class DomainDiscriminator:
    net: MlpParams
    d_f: int
    C: int

    def __post_init__(self):
        if self.net.in_dim != self.d_f * self.C:
            raise DimensionError(f"discriminator input {self.net.in_dim} != d_f * C = {self.d_f * self.C}")
        if self.net.out_dim != 1:
            raise DimensionError("discriminator must emit a single logit")

    def logits(self, joint) -> np.ndarray:
        return forward_mlp(self.net, np.atleast_2d(joint))[:, 0]

    def prob_source(self, joint) -> np.ndarray:
        return ad.sigmoid_array(self.logits(joint))


def make_discriminator(d_f: int, C: int, rng: np.random.Generator, hidden=(32,),
                       activation: str = "relu", zero_last: bool = False) -> DomainDiscriminator:
    net = init_mlp([d_f * C, *hidden, 1], rng, activation, "identity", zero_last=zero_last)
    return DomainDiscriminator(net, d_f, C)


def multilinear_map(f, y) -> np.ndarray:
    """Outer product f y^T flattened row-major; also accepts row batches."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.ndim == 1 and y.ndim == 1:
        return np.outer(f, y).ravel()
    if f.ndim != 2 or y.ndim != 2 or f.shape[0] != y.shape[0]:
        raise DimensionError(f"incompatible shapes {f.shape} and {y.shape}")
    return (f[:, :, None] * y[:, None, :]).reshape(f.shape[0], -1)


def joint_representation(clf: TimeAwareClassifier, X) -> np.ndarray:
    """Multilinear map of penultimate features and t = 0 predictions."""
    probs, feats = forward_mlp(clf.net, clf.inputs(np.asarray(X, dtype=np.float64), 0), return_hidden=True)
    return multilinear_map(feats, probs)


def discrimination_loss(d_logits_s: ad.Node, d_logits_t: ad.Node) -> ad.Node:
    """-(mean log D(source) + mean log(1 - D(target))) with D = sigmoid(logit)."""
    return ad.add(ad.mean(ad.softplus(ad.neg(d_logits_s))), ad.mean(ad.softplus(d_logits_t)))


def _disc_logits(disc_params, joint: ad.Node, activation: str) -> ad.Node:
    out, _ = mlp_graph(disc_params, joint, activation)
    return out


@dataclass
class RoundLosses:
    sup_loss: float
    d_loss: float
    g_adv_loss: float


def adversarial_round(clf: TimeAwareClassifier, disc: DomainDiscriminator, source_batch, target_batch,
                      lr_G: float, lr_D: float, adv_weight: float = 1.0, momentum: float = 0.5,
                      opt_G: SGD | None = None, opt_D: SGD | None = None) -> RoundLosses:
    """One discriminator step on detached joints, then one classifier step.

    The classifier minimizes source cross-entropy minus ``adv_weight`` times
    the discrimination loss, i.e. it ascends the loss the discriminator descends.
    """
    xs, ys = np.asarray(source_batch[0], dtype=np.float64), np.asarray(source_batch[1], dtype=int)
    xt = np.asarray(target_batch, dtype=np.float64)
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("both batches must be nonempty")
    opt_G = opt_G or SGD(clf.net, lr_G, momentum)
    opt_D = opt_D or SGD(disc.net, lr_D, momentum)

    tape = ad.Tape()
    dparams = leaves(tape, disc.net)
    js = tape.constant(joint_representation(clf, xs))
    jt = tape.constant(joint_representation(clf, xt))
    d_loss = discrimination_loss(_disc_logits(dparams, js, disc.net.activation),
                                 _disc_logits(dparams, jt, disc.net.activation))
    opt_D.step(tape.backward(d_loss, dparams))

    tape = ad.Tape()
    logits_s, feats_s, gparams = classifier_graph(clf, tape, xs, 0)
    logits_t, feats_t, _ = classifier_graph(clf, tape, xt, 0, gparams)
    frozen = [tape.constant(a) for a in disc.net.arrays()]
    joint_s = ad.outer_rows(feats_s, ad.softmax(logits_s))
    joint_t = ad.outer_rows(feats_t, ad.softmax(logits_t))
    adv = ad.neg(discrimination_loss(_disc_logits(frozen, joint_s, disc.net.activation),
                                     _disc_logits(frozen, joint_t, disc.net.activation)))
    sup = _term_loss(logits_s, ys, clf.C, "ce")
    g_loss = ad.add(sup, ad.mul(adv, adv_weight))
    opt_G.step(tape.backward(g_loss, gparams))
    return RoundLosses(float(sup.value), float(d_loss.value), float(adv.value))


def domain_confusion_score(disc: DomainDiscriminator, source_joint, target_joint) -> float:
    """Balanced accuracy of thresholded D (source iff D > 0.5); 0.5 means full confusion."""
    source_joint, target_joint = np.atleast_2d(source_joint), np.atleast_2d(target_joint)
    if len(source_joint) == 0 or len(target_joint) == 0:
        raise ValueError("both sets must be nonempty")
    tpr = float(np.mean(disc.logits(source_joint) > 0))
    tnr = float(np.mean(disc.logits(target_joint) <= 0))
    return 0.5 * (tpr + tnr)


def train_discriminator(disc: DomainDiscriminator, source_joint, target_joint, epochs: int, batch: int,
                        lr: float, rng: np.random.Generator, momentum: float = 0.5) -> list[float]:
    opt = SGD(disc.net, lr, momentum)
    n = min(len(source_joint), len(target_joint))
    trace = []
    for _ in range(epochs):
        ps, pt = rng.permutation(len(source_joint))[:n], rng.permutation(len(target_joint))[:n]
        losses = []
        for start in range(0, n, batch):
            tape = ad.Tape()
            params = leaves(tape, disc.net)
            js = tape.constant(source_joint[ps[start:start + batch]])
            jt = tape.constant(target_joint[pt[start:start + batch]])
            loss = discrimination_loss(_disc_logits(params, js, disc.net.activation),
                                       _disc_logits(params, jt, disc.net.activation))
            opt.step(tape.backward(loss, params))
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    return trace


def domain_probe(clf: TimeAwareClassifier, Xs, Xt, rng: np.random.Generator, hidden=(32,),
                 epochs: int = 100, batch: int = 32, lr: float = 0.05) -> float:
    """Held-out accuracy of a fresh discriminator trained on half of each domain's joints."""
    js, jt = joint_representation(clf, Xs), joint_representation(clf, Xt)
    ps, pt = rng.permutation(len(js)), rng.permutation(len(jt))
    hs, ht = len(js) // 2, len(jt) // 2
    probe = make_discriminator(clf.net.layers[-1][0].shape[1], clf.C, rng, hidden)
    train_discriminator(probe, js[ps[:hs]], jt[pt[:ht]], epochs, batch, lr, rng)
    return domain_confusion_score(probe, js[ps[hs:]], jt[pt[ht:]])


@dataclass
class AlignmentLog:
    rows: list[dict] = field(default_factory=list)
    saturated: bool = False

    def to_csv(self, path) -> None:
        cols = ["round", "sup_loss", "d_loss", "g_adv_loss", "confusion_score"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})


def align(clf: TimeAwareClassifier, disc: DomainDiscriminator, source, target_X, rounds: int, batch: int,
          lr_G: float, lr_D: float, rng: np.random.Generator, adv_weight: float = 1.0,
          momentum: float = 0.5) -> AlignmentLog:
    """Run ``rounds`` alternating updates on random minibatches of both domains."""
    Xs, ys = np.asarray(source[0], dtype=np.float64), np.asarray(source[1], dtype=int)
    Xt = np.asarray(target_X, dtype=np.float64)
    opt_G, opt_D = SGD(clf.net, lr_G, momentum), SGD(disc.net, lr_D, momentum)
    log = AlignmentLog()
    low_streak = 0
    for r in range(rounds):
        si = rng.choice(len(Xs), size=min(batch, len(Xs)), replace=False)
        ti = rng.choice(len(Xt), size=min(batch, len(Xt)), replace=False)
        losses = adversarial_round(clf, disc, (Xs[si], ys[si]), Xt[ti], lr_G, lr_D, adv_weight,
                                   momentum, opt_G, opt_D)
        low_streak = low_streak + 1 if losses.d_loss < 1e-6 else 0
        if low_streak >= 10:
            log.saturated = True
        score = domain_confusion_score(disc, joint_representation(clf, Xs[si]), joint_representation(clf, Xt[ti]))
        log.rows.append({"round": r, "sup_loss": losses.sup_loss, "d_loss": losses.d_loss,
                         "g_adv_loss": losses.g_adv_loss, "confusion_score": score})
    return log
