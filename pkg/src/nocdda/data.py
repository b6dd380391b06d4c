"""Synthetic domain-shift datasets, held-out target labels, and CSV persistence."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons
from sklearn.model_selection import train_test_split

DOMAINS = ("source", "target", "generated")
SPLITS = ("train", "test")


class CsvFormatError(ValueError):
    pass


class HeldOutLabelError(PermissionError):
    """Target labels may only be read by evaluation."""


class EmptyDatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LabeledSample:
    features: tuple
    label: int | None
    domain: str
    entropy: float | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain in ("source", "generated") and self.label is None:
            raise ValueError(f"{self.domain} samples must carry a label")


class DomainSplit:
    """Feature matrix for one (domain, split) with its labels.

    For the target domain the labels are held out: ``y`` raises and only
    :func:`reveal_labels` (used by evaluation) returns them.
    """

    __slots__ = ("X", "domain", "split", "_labels")

    def __init__(self, X, labels, domain: str, split: str):
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.X = np.asarray(X, dtype=np.float64)
        self._labels = None if labels is None else np.asarray(labels, dtype=int)
        self.domain = domain
        self.split = split
        if domain != "target" and self._labels is None and len(self.X):
            raise ValueError(f"{domain} split requires labels")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def y(self) -> np.ndarray:
        if self.domain == "target":
            raise HeldOutLabelError("target labels are held out from training paths")
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def samples(self) -> list[LabeledSample]:
        labels = [None] * len(self) if self.domain == "target" or self._labels is None else self._labels
        return [LabeledSample(tuple(map(float, x)), None if l is None else int(l), self.domain)
                for x, l in zip(self.X, labels)]


def reveal_labels(split: DomainSplit) -> np.ndarray:
    """Ground-truth labels for evaluation; the one path to target labels."""
    if split._labels is None:
        raise HeldOutLabelError(f"{split.domain}/{split.split} has no stored labels")
    return split._labels


@dataclass
class DatasetBundle:
    source_train: DomainSplit
    source_test: DomainSplit
    target_train: DomainSplit
    target_test: DomainSplit
    C: int
    d: int
    shift: dict = field(default_factory=dict)
    generated: DomainSplit | None = None

    def splits(self) -> list[DomainSplit]:
        out = [self.source_train, self.source_test, self.target_train, self.target_test]
        return out + ([self.generated] if self.generated is not None else [])


def _split(X, y, seed: int):
    return train_test_split(X, y, test_size=0.2, stratify=y, random_state=seed)


def _bundle(Xs, ys, Xt, yt, C: int, shift: dict, seeds) -> DatasetBundle:
    Xs_tr, Xs_te, ys_tr, ys_te = _split(Xs, ys, seeds[0])
    Xt_tr, Xt_te, yt_tr, yt_te = _split(Xt, yt, seeds[1])
    return DatasetBundle(DomainSplit(Xs_tr, ys_tr, "source", "train"), DomainSplit(Xs_te, ys_te, "source", "test"),
                         DomainSplit(Xt_tr, yt_tr, "target", "train"), DomainSplit(Xt_te, yt_te, "target", "test"),
                         C, Xs.shape[1], shift)


def _child_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def rotate_about_centroid(X: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centroid = X.mean(axis=0)
    return (X - centroid) @ R.T + centroid


def gen_two_moons_shift(n_per_domain: int = 400, rotation_degrees: float = 30.0, noise_sd: float = 0.1,
                        seed: int = 0) -> DatasetBundle:
    """Standard two moons as source; an independent draw rotated about its centroid as target."""
    if n_per_domain < 4:
        raise ValueError("n_per_domain must be >= 4")
    if not 0 <= rotation_degrees < 180:
        raise ValueError("rotation must lie in [0, 180)")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    s = _child_seeds(seed, 4)
    Xs, ys = make_moons(n_per_domain, noise=noise_sd, random_state=s[0])
    Xt, yt = make_moons(n_per_domain, noise=noise_sd, random_state=s[1])
    Xt = rotate_about_centroid(Xt, rotation_degrees)
    shift = {"generator": "two-moons", "params": {"n_per_domain": n_per_domain,
             "rotation_degrees": rotation_degrees, "noise_sd": noise_sd}, "seed": seed}
    return _bundle(Xs, ys, Xt, yt, 2, shift, s[2:])


def blob_means(C: int, d: int) -> np.ndarray:
    """C means on a circle in the first two coordinates, adjacent ones 10 apart."""
    radius = 5.0 / np.sin(np.pi / C)
    angles = 2 * np.pi * np.arange(C) / C
    means = np.zeros((C, d))
    means[:, 0], means[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
    return means


def gen_gaussian_blobs_shift(C: int = 3, d: int = 2, translation=None, scale: float = 1.0, seed: int = 0,
                             n_per_class: int = 100) -> DatasetBundle:
    """Isotropic Gaussian clusters; the target shares them, translated by ``translation``."""
    if C < 2 or d < 2:
        raise ValueError("need C >= 2 and d >= 2")
    if scale <= 0 or n_per_class < 5:
        raise ValueError("scale must be positive and n_per_class >= 5")
    shift_vec = np.zeros(d) if translation is None else np.asarray(translation, dtype=np.float64)
    if shift_vec.shape != (d,):
        raise ValueError(f"translation must have length {d}")
    means = blob_means(C, d)
    s = _child_seeds(seed, 4)
    labels = np.repeat(np.arange(C), n_per_class)
    Xs = means[labels] + scale * np.random.default_rng(s[0]).standard_normal((len(labels), d))
    Xt = means[labels] + shift_vec + scale * np.random.default_rng(s[1]).standard_normal((len(labels), d))
    shift = {"generator": "blobs", "params": {"C": C, "d": d, "translation": shift_vec.tolist(),
             "scale": scale, "n_per_class": n_per_class}, "seed": seed}
    return _bundle(Xs, labels, Xt, labels.copy(), C, shift, s[2:])


def save_csv(bundle: DatasetBundle, path) -> None:
    """Write all splits to one CSV plus a JSON metadata sidecar next to it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(bundle.d)] + ["label", "domain", "split"])
        for part in bundle.splits():
            labels = part._labels
            for i, x in enumerate(part.X):
                label = "" if labels is None else int(labels[i])
                w.writerow([repr(float(v)) for v in x] + [label, part.domain, part.split])
    meta = {"generator": bundle.shift.get("generator"), "params": bundle.shift.get("params"),
            "seed": bundle.shift.get("seed"), "C": bundle.C, "d": bundle.d}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def save_samples_csv(X, labels, domain: str, path, split: str = "train") -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = X.shape[1] if X.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(d)] + ["label", "domain", "split"])
        for x, l in zip(X, labels):
            w.writerow([repr(float(v)) for v in x] + [int(l), domain, split])


def load_csv(path, schema: dict | None = None) -> DatasetBundle:
    """Read a bundle written by :func:`save_csv` (or any file with the same columns).

    ``schema`` may pin ``d`` and ``C``; otherwise the JSON sidecar, then the
    data, decide them.
    """
    path = Path(path)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    meta.update(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError(f"{path}: missing header")
        feats = [h for h in header if h.startswith("feature_")]
        if feats != [f"feature_{j}" for j in range(len(feats))] or not feats:
            raise CsvFormatError(f"{path}: feature columns must be feature_0..feature_(d-1)")
        for col in ("label", "domain", "split"):
            if col not in header:
                raise CsvFormatError(f"{path}: missing column {col!r}")
        d = len(feats)
        if "d" in meta and meta["d"] is not None and meta["d"] != d:
            raise CsvFormatError(f"{path}: file has {d} features but schema says {meta['d']}")
        fpos = [header.index(f) for f in feats]
        lpos, dpos, spos = header.index("label"), header.index("domain"), header.index("split")
        rows: dict[tuple[str, str], tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            domain, split = row[dpos], row[spos]
            if domain not in DOMAINS:
                raise CsvFormatError(f"{path}:{lineno}: unknown domain tag {domain!r}")
            if split not in SPLITS:
                raise CsvFormatError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                x = [float(row[p]) for p in fpos]
                label = int(row[lpos]) if row[lpos].strip() != "" else None
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(x)):
                raise CsvFormatError(f"{path}:{lineno}: non-finite feature value")
            if label is None and domain != "target":
                raise CsvFormatError(f"{path}:{lineno}: {domain} rows require a label")
            xs, ls = rows.setdefault((domain, split), ([], []))
            xs.append(x)
            ls.append(label)

    def part(domain, split):
        xs, ls = rows.get((domain, split), ([], []))
        X = np.asarray(xs, dtype=np.float64).reshape(len(xs), d)
        labels = None if any(l is None for l in ls) else np.asarray(ls, dtype=int)
        if domain != "target" and labels is None:
            labels = np.zeros(0, dtype=int)
        return DomainSplit(X, labels, domain, split)

    if not rows:
        warnings.warn(f"{path} holds no samples", EmptyDatasetWarning, stacklevel=2)
    all_labels = [l for _, ls in rows.values() for l in ls if l is not None]
    C = meta.get("C") or (max(all_labels) + 1 if all_labels else 0)
    gen = part("generated", "train") if ("generated", "train") in rows else None
    shift = {k: meta.get(k) for k in ("generator", "params", "seed")}
    return DatasetBundle(part("source", "train"), part("source", "test"), part("target", "train"),
                         part("target", "test"), int(C), d, shift, gen)
