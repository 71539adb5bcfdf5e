"""Statistical margins, exact conditional W1 distances and the margin-gap bound.

The margin infimum is taken over an explicit finite candidate set. The
triangle-inequality argument behind the bound holds for any fixed candidate
set shared by both distributions, so the check is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import nn
from .errors import InputError, MarginUndefinedError, UnsupportedInstanceError


@dataclass(frozen=True)
class EmpiricalDist:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.shape[0] < 1 or lab.shape != (pts.shape[0],):
            raise InputError("EmpiricalDist needs n >= 1 points with one label each")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def class_sizes(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def translated(self, shift) -> "EmpiricalDist":
        return EmpiricalDist(self.points + np.asarray(shift, dtype=np.float64), self.labels)


@dataclass
class MarginReport:
    margin: float
    per_sample: np.ndarray
    violating_counts: dict = field(default_factory=dict)

    @property
    def violating_set_size(self) -> int:
        return int(sum(self.violating_counts.values()))


def pairwise(a, b, metric="euclidean") -> np.ndarray:
    if callable(metric):
        return np.asarray(metric(a, b), dtype=np.float64)
    if metric != "euclidean":
        raise InputError(f"unsupported metric {metric!r}")
    return cdist(a, b)


def statistical_margin(classifier, dist: EmpiricalDist, candidates, metric="euclidean") -> MarginReport:
    """Mean over samples of the distance to the nearest candidate that the
    classifier labels differently from the sample's own label."""
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    predicted = np.asarray(classifier(cand))
    present = np.unique(dist.labels)
    counts = {int(y): int((predicted != y).sum()) for y in present}
    missing = [y for y, c in counts.items() if c == 0]
    if missing:
        raise MarginUndefinedError(missing)
    d = pairwise(dist.points, cand, metric)
    violating = predicted[None, :] != dist.labels[:, None]
    per_sample = np.where(violating, d, np.inf).min(axis=1)
    return MarginReport(float(per_sample.mean()), per_sample, counts)


def _check_matched(p: EmpiricalDist, q: EmpiricalDist, max_support):
    sp, sq = p.class_sizes(), q.class_sizes()
    if set(sp) != set(sq):
        raise UnsupportedInstanceError(f"label sets differ: {sorted(sp)} vs {sorted(sq)}")
    for y in sp:
        if sp[y] != sq[y]:
            raise UnsupportedInstanceError(f"class {y} has {sp[y]} vs {sq[y]} support points")
        if max_support is not None and sp[y] > max_support:
            raise UnsupportedInstanceError(f"class {y} support {sp[y]} exceeds exact-solver limit {max_support}")
    return sp


def exact_w1(a, b, metric="euclidean") -> float:
    """W1 between two equal-size uniform point clouds via optimal assignment."""
    cost = pairwise(np.atleast_2d(a), np.atleast_2d(b), metric)
    if cost.shape[0] != cost.shape[1]:
        raise UnsupportedInstanceError("exact W1 needs equal support sizes")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def conditional_wasserstein(p: EmpiricalDist, q: EmpiricalDist, metric="euclidean", max_support=10) -> float:
    """Label-wise W1 averaged over the shared label marginal."""
    sizes = _check_matched(p, q, max_support)
    n = sum(sizes.values())
    total = 0.0
    for y, count in sizes.items():
        total += count / n * exact_w1(p.points[p.labels == y], q.points[q.labels == y], metric)
    return total


@dataclass
class Lemma1Report:
    lhs: float
    rhs: float
    holds: bool
    margin_p: float
    margin_v: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def lemma1_check(classifier, p: EmpiricalDist, q: EmpiricalDist, candidates, metric="euclidean",
                 tol=1e-9) -> Lemma1Report:
    """|SM(p) - SM(q)| <= E_y W1(p|y, q|y), both margins over the same candidates."""
    mp = statistical_margin(classifier, p, candidates, metric).margin
    mq = statistical_margin(classifier, q, candidates, metric).margin
    rhs = conditional_wasserstein(p, q, metric)
    lhs = abs(mp - mq)
    return Lemma1Report(lhs, rhs, lhs <= rhs + tol, mp, mq)


class LinearClassifier:
    """argmax(x @ W + b); picklable and printable for replaying failures."""

    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def __call__(self, x):
        return (np.atleast_2d(x) @ self.weights + self.bias).argmax(axis=1)


@dataclass
class LemmaInstance:
    classifier: LinearClassifier
    p: EmpiricalDist
    q: EmpiricalDist
    candidates: np.ndarray

    def to_dict(self) -> dict:
        return {
            "weights": self.classifier.weights.tolist(),
            "bias": self.classifier.bias.tolist(),
            "p_points": self.p.points.tolist(),
            "p_labels": self.p.labels.tolist(),
            "q_points": self.q.points.tolist(),
            "q_labels": self.q.labels.tolist(),
            "candidates": self.candidates.tolist(),
        }


def random_lemma_instance(rng: np.random.Generator, max_classes=4, max_per_class=6, dim=None) -> LemmaInstance:
    """2..max_classes classes, 1..max_per_class points per class, random linear
    classifier, candidates = both supports plus uniform extras until every
    label has at least one differently-classified candidate."""
    k = int(rng.integers(2, max_classes + 1))
    d = int(rng.integers(1, 4)) if dim is None else dim
    sizes = rng.integers(1, max_per_class + 1, size=k)
    labels = np.repeat(np.arange(k), sizes)
    centers = rng.normal(0.0, 2.0, size=(k, d))
    p_pts = centers[labels] + rng.normal(size=(labels.size, d))
    shift = rng.normal(0.0, rng.uniform(0.0, 2.0), size=(k, d))
    q_pts = centers[labels] + shift[labels] + rng.normal(size=(labels.size, d))
    clf = LinearClassifier(rng.normal(size=(d, k)), rng.normal(size=k))
    cand = np.vstack([p_pts, q_pts])
    # one class can own the whole sampling box, so the box doubles on every retry
    scale = 6.0
    while not all((clf(cand) != y).any() for y in range(k)):
        cand = np.vstack([cand, rng.uniform(-scale, scale, size=(4, d))])
        scale *= 2.0
    return LemmaInstance(clf, EmpiricalDist(p_pts, labels), EmpiricalDist(q_pts, labels), cand)


def export_features(spec: nn.MlpSpec, params: nn.ModelParams, features, labels, layer, sink,
                    client_ids=None, is_virtual=None) -> int:
    """Write one CSV row per sample of the hidden features at ``layer``.

    Header is ``client,label,is_virtual,f0..f{d-1}``; returns rows written.
    """
    idx = spec.resolve_layer(layer)
    width = spec.layer_widths[idx + 1]
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["client", "label", "is_virtual"] + [f"f{j}" for j in range(width)])
    x = np.asarray(features, dtype=np.float64)
    n = 0 if x.size == 0 else x.shape[0]
    if n == 0:
        return 0
    feats = nn.forward(spec, params, x).features[idx]
    labels = np.asarray(labels)
    clients = [""] * n if client_ids is None else ["" if c is None or c < 0 else int(c) for c in client_ids]
    virt = np.zeros(n, dtype=bool) if is_virtual is None else np.asarray(is_virtual, dtype=bool)
    for i in range(n):
        writer.writerow([clients[i], int(labels[i]), int(virt[i])] + [repr(float(v)) for v in feats[i]])
    return n
