"""Interpretability and evaluation statistics.

Covers attention-derived inter-network contribution profiles (with head
ranking by row concentration), group deltas, embedding-norm trajectories,
Welch's t-test (p-values computed in-package via the regularized
incomplete beta continued fraction), and 3-way classification metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import NetworkAtlas, ParcelTimeSeries, SegmentSpec, align_to_networks, \
    sample_segments, tokenize
from .model import AttnRecord, ModelState, embedding_summary
from .seeding import rng_for


# -- head ranking and contribution profiles -------------------------------


def rank_heads(records: list[AttnRecord]) -> list[tuple[int, int, float]]:
    """Order (layer, head) pairs by mean attention-row concentration.

    A row's concentration is the sum of its squared weights: 1/N_u for a
    uniform row, approaching 1 for a one-hot row. Pairs are returned as
    (layer, head, score), descending, ties broken by (layer, head).
    """
    if not records:
        raise ValueError("need at least one attention record")
    layers, heads = records[0].layers, records[0].heads
    sums = np.zeros((layers, heads))
    count = 0
    for rec in records:
        sums += (rec.weights ** 2).sum(axis=(2, 3)) / rec.weights.shape[2]
        count += 1
    scores = sums / count
    order = sorted(((l, h) for l in range(layers) for h in range(heads)),
                   key=lambda lh: (-scores[lh], lh))
    return [(l, h, float(scores[l, h])) for l, h in order]


@dataclass
class ContributionProfile:
    """Column-stochastic source -> target attention-mass matrix.

    matrix[i, j] is the share of cross-attention mass drawn from source
    network i while reconstructing target network j; each target column
    sums to 1 and the diagonal is 0 (the target itself is masked).
    """

    matrix: np.ndarray
    head_set: dict[int, list[tuple[int, int]]]
    sample_count: int


def contribution_profile(records_by_target: dict[int, list[AttnRecord]],
                         atlas: NetworkAtlas, top_k: int = 12) -> ContributionProfile:
    """Aggregate attention mass over the top-k most concentrated heads,
    grouped by the source network of each key token."""
    n = atlas.network_count
    matrix = np.zeros((n, n))
    head_set: dict[int, list[tuple[int, int]]] = {}
    samples = 0
    n_cols = atlas.padded_count // atlas.spatial_patch
    for target in range(n):
        records = records_by_target.get(target, [])
        if not records:
            raise ValueError(f"no attention records for target network {target}")
        total_heads = records[0].layers * records[0].heads
        if top_k > total_heads:
            raise ValueError(f"top_k={top_k} exceeds {total_heads} decoder heads")
        top = [(l, h) for l, h, _ in rank_heads(records)[:top_k]]
        head_set[target] = top
        acc = np.zeros(n)
        for rec in records:
            key_nets = atlas.column_network[
                (rec.plan.unmasked_indices % n_cols)]
            per_head = np.zeros(n)
            for l, h in top:
                mass = rec.weights[l, h].mean(axis=0)     # mean over queries
                per_head += np.bincount(key_nets, weights=mass, minlength=n)
            acc += per_head / len(top)
        samples += len(records)
        col = acc / len(records)
        total = col.sum()
        if total > 0:
            col = col / total
        matrix[:, target] = col
    return ContributionProfile(matrix, head_set, samples)


def contribution_delta(profile_a: ContributionProfile,
                       profile_b: ContributionProfile) -> np.ndarray:
    """Elementwise b - a (e.g. disease minus control)."""
    if profile_a.matrix.shape != profile_b.matrix.shape:
        raise ValueError("profiles have different network counts")
    return profile_b.matrix - profile_a.matrix


# -- embedding-norm progression marker ------------------------------------


def norm_trajectories(state: ModelState, recordings: list[ParcelTimeSeries],
                      atlas: NetworkAtlas, spec: SegmentSpec,
                      seed: int = 0) -> list[tuple[str, int, float | None, str, float]]:
    """Per-recording pooled-embedding norm rows, sorted by (subject, session).

    The norm is averaged over the recording's sampled segments.
    """
    rows = []
    for rec in recordings:
        if rec.values.shape[0] < spec.T:
            continue
        aligned = align_to_networks(rec.values, atlas)
        rng = rng_for(seed, "eval-segments", f"{rec.subject_id}/{rec.session_index}")
        norms = []
        for seg in sample_segments(aligned, spec, rng):
            grid = tokenize(seg, spec, atlas)
            _, nrm = embedding_summary(state, grid)
            norms.append(nrm)
        rows.append((rec.subject_id, rec.session_index, rec.age_years,
                     rec.label, float(np.mean(norms))))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


# -- Welch's t-test --------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to >= 1e-10."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability of Student's t."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


def welch_t(sample_a, sample_b) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test: (t, two-sided p, dof).

    dof follows Welch-Satterthwaite. Two zero-variance samples with
    equal means give t = 0, p = 1; with unequal means the statistic is
    infinite and p = 0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs n >= 2")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("samples must be finite")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    se2 = va / na + vb / nb
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0, float(na + nb - 2)
        return math.copysign(math.inf, diff), 0.0, float(na + nb - 2)
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return float(t), float(student_t_sf2(t, dof)), float(dof)


@dataclass
class GroupStats:
    """Pairwise Welch comparisons of per-group embedding norms."""

    groups: dict[str, tuple[float, float, int]]            # mean, sd, n
    pairwise: dict[tuple[str, str], tuple[float, float, float]]  # t, p, dof


def group_norm_stats(rows: list[tuple]) -> GroupStats:
    """Welch-compare embedding norms between every pair of labels."""
    by_label: dict[str, list[float]] = {}
    for _, _, _, label, norm in rows:
        by_label.setdefault(label, []).append(norm)
    groups = {}
    for label, vals in sorted(by_label.items()):
        arr = np.asarray(vals)
        groups[label] = (float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1
                         else 0.0, arr.size)
    pairwise = {}
    labels = sorted(by_label)
    for i, la in enumerate(labels):
        for lb in labels[i + 1:]:
            if len(by_label[la]) >= 2 and len(by_label[lb]) >= 2:
                t, p, dof = welch_t(by_label[la], by_label[lb])
                pairwise[(la, lb)] = (t, p, dof)
    return GroupStats(groups, pairwise)


# -- Pearson correlation ---------------------------------------------------


def pearson_r(x, y) -> float:
    """Plain Pearson correlation of two 1-d samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r expects equal-length 1-d samples")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise ValueError("zero variance sample")
    return float((xc * yc).sum() / denom)


# -- classification metrics ------------------------------------------------


@dataclass
class ClassificationReport:
    confusion: np.ndarray         # (3, 3), rows = true class
    balanced_accuracy: float
    macro_f1: float
    macro_auc: float
    flags: list[str]


def balanced_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall over the classes present in `labels`."""
    recalls = []
    for c in np.unique(labels):
        mask = labels == c
        recalls.append(float((predicted[mask] == c).mean()))
    return float(np.mean(recalls))


def _roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """One-vs-rest ROC area by trapezoid over score thresholds."""
    order = np.argsort(-scores, kind="stable")
    pos = positive[order].astype(np.float64)
    neg = 1.0 - pos
    n_pos, n_neg = pos.sum(), neg.sum()
    if n_pos == 0 or n_neg == 0:
        return math.nan
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    # collapse threshold ties to their last cumulative point
    distinct = np.flatnonzero(np.diff(scores[order]) != 0.0)
    idx = np.concatenate([distinct, [scores.size - 1]])
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    return float(np.trapezoid(tpr, fpr))


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> ClassificationReport:
    """Balanced accuracy, macro F1, and macro one-vs-rest AUC for 3 classes.

    `probs` is (n, 3) class scores; predictions are argmax rows. Metrics
    over absent classes are reported over the present ones and flagged.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ValueError("probs must be (n, 3)")
    predicted = probs.argmax(axis=1)
    confusion = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(labels, predicted):
        confusion[t, p] += 1
    flags = []
    present = np.unique(labels)
    if present.size < 3:
        flags.append(f"absent classes: {sorted(set(range(3)) - set(present))}")
    bacc = balanced_accuracy(predicted, labels)
    f1s = []
    for c in present:
        tp = float(confusion[c, c])
        fp = float(confusion[:, c].sum() - tp)
        fn = float(confusion[c].sum() - tp)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    aucs = []
    for c in present:
        auc = _roc_auc(probs[:, c], (labels == c))
        if not math.isnan(auc):
            aucs.append(auc)
    return ClassificationReport(confusion, float(bacc), float(np.mean(f1s)),
                                float(np.mean(aucs)) if aucs else math.nan, flags)
