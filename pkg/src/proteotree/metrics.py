"""Structural and error metrics for fitted models.

Label-based metrics compare the sampled assignment vector against reference
labels (ground truth or annotation indices); protein indices are anchored to
reference labels by the annotation-seeded initialization, so latent protein
k is counted as identified when the majority label of its members equals k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

__all__ = [
    "MetricsReport",
    "consensus_labels",
    "identity",
    "confusion",
    "stability",
    "unique_fraction",
    "covariance_errors",
    "missing_errors",
    "max_absolute_bias",
    "lda_auc",
    "detect_effects",
]


@dataclass
class MetricsReport:
    identity: float = float("nan")
    confusion: float = float("nan")
    stability: float = float("nan")
    unique: float = float("nan")
    nf_summary: tuple[float, float, float] = (float("nan"),) * 3
    cov_errors: tuple[float, float, float] = (float("nan"),) * 3
    missing_errors: tuple[float, float, float] = (float("nan"),) * 3
    auc_per_protein: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    detected_effects: list[int] = field(default_factory=list)

    def validate(self):
        for name in ("identity", "confusion", "stability", "unique"):
            val = getattr(self, name)
            if np.isfinite(val) and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for triple in (self.cov_errors, self.missing_errors):
            if any(np.isfinite(v) and v < 0 for v in triple):
                raise ValueError("error measures must be nonnegative")
        return self


def consensus_labels(u, truth, n_proteins: int) -> np.ndarray:
    """Majority reference label per latent protein; 0 marks empty proteins.

    Ties resolve to the smallest label so repeated calls are deterministic.
    """
    u = np.asarray(u, dtype=int)
    truth = np.asarray(truth, dtype=int)
    out = np.zeros(n_proteins, dtype=int)
    for k in range(1, n_proteins + 1):
        members = truth[u == k]
        if members.size == 0:
            continue
        values, counts = np.unique(members, return_counts=True)
        out[k - 1] = values[np.argmax(counts)]
    return out


def identity(u, truth, n_proteins: int) -> float:
    """Fraction of nonempty latent proteins whose consensus label is their own."""
    cons = consensus_labels(u, truth, n_proteins)
    nonempty = cons > 0
    if not nonempty.any():
        return float("nan")
    indices = np.arange(1, n_proteins + 1)
    return float(np.mean(cons[nonempty] == indices[nonempty]))


def confusion(u, truth, n_proteins: int) -> float:
    """Fraction of IGs whose reference label disagrees with the consensus of
    their assigned protein."""
    u = np.asarray(u, dtype=int)
    truth = np.asarray(truth, dtype=int)
    cons = consensus_labels(u, truth, n_proteins)
    return float(np.mean(truth != cons[u - 1]))


def stability(u_trace, threshold: float = 0.6) -> float:
    """Fraction of IGs keeping a single label in at least ``threshold`` of
    the post-burn-in draws."""
    trace = np.asarray(u_trace, dtype=int)
    if trace.ndim != 2 or trace.shape[0] == 0:
        raise ValueError("u_trace must be a nonempty draws x IGs matrix")
    n_draws, p = trace.shape
    stable = 0
    for i in range(p):
        _, counts = np.unique(trace[:, i], return_counts=True)
        if counts.max() / n_draws >= threshold:
            stable += 1
    return stable / p


def unique_fraction(consensus: np.ndarray) -> float:
    """Distinct nonempty consensus labels over the number of latent proteins."""
    consensus = np.asarray(consensus, dtype=int)
    labels = consensus[consensus > 0]
    return float(np.unique(labels).size / consensus.size)


def _error_triple(diff: np.ndarray) -> tuple[float, float, float]:
    return (float(np.mean(diff ** 2)), float(np.mean(np.abs(diff))),
            float(np.max(np.abs(diff))) if diff.size else 0.0)


def covariance_errors(estimated, truth) -> tuple[float, float, float]:
    """(mse, mae, mab) over the upper triangle including the diagonal.

    The single-run mab is the largest absolute entry deviation; for the
    across-replicate variant see max_absolute_bias.
    """
    estimated = np.asarray(estimated, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimated.shape != truth.shape or estimated.ndim != 2:
        raise ValueError("covariance matrices must share a square shape")
    iu = np.triu_indices(truth.shape[0])
    return _error_triple(estimated[iu] - truth[iu])


def missing_errors(imputed, truth) -> tuple[float, float, float]:
    """(mse, mae, mab) over the held-out missing cells."""
    imputed = np.asarray(imputed, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if imputed.shape != truth.shape:
        raise ValueError("imputed and truth must align")
    if imputed.size == 0:
        return (0.0, 0.0, 0.0)
    return _error_triple(imputed - truth)


def max_absolute_bias(deviations) -> float:
    """Across-replicate maximum absolute bias: per-entry deviations averaged
    over replicates first, then maxed over entries."""
    stack = np.asarray(deviations, dtype=float)
    if stack.ndim == 1:
        stack = stack[None, :]
    return float(np.max(np.abs(stack.mean(axis=0))))


def _mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the normalized Mann-Whitney statistic with tie correction."""
    ranks = stats.rankdata(scores)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    u_stat = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u_stat / (n1 * n0))


def _loo_lda_scores(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Leave-one-out univariate linear discriminant scores.

    For each held-out sample the two class means and pooled variance are
    refit on the rest; the score is the log-ratio discriminant value, with
    class priors from the training fold.
    """
    n = x.size
    scores = np.empty(n)
    sum1 = x[y == 1].sum()
    sum0 = x[y == 0].sum()
    n1 = int((y == 1).sum())
    n0 = n - n1
    sq = float(x @ x)
    for i in range(n):
        if y[i] == 1:
            m1 = (sum1 - x[i]) / (n1 - 1)
            m0 = sum0 / n0
            k1, k0 = n1 - 1, n0
        else:
            m1 = sum1 / n1
            m0 = (sum0 - x[i]) / (n0 - 1)
            k1, k0 = n1, n0 - 1
        ssq = sq - x[i] ** 2
        pooled = (ssq - k1 * m1 ** 2 - k0 * m0 ** 2) / max(k1 + k0 - 2, 1)
        pooled = max(pooled, 1e-12)
        scores[i] = (x[i] * (m1 - m0) / pooled - (m1 ** 2 - m0 ** 2) / (2 * pooled)
                     + np.log(k1 / k0))
    return scores


def lda_auc(w_draws, class_labels, protein: int) -> tuple[float, float, float]:
    """Per-draw leave-one-out LDA AUC for one protein, summarized across
    draws as (median, lo90, hi90)."""
    labels = np.asarray(class_labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError("need exactly two classes")
    y = (labels == classes[1]).astype(int)
    if y.sum() < 2 or (y == 0).sum() < 2:
        raise ValueError("each class needs at least two samples")
    draws = np.asarray(w_draws, dtype=float)
    if draws.ndim == 3:
        draws = draws[:, protein - 1, :]
    aucs = np.array([_mann_whitney_auc(_loo_lda_scores(row, y), y) for row in draws])
    return (float(np.median(aucs)), float(np.quantile(aucs, 0.05)),
            float(np.quantile(aucs, 0.95)))


def detect_effects(w_mean, group_labels, level: float = 0.01) -> list[int]:
    """Bonferroni-corrected Welch t-tests per protein on the posterior-mean
    profiles; returns the 1-based indices of rejected proteins."""
    w_mean = np.atleast_2d(np.asarray(w_mean, dtype=float))
    labels = np.asarray(group_labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError("need exactly two groups")
    first = labels == classes[0]
    n_proteins = w_mean.shape[0]
    detected = []
    for k in range(n_proteins):
        res = stats.ttest_ind(w_mean[k, first], w_mean[k, ~first], equal_var=False)
        if res.pvalue < level / n_proteins:
            detected.append(k + 1)
    return detected
