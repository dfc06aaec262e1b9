"""Scoring protocol: latent matching, graph binarization, F1 and ROC.

Latent recovery is scored group by group: estimated coordinates are matched
to true coordinates within their group by maximizing absolute correlation
(optionally rank correlation), using an optimal assignment; the mean matched
correlation, pooled over every coordinate of every group, is the MCC score.

Graph recovery turns the estimated coupling matrix into a directed graph:
for every unordered inter-group coordinate pair the stronger direction wins
(ties go to the lower-group source), and the winner is kept when its
magnitude reaches a threshold expressed as a percentage of the largest
inter-group coupling anywhere in the estimate. F1 is then computed over
ordered inter-group entries against the true adjacency, after permuting the
estimate's coordinates with the latent assignment. Sweeping the threshold
from 0 to 100 gives a ROC curve; edge sets are nested along the sweep, so
both rates are non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .diffnet import UsageError


@dataclass
class AssignmentResult:
    perm: np.ndarray  # perm[i] = true coordinate matched to estimate i
    matched_corr: np.ndarray  # (D,) absolute correlation per estimate
    mcc: float  # pooled mean of matched_corr


def _group_slices(dims: list[int]) -> list[slice]:
    starts = np.cumsum([0] + list(dims))
    return [slice(int(starts[m]), int(starts[m + 1])) for m in range(len(dims))]


def _abs_corr(A: np.ndarray, B: np.ndarray, rank_corr: bool) -> np.ndarray:
    """Absolute correlation between columns of A and of B; columns with zero
    variance correlate 0 with everything."""
    if rank_corr:
        A = np.apply_along_axis(rankdata, 0, A)
        B = np.apply_along_axis(rankdata, 0, B)
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    sa = np.sqrt((A * A).sum(axis=0))
    sb = np.sqrt((B * B).sum(axis=0))
    num = A.T @ B
    denom = np.outer(sa, sb)
    out = np.zeros_like(num)
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return np.abs(out)


def assign(
    H: np.ndarray, S: np.ndarray, dims: list[int], rank_corr: bool = False
) -> AssignmentResult:
    """Match estimated latents to true latents within each group."""
    H = np.asarray(H, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if H.shape != S.shape or H.shape[1] != sum(dims):
        raise UsageError("latent matrices must share shape (n, sum(dims))")
    D = H.shape[1]
    perm = np.empty(D, dtype=np.int64)
    matched = np.empty(D)
    for sl in _group_slices(dims):
        corr = _abs_corr(H[:, sl], S[:, sl], rank_corr)
        rows, cols = linear_sum_assignment(1.0 - corr)
        perm[sl][rows] = cols + sl.start
        matched[sl][rows] = corr[rows, cols]
    return AssignmentResult(perm, matched, float(matched.mean()))


def _inter_mask(dims: list[int]) -> np.ndarray:
    D = sum(dims)
    group_of = np.repeat(np.arange(len(dims)), dims)
    return group_of[:, None] != group_of[None, :]


def binarize_graph(L: np.ndarray, dims: list[int], threshold_pct: float) -> np.ndarray:
    """Directed adjacency from a coupling estimate.

    Per unordered inter-group coordinate pair the direction with the larger
    magnitude wins (tie: the lower group is the source). The winner is kept
    when its magnitude is strictly positive and reaches threshold_pct
    percent of the scale of its group pair, where the scale pools the
    largest magnitude over both direction blocks of that group pair. An
    all-zero block yields no edges at any threshold.
    """
    L = np.asarray(L, dtype=np.float64)
    D = sum(dims)
    if L.shape != (D, D):
        raise UsageError("coupling matrix shape does not match dims")
    if not 0 <= threshold_pct <= 100:
        raise UsageError("threshold_pct must lie in [0, 100]")
    slices = _group_slices(dims)
    mags = np.abs(L)
    out = np.zeros((D, D), dtype=bool)
    for gm in range(len(dims)):
        for gm2 in range(gm + 1, len(dims)):
            sa, sb = slices[gm], slices[gm2]
            scale = max(mags[sa, sb].max(), mags[sb, sa].max())
            thr = (threshold_pct / 100.0) * scale
            for i in range(sa.start, sa.stop):
                for j in range(sb.start, sb.stop):
                    fwd, bwd = mags[i, j], mags[j, i]
                    win_ij = fwd >= bwd  # tie: lower group sources the edge
                    mag = fwd if win_ij else bwd
                    if mag > 0 and mag >= thr:
                        if win_ij:
                            out[i, j] = True
                        else:
                            out[j, i] = True
    return out


def align_graph(est: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Re-index an estimate into true coordinates: estimate coordinate i
    plays the role of true coordinate perm[i]."""
    out = np.zeros_like(est)
    p = np.asarray(perm)
    out[np.ix_(p, p)] = est
    return out


def _prf(est: np.ndarray, truth: np.ndarray, inter: np.ndarray):
    tp = int((est & truth & inter).sum())
    fp = int((est & ~truth & inter).sum())
    fn = int((~est & truth & inter).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_inter_group(
    est_bin: np.ndarray,
    true_adj: np.ndarray,
    dims: list[int],
    perm: np.ndarray | None = None,
    allow_transpose: bool = False,
) -> tuple[float, float, float]:
    """(precision, recall, F1) over ordered inter-group entries, after
    aligning the estimate's coordinates with perm. allow_transpose also
    scores the whole-graph transpose and reports whichever orientation has
    the better F1 (for settings where the global edge orientation is not
    identified)."""
    true_bin = np.asarray(true_adj) != 0
    D = true_bin.shape[0]
    if est_bin.shape != (D, D) or sum(dims) != D:
        raise UsageError("graph shapes do not match dims")
    est = np.asarray(est_bin, dtype=bool)
    if perm is not None:
        est = align_graph(est, perm)
    inter = _inter_mask(dims)
    best = _prf(est, true_bin, inter)
    if allow_transpose:
        flipped = _prf(est.T, true_bin, inter)
        if flipped[2] > best[2]:
            best = flipped
    return best


def roc_sweep(
    L: np.ndarray,
    true_adj: np.ndarray,
    dims: list[int],
    perm: np.ndarray | None = None,
    thresholds: np.ndarray | None = None,
) -> np.ndarray:
    """(threshold, FPR, TPR) rows over ordered inter-group entries; default
    thresholds run 0 to 100 in steps of 5."""
    if thresholds is None:
        thresholds = np.arange(0, 101, 5)
    true_bin = np.asarray(true_adj) != 0
    inter = _inter_mask(dims)
    pos = int((true_bin & inter).sum())
    neg = int((~true_bin & inter).sum())
    rows = []
    for t in thresholds:
        est = binarize_graph(L, dims, float(t))
        if perm is not None:
            est = align_graph(est, perm)
        tp = int((est & true_bin & inter).sum())
        fp = int((est & ~true_bin & inter).sum())
        rows.append((float(t), fp / neg if neg else 0.0, tp / pos if pos else 0.0))
    return np.asarray(rows)
