"""Segmentation scores, rank tests and volume-agreement statistics."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AllZeroDifferences, BothEmpty, LengthMismatch, ShapeMismatch, ZeroBaseline

LOA_Z = 1.96
EXACT_MAX_N = 12


def _masks(pred, truth, region):
    pred = np.asarray(getattr(pred, "data", pred))
    truth = np.asarray(getattr(truth, "data", truth))
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    return pred == region, truth == region


def _sizes(pred, truth, region):
    y, t = _masks(pred, truth, region)
    ny, nt = int(y.sum()), int(t.sum())
    if ny + nt == 0:
        raise BothEmpty(f"region {region} is absent from both volumes")
    return y, t, ny, nt


def dsc(pred, truth, region):
    """Dice overlap ``2|Y & T| / (|Y| + |T|)`` for one label id."""
    y, t, ny, nt = _sizes(pred, truth, region)
    return 2.0 * int(np.count_nonzero(y & t)) / (ny + nt)


def vs(pred, truth, region):
    """Volumetric similarity ``1 - ||Y| - |T|| / (|Y| + |T|)``."""
    _, _, ny, nt = _sizes(pred, truth, region)
    return 1.0 - abs(ny - nt) / (ny + nt)


# --------------------------------------------------------------------------
# rank tests


class RankTestResult(NamedTuple):
    statistic: float
    pvalue: float
    exact: bool


def midranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    start = 0
    for end in range(1, len(values) + 1):
        if end == len(values) or sorted_vals[end] != sorted_vals[start]:
            ranks[order[start:end]] = 0.5 * (start + 1 + end)
            start = end
    return ranks


def _tie_term(values):
    _, counts = np.unique(values, return_counts=True)
    return float(((counts.astype(np.float64) ** 3) - counts).sum())


def _two_sided(dist, observed, tol=1e-9):
    lower = np.mean(dist <= observed + tol)
    upper = np.mean(dist >= observed - tol)
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(stat, mean, var):
    if var <= 0:
        return 1.0
    dev = max(abs(stat - mean) - 0.5, 0.0)
    return math.erfc(dev / math.sqrt(var) / math.sqrt(2.0))


def wilcoxon_signed_rank(x, y, exact=None):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped.  The statistic is ``min(W+, W-)``.  The
    p-value is exact (enumerating all sign patterns) for up to 12 pairs and
    otherwise uses the tie-corrected normal approximation with continuity
    correction; ``exact`` forces either route.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"paired samples need equal 1D shapes, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        dist = signs @ ranks
        return RankTestResult(stat, _two_sided(dist, w_plus), True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    return RankTestResult(stat, _normal_p(w_plus, mean, var), False)


def mann_whitney_u(x, y, exact=None):
    """Two-sided Mann-Whitney U (Wilcoxon rank-sum) test.

    ``U`` is reported for ``x``.  Exact enumeration of rank assignments is used
    when the pooled size is at most 12, otherwise the tie-corrected normal
    approximation with continuity correction.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = len(x), len(y)
    if nx == 0 or ny == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = midranks(pooled)
    u = float(ranks[:nx].sum() - nx * (nx + 1) / 2.0)
    total = nx + ny
    if exact is None:
        exact = total <= EXACT_MAX_N
    if exact:
        dist = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(total), nx)])
        dist = dist - nx * (nx + 1) / 2.0
        return RankTestResult(u, _two_sided(dist, u), True)
    mean = nx * ny / 2.0
    var = nx * ny / 12.0 * ((total + 1) - _tie_term(pooled) / (total * (total - 1)))
    return RankTestResult(u, _normal_p(u, mean, var), False)


# --------------------------------------------------------------------------
# agreement and volumes


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    means: np.ndarray = field(repr=False)
    diffs: np.ndarray = field(repr=False)

    def write_points(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["mean", "difference"])
            for m, d in zip(self.means, self.diffs):
                w.writerow([repr(float(m)), repr(float(d))])

    def to_dict(self):
        return {k: getattr(self, k) for k in ("mean_diff", "sd_diff", "loa_low", "loa_high")}


def bland_altman(a, b):
    """Mean difference ``a - b`` with 1.96 SD limits of agreement."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b) or len(a) < 2:
        raise LengthMismatch(f"need two equal-length samples of size >= 2, got {len(a)} and {len(b)}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(mean, sd, mean - LOA_Z * sd, mean + LOA_Z * sd, (a + b) / 2.0, d)


def icv(labels, spacing=None, background=0):
    """Intracranial volume in mm^3: every non-background voxel counts."""
    data = np.asarray(getattr(labels, "data", labels))
    if spacing is None:
        spacing = getattr(labels, "spacing", (1.0, 1.0, 1.0))
    return float(np.count_nonzero(data != background) * np.prod(spacing))


def annual_pct_change(vol_baseline, vol_followup, years):
    if vol_baseline <= 0:
        raise ZeroBaseline("baseline volume must be positive")
    if years <= 0:
        raise ValueError("years must be positive")
    return 100.0 * (vol_followup - vol_baseline) / (vol_baseline * years)


# --------------------------------------------------------------------------
# reports


@dataclass
class RegionRow:
    region: int
    name: str
    dsc: float
    vs: float
    pred_mm3: float
    true_mm3: float


@dataclass
class RegionReport:
    rows: list
    undefined: list
    summary: dict

    def to_tsv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["region", "name", "dsc", "vs", "pred_mm3", "true_mm3"])
            for r in self.rows:
                w.writerow([r.region, r.name, f"{r.dsc:.6f}", f"{r.vs:.6f}", f"{r.pred_mm3:.3f}", f"{r.true_mm3:.3f}"])

    def to_json(self):
        return json.dumps({"summary": self.summary, "undefined_regions": self.undefined}, indent=2, sort_keys=True)


def _mean_sd(values):
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def region_report(pred, truth, tree=None, spacing=None, regions=None, background=0):
    """Per-region DSC, VS and volumes, sorted by region id.

    Regions default to the tree's frontier labels (or, without a tree, every
    non-background id seen in either volume); ``regions`` restricts the set,
    e.g. to the labels two atlases share.  Regions empty in both volumes are
    listed in ``undefined`` and left out of the summary.
    """
    p = np.asarray(getattr(pred, "data", pred))
    t = np.asarray(getattr(truth, "data", truth))
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} vs {t.shape}")
    if spacing is None:
        spacing = getattr(truth, "spacing", (1.0, 1.0, 1.0))
    voxel = float(np.prod(spacing))
    if tree is not None:
        candidates = [int(i) for i in tree.frontier_ids]
        names = {int(i): n for i, n in zip(tree.ids, tree.names)}
    else:
        candidates = sorted(set(np.unique(p).tolist()) | set(np.unique(t).tolist()))
        names = {}
    candidates = [r for r in candidates if r != background]
    if regions is not None:
        keep = {int(r) for r in regions}
        candidates = [r for r in candidates if r in keep]

    rows, undefined = [], []
    for r in sorted(candidates):
        y, tt = p == r, t == r
        ny, nt = int(y.sum()), int(tt.sum())
        if ny + nt == 0:
            undefined.append(r)
            continue
        rows.append(
            RegionRow(r, names.get(r, ""), 2.0 * int(np.count_nonzero(y & tt)) / (ny + nt),
                      1.0 - abs(ny - nt) / (ny + nt), ny * voxel, nt * voxel)
        )
    dm, ds = _mean_sd([r.dsc for r in rows])
    vm, vsd = _mean_sd([r.vs for r in rows])
    summary = {"dsc_mean": dm, "dsc_sd": ds, "vs_mean": vm, "vs_sd": vsd, "regions": len(rows)}
    return RegionReport(rows, undefined, summary)
