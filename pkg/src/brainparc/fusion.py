"""Training objective for orthogonal-plane fusion with weak supervision.

A planar batch holds three raw score maps cut through one voxel: axial
(z fixed, pixels indexed ``[x, y]``), coronal (y fixed, ``[x, z]``) and
sagittal (x fixed, ``[y, z]``).  The shared voxel's scores are replaced by a
learned convex combination before the hierarchical Softmax, and the three
intersection lines are tied together with a symmetric KL penalty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyForeground, ShapeMismatch
from .hierarchy import LabelTree, encode_targets, log_class_conditional, log_probs_backward

DEFAULT_SIGMA = math.sqrt(10.0)
KL_FLOOR = 1e-12
_LOG_FLOOR = math.log(KL_FLOOR)


# --------------------------------------------------------------------------
# weak supervision


def distance_weights(labels, sigma=DEFAULT_SIGMA, spacing=(1.0, 1.0, 1.0), background=0):
    """Gaussian of the Euclidean distance (mm) to the nearest foreground voxel.

    Foreground is every voxel whose label differs from ``background``;
    foreground voxels themselves get weight 1.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    labels = np.asarray(getattr(labels, "data", labels))
    fg = labels != background
    if not fg.any():
        raise EmptyForeground("no foreground voxels to measure distance from")
    d = ndimage.distance_transform_edt(~fg, sampling=spacing)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def weak_targets(labels, weights, tree: LabelTree, cavity_id, background_id=0, threshold=1e-6, ancestors=True):
    """Target rows where unlabelled background near the brain is a soft cavity.

    Labelled voxels keep their hard path encoding.  Background voxels with
    weight ``w > threshold`` become ``w * path(cavity) + (1 - w) * path(background)``;
    the rest stay hard background.
    """
    labels = np.asarray(getattr(labels, "data", labels))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != labels.shape:
        raise ShapeMismatch(f"weights {weights.shape} vs labels {labels.shape}")
    targets = encode_targets(labels, tree, ancestors=ancestors)
    table = tree.path if ancestors else np.eye(tree.size)
    cav = table[tree.index[cavity_id]]
    bg = table[tree.index[background_id]]
    soft = (labels == background_id) & (weights > threshold)
    w = weights[soft][:, None]
    targets[soft] = w * cav + (1.0 - w) * bg
    return targets


# --------------------------------------------------------------------------
# planar aggregation


def plane_weights(params):
    """Map three unconstrained reals onto the positive simplex (Softmax)."""
    p = np.asarray(params, dtype=np.float64)
    e = np.exp(p - p.max())
    return e / e.sum()


def fuse_intersection(scores_a, scores_c, scores_s, weights):
    w = np.asarray(weights, dtype=np.float64)
    return w[0] * np.asarray(scores_a) + w[1] * np.asarray(scores_c) + w[2] * np.asarray(scores_s)


def _sym_kl_from_logs(logp, logq):
    """Symmetric KL between row distributions given as log probabilities.

    Returns the value and its gradients with respect to both log arrays.
    """
    lp = np.maximum(logp, _LOG_FLOOR)
    lq = np.maximum(logq, _LOG_FLOOR)
    p, q = np.exp(logp), np.exp(logq)
    rows = int(np.prod(logp.shape[:-1])) or 1
    diff, ldiff = p - q, lp - lq
    value = 0.5 * (diff * ldiff).sum() / rows
    gp = 0.5 / rows * (p * ldiff + diff * (logp > _LOG_FLOOR))
    gq = 0.5 / rows * (-q * ldiff - diff * (logq > _LOG_FLOOR))
    return value, gp, gq


def kld_consistency(p, q, eps=KL_FLOOR):
    """Average symmetric KL divergence between matching rows of ``p`` and ``q``.

    Rows are probability vectors; zeros are floored at ``eps`` inside the logs.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"{p.shape} vs {q.shape}")
    for arr in (p, q):
        if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("rows must be probability vectors")
    rows = int(np.prod(p.shape[:-1])) or 1
    lp = np.log(np.maximum(p, eps))
    lq = np.log(np.maximum(q, eps))
    return float(0.5 * ((p - q) * (lp - lq)).sum() / rows)


# --------------------------------------------------------------------------
# total loss


@dataclass
class PlanarBatch:
    axial: np.ndarray     # (X, Y, K)
    coronal: np.ndarray   # (X, Z, K)
    sagittal: np.ndarray  # (Y, Z, K)
    index: tuple          # intersection voxel (i, j, k)

    def check(self):
        (xa, ya, ka), (xc, zc, kc), (ys, zs, ks) = self.axial.shape, self.coronal.shape, self.sagittal.shape
        if not (xa == xc and ya == ys and zc == zs and ka == kc == ks):
            raise ShapeMismatch(
                f"planes do not intersect consistently: {self.axial.shape}, {self.coronal.shape}, {self.sagittal.shape}"
            )
        i, j, k = self.index
        if not (0 <= i < xa and 0 <= j < ya and 0 <= k < zc):
            raise ShapeMismatch(f"intersection {self.index} outside the planes")


@dataclass
class LossResult:
    value: float
    grad_axial: np.ndarray
    grad_coronal: np.ndarray
    grad_sagittal: np.ndarray
    grad_weight_params: np.ndarray
    parts: dict = field(default_factory=dict)


def _lines(i, j, k):
    # (plane, index) pairs addressing each intersection line
    ac = (("axial", np.s_[:, j]), ("coronal", np.s_[:, k]))
    cs = (("coronal", np.s_[i, :]), ("sagittal", np.s_[j, :]))
    as_ = (("axial", np.s_[i, :]), ("sagittal", np.s_[:, k]))
    return {"ac": ac, "cs": cs, "as": as_}


def total_loss(batch: PlanarBatch, weight_params, targets, tree: LabelTree, consistency=True) -> LossResult:
    """Per-plane hierarchical CE plus pairwise line consistency, with gradients.

    ``targets`` is a ``(axial, coronal, sagittal)`` tuple of target grids shaped
    like the score maps.  Gradients are with respect to the raw plane scores
    and the unconstrained plane-weight parameters.
    """
    batch.check()
    planes = {"axial": batch.axial, "coronal": batch.coronal, "sagittal": batch.sagittal}
    tgt = dict(zip(planes, targets))
    for name, t in tgt.items():
        if np.shape(t) != planes[name].shape:
            raise ShapeMismatch(f"{name} targets {np.shape(t)} vs scores {planes[name].shape}")
    i, j, k = batch.index
    cross = {"axial": (i, j), "coronal": (i, k), "sagittal": (j, k)}

    w = plane_weights(weight_params)
    picked = [planes[name][cross[name]] for name in planes]
    fused = fuse_intersection(*picked, w)

    updated, logp, grad_logp, parts = {}, {}, {}, {}
    value = 0.0
    for name, s in planes.items():
        s = np.array(s, dtype=np.float64, copy=True)
        s[cross[name]] = fused
        updated[name] = s
        logp[name] = log_class_conditional(s, tree)
        t = np.asarray(tgt[name], dtype=np.float64)
        pixels = int(np.prod(s.shape[:-1]))
        ce = float(-(t * logp[name]).sum() / pixels)
        parts[f"ce_{name}"] = ce
        value += ce
        grad_logp[name] = -t / pixels

    if consistency:
        fr = tree.frontier
        for key, ((pa, ia), (pb, ib)) in _lines(i, j, k).items():
            d, gp, gq = _sym_kl_from_logs(logp[pa][ia][..., fr], logp[pb][ib][..., fr])
            parts[f"kl_{key}"] = float(d)
            value += d
            # basic indexing yields views, so the frontier update lands in place
            grad_logp[pa][ia][..., fr] += gp
            grad_logp[pb][ib][..., fr] += gq

    grads = {name: log_probs_backward(updated[name], grad_logp[name], tree) for name in planes}
    grad_fused = sum(grads[name][cross[name]] for name in planes)
    for p, name in enumerate(planes):
        grads[name][cross[name]] = w[p] * grad_fused
    grad_w = np.array([float(grad_fused @ v) for v in picked])
    grad_params = w * (grad_w - w @ grad_w)
    return LossResult(float(value), grads["axial"], grads["coronal"], grads["sagittal"], grad_params, parts)
