"""Volume-level prediction from per-plane slice scores.

Any model exposing ``score_slice(slice2d) -> (H, W, K)`` and a
``plane_weights`` attribute (simplex weights for axial, coronal, sagittal)
can be used.
"""
from __future__ import annotations

import numpy as np

from .errors import ModelShapeMismatch, ShapeMismatch
from .hierarchy import LabelTree, log_class_conditional, log_sibling_softmax
from .nifti import LabelVolume, Volume

PLANES = ("axial", "coronal", "sagittal")


def _frontier_by_id(tree):
    order = np.argsort(tree.ids[tree.frontier], kind="stable")
    cols = tree.frontier[order]
    return cols, tree.ids[cols]


def frontier_argmax(scores, tree: LabelTree):
    """Frontier node with the highest class probability; ties go to the smallest id."""
    cols, ids = _frontier_by_id(tree)
    logp = log_class_conditional(scores, tree)[..., cols]
    return ids[np.argmax(logp, axis=-1)].astype(np.int32)


def greedy_descent(scores, tree: LabelTree):
    """Walk from the root, taking the most likely child at every level."""
    logc = log_sibling_softmax(scores, tree)
    shape = logc.shape[:-1]
    current = np.full(shape, -1, dtype=np.intp)  # -1 is the root
    groups = [(-1, np.array(tree.root_children))] + [
        (p, np.array(ch)) for p, ch in enumerate(tree.children) if ch
    ]
    for _ in range(tree.depth):
        nxt = current.copy()
        for parent, members in groups:
            sel = current == parent
            if not sel.any():
                continue
            members = members[np.argsort(tree.ids[members], kind="stable")]
            nxt[sel] = members[np.argmax(logc[sel][:, members], axis=-1)]
        current = nxt
    return tree.ids[current].astype(np.int32)


def predict_score_fusion(score_volumes, weights, tree: LabelTree, chunk=16, greedy=False):
    """Fuse three ``(X, Y, Z, K)`` score volumes and label every voxel.

    Work proceeds in z-chunks of ``chunk`` slices so only three chunk-sized
    score blocks are combined at a time.
    """
    a, c, s = score_volumes
    if not (a.shape == c.shape == s.shape) or a.ndim != 4:
        raise ShapeMismatch(f"score volumes differ: {a.shape}, {c.shape}, {s.shape}")
    if a.shape[-1] != tree.size:
        raise ShapeMismatch(f"node axis {a.shape[-1]} does not match tree size {tree.size}")
    w = np.asarray(weights, dtype=np.float64)
    pick = greedy_descent if greedy else frontier_argmax
    out = np.empty(a.shape[:3], dtype=np.int32)
    for z0 in range(0, a.shape[2], chunk):
        zs = slice(z0, z0 + chunk)
        fused = w[0] * a[:, :, zs] + w[1] * c[:, :, zs] + w[2] * s[:, :, zs]
        out[:, :, zs] = pick(fused, tree)
    return out


def predict_majority_vote(label_volumes, weights):
    """Per-voxel majority of three label maps; a three-way split goes to the heaviest plane."""
    a, c, s = (np.asarray(getattr(v, "data", v)) for v in label_volumes)
    if not (a.shape == c.shape == s.shape):
        raise ShapeMismatch(f"label volumes differ: {a.shape}, {c.shape}, {s.shape}")
    stack = np.stack([a, c, s])
    best = int(np.argmax(np.asarray(weights)))
    out = np.where(c == s, c, stack[best])
    out = np.where((a == c) | (a == s), a, out)
    return out.astype(np.int32)


def plane_slices(data, plane):
    """Yield ``(index, slice2d)`` pairs for one orientation of an ``(X, Y, Z)`` grid."""
    axis = {"axial": 2, "coronal": 1, "sagittal": 0}[plane]
    for n in range(data.shape[axis]):
        yield n, np.take(data, n, axis=axis)


def plane_score_volume(data, model, plane, dtype=np.float32):
    """Score every slice of one orientation and stack into ``(X, Y, Z, K)``."""
    axis = {"axial": 2, "coronal": 1, "sagittal": 0}[plane]
    out = None
    for n, sl in plane_slices(data, plane):
        scores = model.score_slice(sl)
        if scores.shape[:2] != sl.shape:
            raise ModelShapeMismatch(f"model returned {scores.shape} for a {sl.shape} slice")
        if out is None:
            out = np.empty(data.shape + (scores.shape[-1],), dtype=dtype)
        idx = [slice(None)] * 4
        idx[axis] = n
        out[tuple(idx)] = scores
    return out


def plane_label_volume(data, model, plane, tree: LabelTree):
    axis = {"axial": 2, "coronal": 1, "sagittal": 0}[plane]
    out = np.empty(data.shape, dtype=np.int32)
    for n, sl in plane_slices(data, plane):
        idx = [slice(None)] * 3
        idx[axis] = n
        out[tuple(idx)] = frontier_argmax(model.score_slice(sl), tree)
    return out


def segment_volume(volume, model, tree: LabelTree, mode="fusion", chunk=16, greedy=False) -> LabelVolume:
    """Segment a standardised volume by running the model over all three orientations.

    ``mode`` is ``"fusion"`` (weighted score fusion) or ``"vote"`` (majority
    vote of the three planar label maps).
    """
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if data.ndim != 3:
        raise ModelShapeMismatch(f"expected a 3D volume, got shape {data.shape}")
    if getattr(model, "n_nodes", tree.size) != tree.size:
        raise ModelShapeMismatch(f"model scores {model.n_nodes} nodes, tree has {tree.size}")
    weights = np.asarray(model.plane_weights)
    if mode == "fusion":
        scores = [plane_score_volume(data, model, p) for p in PLANES]
        labels = predict_score_fusion(scores, weights, tree, chunk=chunk, greedy=greedy)
    elif mode == "vote":
        labels = predict_majority_vote([plane_label_volume(data, model, p, tree) for p in PLANES], weights)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(volume, Volume):
        return LabelVolume(volume.header.copy(datatype_code=8, scl_slope=0.0, scl_inter=0.0), labels)
    return LabelVolume.from_array(labels)
