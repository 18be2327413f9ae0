"""Bring RAS volumes to the canonical cube: isotropic grid, fixed side, [0, 1] range."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConstantVolume
from .nifti import LabelVolume, Volume, reorient_to_ras

CANONICAL_SIDE = 256
CANONICAL_SPACING = 1.0


def sample_volume(data, coords, order=1, fill=0.0):
    """Sample ``data`` at fractional voxel ``coords`` (shape ``(3, ...)``).

    Coordinates within half a voxel of the grid are clamped onto it; anything
    further out takes ``fill``.  ``order`` 1 is trilinear, 0 nearest neighbour.
    """
    coords = np.asarray(coords, dtype=np.float64)
    shape = np.array(data.shape, dtype=np.float64).reshape((3,) + (1,) * (coords.ndim - 1))
    inside = np.all((coords >= -0.5) & (coords <= shape - 0.5), axis=0)
    clamped = np.clip(coords, 0.0, shape - 1)
    # snap values that are integers up to round-off so exact grid hits stay exact
    snapped = np.rint(clamped)
    clamped = np.where(np.abs(clamped - snapped) < 1e-9, snapped, clamped)
    if order == 0:
        idx = np.floor(clamped + 0.5).astype(np.intp)
        idx = np.minimum(idx, (shape - 1).astype(np.intp))
        out = data[idx[0], idx[1], idx[2]]
    else:
        out = ndimage.map_coordinates(data.astype(np.float64, copy=False), clamped, order=1, mode="nearest")
    return np.where(inside, out, fill).astype(data.dtype if order == 0 else np.float64)


def _even_target(extent):
    return max(2, int(np.floor(extent / 2.0 + 0.5)) * 2)


def resample_to_isotropic(volume: Volume, mode=None, target_spacing=CANONICAL_SPACING) -> Volume:
    """Resample to the nearest even voxel counts covering the same physical extent.

    ``mode`` is ``"linear"`` or ``"nearest"``; it defaults to nearest for label
    volumes and linear otherwise.
    """
    if mode is None:
        mode = "nearest" if isinstance(volume, LabelVolume) else "linear"
    order = {"linear": 1, "nearest": 0}[mode]
    old_dims = np.array(volume.shape)
    old_sp = np.array(volume.spacing, dtype=np.float64)
    extent = old_dims * old_sp
    new_dims = np.array([_even_target(e / target_spacing) for e in extent])
    new_sp = extent / new_dims
    ratio = new_sp / old_sp

    if np.array_equal(new_dims, old_dims):
        data = volume.data.copy() if order == 0 else volume.data.astype(np.float64)
        return volume.with_data(data)

    axes = [(np.arange(n) + 0.5) * r - 0.5 for n, r in zip(new_dims, ratio)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    data = sample_volume(volume.data, coords, order=order)
    # voxel-centre alignment: new index n -> old index (n + 0.5) * r - 0.5
    scale = np.eye(4)
    scale[:3, :3] = np.diag(ratio)
    scale[:3, 3] = 0.5 * ratio - 0.5
    return volume.with_data(data, affine=volume.affine @ scale, spacing=tuple(new_sp))


def pad_crop_to_cube(volume: Volume, side=CANONICAL_SIDE, fill=0) -> Volume:
    """Pad or crop every axis symmetrically to ``side`` voxels.

    An odd remainder goes to the high side.  Labels are always padded with 0.
    """
    if isinstance(volume, LabelVolume):
        fill = 0
    data = volume.data
    shift = np.zeros(3)
    for axis, n in enumerate(data.shape):
        diff = side - n
        if diff > 0:
            lo = diff // 2
            pad = [(0, 0)] * 3
            pad[axis] = (lo, diff - lo)
            data = np.pad(data, pad, mode="constant", constant_values=fill)
            shift[axis] = -lo
        elif diff < 0:
            lo = (-diff) // 2
            data = np.take(data, np.arange(lo, lo + side), axis=axis)
            shift[axis] = lo
    if not shift.any() and data.shape == volume.shape:
        return volume.with_data(data.copy())
    translate = np.eye(4)
    translate[:3, 3] = shift
    return volume.with_data(np.ascontiguousarray(data), affine=volume.affine @ translate)


def normalize_intensity(volume: Volume) -> Volume:
    data = np.asarray(volume.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        raise ConstantVolume(f"cannot normalise a constant volume (value {lo})")
    return volume.with_data((data - lo) / (hi - lo), datatype_code=64, scl_slope=0.0, scl_inter=0.0)


def gamma_transform(volume, gamma):
    """Raise intensities in [0, 1] to ``gamma``; accepts a Volume or an array."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(volume, Volume):
        return volume.with_data(np.power(volume.data.astype(np.float64), gamma))
    return np.power(np.asarray(volume, dtype=np.float64), gamma)


def standardize(volume: Volume, side=CANONICAL_SIDE, spacing=CANONICAL_SPACING) -> Volume:
    """Full preprocessing chain: RAS, isotropic resampling, [0, 1] scaling, cube.

    Label volumes skip the intensity normalisation.  Normalisation runs before
    padding, so the pad value 0 equals the normalised minimum.
    """
    out = reorient_to_ras(volume)
    out = resample_to_isotropic(out, target_spacing=spacing)
    if not isinstance(out, LabelVolume):
        out = normalize_intensity(out)
    return pad_crop_to_cube(out, side=side, fill=0)
