"""On-the-fly 3D augmentation simulating MRI variation and acquisition artifacts.

Every transform takes either a :class:`~brainparc.nifti.Volume` or a bare
array and returns the same kind.  Intensity outputs are clamped to [0, 1].
Randomness only enters through an explicit :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import EmptyForeground
from .nifti import Volume
from .standardize import gamma_transform, sample_volume


def _unwrap(v):
    return (v.data, v) if isinstance(v, Volume) else (np.asarray(v), None)


def _rewrap(arr, like):
    return arr if like is None else like.with_data(arr)


# --------------------------------------------------------------------------
# k-space


def fft3_centered(volume) -> np.ndarray:
    """Centred 3D DFT: zero frequency sits at index ``n // 2`` on every axis."""
    data, _ = _unwrap(volume)
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(data)))


def ifft3_centered(kspace) -> np.ndarray:
    """Inverse of :func:`fft3_centered`; returns the complex image."""
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(kspace)))


def _from_kspace(kspace, like):
    out = np.clip(ifft3_centered(kspace).real, 0.0, 1.0)
    return _rewrap(out, like)


def gibbs_ringing(volume, cutoff):
    """Keep the centred k-space cube of half-width ``cutoff``; zero the rest."""
    data, like = _unwrap(volume)
    k = fft3_centered(data)
    mask = np.ones(data.shape, dtype=bool)
    for axis, n in enumerate(data.shape):
        keep = np.abs(np.arange(n) - n // 2) <= cutoff
        shape = [1, 1, 1]
        shape[axis] = n
        mask &= keep.reshape(shape)
    return _from_kspace(np.where(mask, k, 0), like)


def ghosting(volume, n, factor, axes=(0, 1, 2)):
    """Attenuate every ``n``-th k-space plane along each axis in ``axes``.

    The modulated planes are those at offset 1 (mod ``n``) from the centre, so
    the DC plane is never touched.  ``n`` and ``factor`` may be scalars or
    one value per entry of ``axes``.
    """
    data, like = _unwrap(volume)
    axes = tuple(axes)
    ns = np.broadcast_to(n, (len(axes),))
    factors = np.broadcast_to(factor, (len(axes),))
    k = fft3_centered(data)
    for axis, step, f in zip(axes, ns, factors):
        step = int(step)
        if step < 2:
            raise ValueError("ghost period must be at least 2")
        size = data.shape[axis]
        weights = np.ones(size)
        weights[(np.arange(size) - size // 2) % step == 1] = f
        shape = [1, 1, 1]
        shape[axis] = size
        k = k * weights.reshape(shape)
    return _from_kspace(k, like)


# --------------------------------------------------------------------------
# intensity transforms


def add_gaussian_noise(volume, variance, rng=None):
    data, like = _unwrap(volume)
    if variance == 0:
        return _rewrap(np.asarray(data, dtype=np.float64).copy(), like)
    rng = np.random.default_rng(rng)
    noise = rng.normal(0.0, math.sqrt(variance), size=data.shape)
    return _rewrap(np.clip(data + noise, 0.0, 1.0), like)


def add_speckle_noise(volume, variance, rng=None):
    data, like = _unwrap(volume)
    if variance == 0:
        return _rewrap(np.asarray(data, dtype=np.float64).copy(), like)
    rng = np.random.default_rng(rng)
    noise = rng.normal(0.0, math.sqrt(variance), size=data.shape)
    return _rewrap(np.clip(data + data * noise, 0.0, 1.0), like)


def bias_field_map(shape, center, radius):
    """Multiplicative field ``1 - sum(((p - c) / r)**2)`` on the grid 1..n."""
    field = np.ones(shape)
    for axis, n in enumerate(shape):
        p = np.arange(1, n + 1, dtype=np.float64)
        e = ((p - center[axis]) / radius) ** 2
        s = [1, 1, 1]
        s[axis] = n
        field = field - e.reshape(s)
    return field


def bias_field(volume, center, radius):
    if radius <= 0:
        raise ValueError("radius must be positive")
    data, like = _unwrap(volume)
    out = np.clip(data * bias_field_map(data.shape, center, radius), 0.0, 1.0)
    return _rewrap(out, like)


# --------------------------------------------------------------------------
# geometric transforms


def rotation_matrix(angles):
    """R = Rx @ Ry @ Rz for angles in degrees."""
    ax, ay, az = np.deg2rad(angles)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def _identity_grid(shape):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))


def _warp_pair(volume, labels, coords):
    data, like = _unwrap(volume)
    out = _rewrap(np.clip(sample_volume(data, coords, order=1, fill=0.0), 0.0, 1.0), like)
    if labels is None:
        return out, None
    ldata, llike = _unwrap(labels)
    return out, _rewrap(sample_volume(ldata, coords, order=0, fill=0), llike)


def rotate3d(volume, labels=None, angles=(0.0, 0.0, 0.0)):
    """Rotate about the grid centre ``(n - 1) / 2``.

    Output voxel ``p`` pulls from ``R @ (p - c) + c`` with ``R = Rx Ry Rz``, so
    a +90 degree z-rotation sends content at ``(x, y, z)`` to
    ``(y, n - 1 - x, z)``.
    """
    if max(abs(a) for a in angles) > 90:
        raise ValueError("rotation angles are limited to +-90 degrees")
    data, _ = _unwrap(volume)
    if not any(angles):
        return _warp_pair(volume, labels, _identity_grid(data.shape))
    center = (np.array(data.shape, dtype=np.float64) - 1) / 2
    grid = _identity_grid(data.shape)
    rel = grid.reshape(3, -1) - center[:, None]
    src = rotation_matrix(angles) @ rel + center[:, None]
    return _warp_pair(volume, labels, src.reshape(grid.shape))


def gaussian_kernel(sigma):
    """Unit-sum 1D Gaussian with ``2 * ceil(2 * sigma) + 1`` taps."""
    half = int(math.ceil(2 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def elastic_displacement(shape, sigma, alpha, rng):
    """Three smoothed uniform[-1, 1] fields scaled by ``alpha``; shape ``(3, *shape)``."""
    kernel = gaussian_kernel(sigma)
    fields_ = []
    for _ in range(3):
        f = rng.uniform(-1.0, 1.0, size=shape)
        for axis in range(3):
            f = ndimage.convolve1d(f, kernel, axis=axis, mode="nearest")
        fields_.append(f * alpha)
    return np.stack(fields_)


def elastic_deform(volume, labels=None, sigma=25.0, alpha=300.0, rng=None):
    if sigma <= 0 or alpha < 0:
        raise ValueError("need sigma > 0 and alpha >= 0")
    data, _ = _unwrap(volume)
    grid = _identity_grid(data.shape)
    if alpha == 0:
        return _warp_pair(volume, labels, grid)
    rng = np.random.default_rng(rng)
    return _warp_pair(volume, labels, grid + elastic_displacement(data.shape, sigma, alpha, rng))


def foreground_bbox(labels):
    nz = np.nonzero(labels)
    if len(nz[0]) == 0:
        raise EmptyForeground("label volume has no foreground voxels")
    return [(int(a.min()), int(a.max())) for a in nz]


def random_crop_brain(volume, labels, rng=None, box=None):
    """Zero everything outside a random box that still contains all foreground.

    Per axis the low edge is drawn uniformly from ``[0, bbox_low]`` and the
    high edge from ``[bbox_high, n - 1]``.  Passing ``box`` (a list of
    ``(low, high)`` inclusive pairs) skips sampling.
    """
    data, like = _unwrap(volume)
    ldata, llike = _unwrap(labels)
    bbox = foreground_bbox(ldata)
    if box is None:
        rng = np.random.default_rng(rng)
        box = [(int(rng.integers(0, lo + 1)), int(rng.integers(hi, n))) for (lo, hi), n in zip(bbox, ldata.shape)]
    mask = np.zeros(ldata.shape, dtype=bool)
    mask[tuple(slice(lo, hi + 1) for lo, hi in box)] = True
    out = np.where(mask, data, 0.0)
    return _rewrap(out, like), _rewrap(np.where(mask, ldata, 0), llike)


# --------------------------------------------------------------------------
# configuration and random pipeline


@dataclass
class AugmentConfig:
    """Parameter ranges for the random pipeline.

    Ranges are given for a 256-voxel cube; size-dependent ones (bias centre
    and radius, ringing cutoff, elastic sigma and alpha) are scaled by
    ``side / reference_side`` when applied to other cube sizes.
    ``p_*`` is the probability each transform fires.
    """

    seed: int = 0
    reference_side: int = 256
    rotation_deg: tuple = (-10.0, 10.0)
    gamma: tuple = (0.8, 1.2)
    noise_variance: tuple = (0.0, 1e-4)
    ringing_cutoff: tuple = (90, 120)
    ghost_period: tuple = (2, 4)
    ghost_factor: tuple = (0.85, 0.95)
    elastic_sigma: tuple = (20.0, 30.0)
    elastic_alpha: tuple = (200.0, 500.0)
    bias_center: tuple = (1.0, 256.0)
    bias_radius: float = 256.0
    p_rotate: float = 0.5
    p_crop: float = 0.5
    p_gamma: float = 0.5
    p_noise: float = 0.5
    p_bias: float = 0.5
    p_ringing: float = 0.25
    p_ghosting: float = 0.25
    p_elastic: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                val = tuple(val)
                setattr(self, f.name, val)
            if isinstance(val, tuple):
                if len(val) != 2 or val[0] > val[1]:
                    raise ValueError(f"{f.name} must be a (low, high) pair with low <= high, got {val}")
            elif f.name.startswith("p_") and not 0.0 <= val <= 1.0:
                raise ValueError(f"{f.name} must be a probability, got {val}")
        if self.bias_radius <= 0:
            raise ValueError("bias_radius must be positive")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def random_augment(volume, labels=None, config: AugmentConfig | None = None, rng=None):
    """Apply the stochastic pipeline; returns ``(volume, labels, params)``.

    ``params`` records every sampled value so a run can be replayed.
    """
    config = config or AugmentConfig()
    rng = np.random.default_rng(config.seed if rng is None else rng)
    data, _ = _unwrap(volume)
    scale = min(data.shape) / config.reference_side
    params = {}

    def fire(p):
        return rng.random() < p

    if fire(config.p_rotate):
        angles = tuple(float(a) for a in rng.uniform(*config.rotation_deg, size=3))
        params["rotate"] = angles
        volume, labels = rotate3d(volume, labels, angles)
    if fire(config.p_elastic):
        sigma = float(rng.uniform(*config.elastic_sigma)) * scale
        alpha = float(rng.uniform(*config.elastic_alpha)) * scale
        params["elastic"] = (sigma, alpha)
        volume, labels = elastic_deform(volume, labels, sigma, alpha, rng)
    if labels is not None and fire(config.p_crop) and np.any(_unwrap(labels)[0]):
        volume, labels = random_crop_brain(volume, labels, rng)
        params["crop"] = True
    if fire(config.p_gamma):
        g = float(rng.uniform(*config.gamma))
        params["gamma"] = g
        volume = gamma_transform(volume, g)
    if fire(config.p_bias):
        lo, hi = config.bias_center
        center = rng.uniform(lo * scale, hi * scale, size=3)
        params["bias"] = (tuple(float(c) for c in center), config.bias_radius * scale)
        volume = bias_field(volume, center, config.bias_radius * scale)
    if fire(config.p_ringing):
        lo, hi = config.ringing_cutoff
        cutoff = int(rng.integers(int(round(lo * scale)), int(round(hi * scale)) + 1))
        params["ringing"] = cutoff
        volume = gibbs_ringing(volume, cutoff)
    if fire(config.p_ghosting):
        n = rng.integers(config.ghost_period[0], config.ghost_period[1] + 1, size=3)
        f = rng.uniform(*config.ghost_factor, size=3)
        params["ghosting"] = ([int(x) for x in n], [float(x) for x in f])
        volume = ghosting(volume, n, f)
    if fire(config.p_noise):
        var = float(rng.uniform(*config.noise_variance))
        speckle = bool(rng.random() < 0.5)
        params["speckle" if speckle else "gaussian"] = var
        volume = (add_speckle_noise if speckle else add_gaussian_noise)(volume, var, rng)
    return volume, labels, params
