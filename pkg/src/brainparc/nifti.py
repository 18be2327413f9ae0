"""NIfTI-1 reading, writing and RAS reorientation.

Only single-file ``.nii`` (optionally gzip-wrapped) and ``.hdr``/``.img``
pairs with 3D scalar data are handled.  Data are kept in memory indexed as
``data[i, j, k]`` with ``i`` the fastest-varying axis on disk.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IoFailure, MalformedHeader, SingularAffine, TruncatedData, UnsupportedDatatype

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy scalar type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}
INTEGER_CODES = (2, 4, 8)

# field name, struct format, byte offset (little-endian unless swapped)
_LAYOUT = [
    ("sizeof_hdr", "i", 0),
    ("dim", "8h", 40),
    ("intent_p", "3f", 56),
    ("intent_code", "h", 68),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("xyzt_units", "B", 123),
    ("descrip", "80s", 148),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("quatern", "3f", 256),
    ("qoffset", "3f", 268),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
]


@dataclass
class NiftiHeader:
    """Geometry and storage metadata for one volume."""

    dims: tuple
    spacing: tuple
    affine: np.ndarray
    datatype_code: int = 16
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    qform_code: int = 1
    sform_code: int = 2
    descrip: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    def copy(self, **changes) -> "NiftiHeader":
        changes.setdefault("affine", self.affine.copy())
        return replace(self, **changes)

    def check(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise MalformedHeader(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise MalformedHeader(f"spacing must be positive, got {self.spacing}")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise SingularAffine("affine 3x3 block is singular")


@dataclass
class Volume:
    """A 3D intensity grid plus its header."""

    header: NiftiHeader
    data: np.ndarray = field(repr=False)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), affine=None, **header_fields):
        data = np.asarray(data)
        if affine is None:
            affine = np.diag([*map(float, spacing), 1.0])
        code = header_fields.pop("datatype_code", _CODES.get(data.dtype, cls._default_code))
        header = NiftiHeader(data.shape, spacing, affine, datatype_code=code, **header_fields)
        return cls(header, data)

    _default_code = 16

    @property
    def shape(self):
        return self.data.shape

    @property
    def spacing(self):
        return self.header.spacing

    @property
    def affine(self):
        return self.header.affine

    def with_data(self, data, **header_changes):
        """Return a volume with new data, sharing geometry unless overridden."""
        data = np.asarray(data)
        header_changes.setdefault("dims", data.shape)
        return type(self)(self.header.copy(**header_changes), data)

    def check(self):
        self.header.check()
        if self.data.shape != self.header.dims:
            raise MalformedHeader(f"data shape {self.data.shape} != header dims {self.header.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


class LabelVolume(Volume):
    """A 3D grid of integer label ids (0 is background)."""

    _default_code = 8

    def __init__(self, header, data):
        super().__init__(header, np.asarray(data).astype(np.int32, copy=False))

    def check(self):
        super().check()
        if self.data.min(initial=0) < 0:
            raise ValueError("label ids must be non-negative")


# --------------------------------------------------------------------------
# quaternion helpers


def quaternion_to_affine(b, c, d, qoffset, pixdim, qfac):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    aff = np.eye(4)
    aff[:3, :3] = rot * np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    aff[:3, 3] = qoffset
    return aff


def affine_to_quaternion(affine):
    """Decompose an affine into (b, c, d), qoffset, zooms and qfac.

    Shears are discarded by taking the closest rotation (polar decomposition).
    """
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    zooms = np.sqrt((m * m).sum(axis=0))
    r = m / zooms
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    # Shepperd's method
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        a, b, c, d = 0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a, b, c, d = (r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a, b, c, d = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a, b, c, d = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return (b, c, d), np.asarray(affine)[:3, 3].copy(), zooms, qfac


# --------------------------------------------------------------------------
# reading


def _read_bytes(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"corrupt gzip stream in {path}") from exc
    return raw


def _parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either byte order")
    fields = {}
    for name, fmt, offset in _LAYOUT:
        vals = struct.unpack_from(endian + fmt, raw, offset)
        fields[name] = vals[0] if len(vals) == 1 else vals
    magic = fields["magic"].rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise MalformedHeader(f"bad magic {fields['magic']!r}")
    fields["magic"] = magic
    return endian, fields


def _header_from_fields(f):
    dim = f["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"dim[0]={ndim} out of range")
    dims = [int(d) if i < ndim else 1 for i, d in enumerate(dim[1:4])]
    if any(int(d) != 1 for d in dim[4 : ndim + 1]):
        raise MalformedHeader("only 3D scalar volumes are supported")
    if min(dims) < 1:
        raise MalformedHeader(f"non-positive dims {dims}")
    code = f["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    pixdim = f["pixdim"]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    if f["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = f["srow_x"], f["srow_y"], f["srow_z"]
    elif f["qform_code"] > 0:
        qfac = -1.0 if pixdim[0] == -1 else 1.0
        affine = quaternion_to_affine(*f["quatern"], f["qoffset"], spacing, qfac)
    else:
        affine = np.diag([*spacing, 1.0])
    descrip = f["descrip"].split(b"\x00", 1)[0].decode("latin-1")
    return NiftiHeader(
        dims,
        spacing,
        affine,
        datatype_code=code,
        scl_slope=float(f["scl_slope"]),
        scl_inter=float(f["scl_inter"]),
        qform_code=int(f["qform_code"]),
        sform_code=int(f["sform_code"]),
        descrip=descrip,
    )


def _pair_image_path(path):
    p = str(path)
    for hdr, img in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if p.endswith(hdr):
            return Path(p[: -len(hdr)] + img)
    raise MalformedHeader(f"'ni1' header {path} has no .hdr suffix")


def read_nifti(path, kind="auto"):
    """Read a NIfTI-1 file.

    ``kind`` is ``"image"``, ``"label"`` or ``"auto"``; in auto mode integer
    data without intensity scaling is returned as a :class:`LabelVolume`.
    """
    raw = _read_bytes(path)
    endian, fields = _parse_header(raw)
    header = _header_from_fields(fields)

    if fields["magic"] == b"ni1":
        payload, offset = _read_bytes(_pair_image_path(path)), int(fields["vox_offset"])
    else:
        payload, offset = raw, int(fields["vox_offset"])
        offset = max(offset, HEADER_SIZE)

    dtype = np.dtype(DATATYPES[header.datatype_code]).newbyteorder(endian)
    count = int(np.prod(header.dims))
    if len(payload) < offset + count * dtype.itemsize:
        raise TruncatedData(
            f"{path}: expected {count * dtype.itemsize} data bytes at offset {offset}, "
            f"file holds {max(len(payload) - offset, 0)}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(header.dims, order="F")

    slope, inter = header.scl_slope, header.scl_inter
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)
    if scaled:
        arr = arr.astype(np.float64) * slope + inter

    if kind == "auto":
        kind = "label" if header.datatype_code in INTEGER_CODES and not scaled else "image"
    if kind == "label":
        return LabelVolume(header, np.rint(arr).astype(np.int32) if scaled else arr)
    if kind != "image":
        raise ValueError(f"unknown kind {kind!r}")
    if header.datatype_code in INTEGER_CODES and not scaled:
        arr = arr.astype(np.float64)
    return Volume(header, arr)


# --------------------------------------------------------------------------
# writing


def _encode_header(header: NiftiHeader, dtype):
    buf = bytearray(VOX_OFFSET)
    (b, c, d), qoffset, zooms, qfac = affine_to_quaternion(header.affine)
    values = {
        "sizeof_hdr": HEADER_SIZE,
        "dim": (3, *header.dims, 1, 1, 1, 1),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": header.datatype_code,
        "bitpix": dtype.itemsize * 8,
        "pixdim": (qfac, *header.spacing, 1.0, 1.0, 1.0, 1.0),
        "vox_offset": float(VOX_OFFSET),
        "scl_slope": header.scl_slope,
        "scl_inter": header.scl_inter,
        "xyzt_units": 2,  # mm
        "descrip": header.descrip.encode("latin-1")[:79],
        "qform_code": header.qform_code,
        "sform_code": header.sform_code,
        "quatern": (b, c, d),
        "qoffset": tuple(qoffset),
        "srow_x": tuple(header.affine[0]),
        "srow_y": tuple(header.affine[1]),
        "srow_z": tuple(header.affine[2]),
        "magic": b"n+1\x00",
    }
    for name, fmt, offset in _LAYOUT:
        val = values[name]
        if isinstance(val, tuple):
            struct.pack_into("<" + fmt, buf, offset, *val)
        else:
            struct.pack_into("<" + fmt, buf, offset, val)
    return bytes(buf)


def write_nifti(volume: Volume, path):
    """Write ``volume`` as a single-file NIfTI-1 (gzip when the name ends in .gz)."""
    volume.check()
    header = volume.header
    if header.datatype_code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {header.datatype_code} is not supported")
    dtype = np.dtype(DATATYPES[header.datatype_code]).newbyteorder("<")
    data = np.asarray(volume.data)
    slope, inter = header.scl_slope, header.scl_inter
    if slope not in (0.0, 1.0) or (slope != 0 and inter != 0):
        data = (data - inter) / slope
    if header.datatype_code in INTEGER_CODES and data.dtype.kind == "f":
        data = np.rint(data)
    payload = _encode_header(header, dtype) + data.astype(dtype).tobytes(order="F")

    path = Path(path)
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# orientation


def axis_orientation(affine):
    """For each voxel axis return (world axis, sign) of its dominant direction.

    Assignment is greedy on the largest absolute entry so the result is
    always a permutation.
    """
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(m)) < 1e-12:
        raise SingularAffine("affine 3x3 block is singular")
    m = m / np.sqrt((m * m).sum(axis=0))
    work = np.abs(m)
    ornt = [None] * 3
    for _ in range(3):
        w, j = np.unravel_index(np.argmax(work), work.shape)
        ornt[j] = (int(w), 1 if m[w, j] > 0 else -1)
        work[w, :] = -1
        work[:, j] = -1
    return ornt


def reorient_to_ras(volume: Volume) -> Volume:
    """Permute and flip voxel axes so they point to +R, +A, +S.

    World coordinates of every voxel are preserved; no resampling happens.
    """
    ornt = axis_orientation(volume.affine)
    dims = volume.data.shape
    perm = [None] * 3
    for j, (w, _) in enumerate(ornt):
        perm[w] = j
    data = np.transpose(volume.data, perm)
    # new index n maps to old index j as T[j, w]*n[w] + T[j, 3]
    transform = np.zeros((4, 4))
    transform[3, 3] = 1.0
    for j, (w, sign) in enumerate(ornt):
        if sign < 0:
            data = np.flip(data, axis=w)
            transform[j, w] = -1.0
            transform[j, 3] = dims[j] - 1
        else:
            transform[j, w] = 1.0
    if perm == [0, 1, 2] and all(s > 0 for _, s in ornt):
        return volume.with_data(volume.data.copy())
    affine = volume.affine @ transform
    spacing = tuple(volume.spacing[j] for j in perm)
    return volume.with_data(np.ascontiguousarray(data), affine=affine, spacing=spacing)


def voxel_to_world(affine, ijk):
    ijk = np.asarray(ijk, dtype=np.float64)
    return ijk @ np.asarray(affine)[:3, :3].T + np.asarray(affine)[:3, 3]
