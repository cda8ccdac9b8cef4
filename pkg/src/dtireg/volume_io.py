"""Volume types and the DTV container format.

A DTV file is one UTF-8 JSON header line terminated by ``\\n`` followed by a
raw little-endian float32 payload. Arrays are written x-fastest; in memory
every volume is a float64 array indexed ``[x, y, z]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError, TruncationError, ValidationError

TENSOR_COMPONENTS = ("xx", "xy", "xz", "yy", "yz", "zz")
# (row, col) of each stored component in the 3x3 matrix
TENSOR_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))

_PAYLOAD_DTYPE = np.dtype("<f4")


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("geometry needs three dims, spacings and origins")
        if any(d < 2 for d in dims):
            raise ValidationError(f"dims must be >= 2 along every axis, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"spacing must be positive and finite, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        """Physical position of the last voxel center relative to the first."""
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def voxel_centers(self) -> np.ndarray:
        """Voxel positions in mm, shape ``dims + (3,)``."""
        grids = np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")
        return np.stack(grids, axis=-1)

    def to_index(self, points) -> np.ndarray:
        """Convert mm positions to continuous voxel indices."""
        return (np.asarray(points, dtype=float) - np.array(self.origin)) / np.array(self.spacing)

    def to_header(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{what} contains non-finite value at index {tuple(int(i) for i in bad)}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    geometry: GridGeometry
    samples: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.samples)
        if arr.shape != self.geometry.dims:
            raise ValidationError(f"samples shape {arr.shape} != dims {self.geometry.dims}")
        _check_finite(arr, "ScalarVolume")
        object.__setattr__(self, "samples", arr)


@dataclass(frozen=True, eq=False)
class TensorVolume:
    """Six tensor component images ``(xx, xy, xz, yy, yz, zz)``.

    ``valid`` marks voxels holding a fitted tensor; it is not stored on disk
    and defaults to all-true.
    """

    geometry: GridGeometry
    components: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        arr = _frozen(self.components)
        if arr.shape != (6,) + self.geometry.dims:
            raise ValidationError(f"components shape {arr.shape} != (6,) + {self.geometry.dims}")
        _check_finite(arr, "TensorVolume")
        object.__setattr__(self, "components", arr)
        valid = np.ones(self.geometry.dims, bool) if self.valid is None else self.valid
        valid = _frozen(valid, dtype=bool)
        if valid.shape != self.geometry.dims:
            raise ValidationError("valid mask shape does not match geometry")
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_matrices(cls, geometry, matrices, valid=None) -> "TensorVolume":
        m = np.asarray(matrices, dtype=float)
        comps = np.stack([0.5 * (m[..., r, c] + m[..., c, r]) for r, c in TENSOR_INDEX])
        return cls(geometry, comps, valid)

    def matrices(self) -> np.ndarray:
        """Assembled symmetric matrices, shape ``dims + (3, 3)``."""
        out = np.empty(self.geometry.dims + (3, 3))
        for comp, (r, c) in zip(self.components, TENSOR_INDEX):
            out[..., r, c] = comp
            out[..., c, r] = comp
        return out

    def component(self, i: int) -> ScalarVolume:
        return ScalarVolume(self.geometry, self.components[i])


@dataclass(frozen=True, eq=False)
class DwiSet:
    s0: ScalarVolume
    dwis: tuple
    gradients: np.ndarray
    bvalue: float

    def __post_init__(self):
        dwis = tuple(self.dwis)
        g = np.array(self.gradients, dtype=float)
        if g.ndim != 2 or g.shape[1] != 3:
            raise ValidationError("gradients must be a K x 3 array")
        if len(dwis) != g.shape[0]:
            raise ValidationError(f"{len(dwis)} DW volumes but {g.shape[0]} gradients")
        if len(dwis) < 6:
            raise ValidationError(f"at least 6 DW volumes are required, got {len(dwis)}")
        norms = np.linalg.norm(g, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValidationError("gradient directions must be nonzero and finite")
        b = float(self.bvalue)
        if not (np.isfinite(b) and b > 0):
            raise ValidationError(f"b-value must be positive, got {self.bvalue}")
        for v in dwis:
            if v.geometry != self.s0.geometry:
                raise ValidationError("all DW volumes must share the S0 geometry")
        object.__setattr__(self, "dwis", dwis)
        object.__setattr__(self, "gradients", _frozen(g / norms[:, None]))
        object.__setattr__(self, "bvalue", b)

    @property
    def geometry(self) -> GridGeometry:
        return self.s0.geometry

    def signals(self) -> np.ndarray:
        """DW signals stacked as ``(K, nx, ny, nz)``."""
        return np.stack([v.samples for v in self.dwis])


@dataclass(frozen=True, eq=False)
class VectorField:
    """Displacement in mm at every voxel center, shape ``dims + (3,)``."""

    geometry: GridGeometry
    displacement: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.displacement)
        if arr.shape != self.geometry.dims + (3,):
            raise ValidationError(f"displacement shape {arr.shape} != {self.geometry.dims + (3,)}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("displacement field contains non-finite values")
        object.__setattr__(self, "displacement", arr)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=-1)


# --------------------------------------------------------------------------
# container I/O

def _xfast(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype=_PAYLOAD_DTYPE).ravel(order="F").tobytes()


def write_container(path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    """Write a header dict and 3D arrays (each x-fastest) to ``path``."""
    line = json.dumps(header) + "\n"
    payload = b"".join(_xfast(a) for a in arrays)
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(payload)


def read_container(path):
    """Return ``(header, flat float64 payload)``; raises on malformed files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("header: missing newline terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header: not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError("header: top level must be an object")
    body = raw[nl + 1:]
    if len(body) % 4:
        raise TruncationError(f"payload length {len(body)} is not a multiple of 4 bytes")
    flat = np.frombuffer(body, dtype=_PAYLOAD_DTYPE).astype(np.float64)
    return header, flat


def _require(header, key, kind=None):
    if key not in header:
        raise FormatError(f"header field '{key}' is missing")
    value = header[key]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(f"header field '{key}' has wrong type {type(value).__name__}")
    return value


def _triple(header, key, cast):
    value = _require(header, key, list)
    if len(value) != 3:
        raise FormatError(f"header field '{key}' must have 3 entries")
    try:
        return tuple(cast(v) for v in value)
    except (TypeError, ValueError):
        raise FormatError(f"header field '{key}' has non-numeric entries") from None


def geometry_from_header(header) -> GridGeometry:
    dims = _triple(header, "dims", int)
    spacing = _triple(header, "spacing", float)
    origin = _triple(header, "origin", float)
    try:
        return GridGeometry(dims, spacing, origin)
    except ValidationError as exc:
        raise FormatError(f"header field 'dims'/'spacing'/'origin': {exc}") from None


def split_payload(flat, geometry, count, inner=()) -> list:
    """Cut a flat payload into ``count`` x-fastest volumes."""
    n = geometry.size
    expected = n * count
    if flat.size != expected:
        raise TruncationError(f"payload has {flat.size} values, header implies {expected}")
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        vol, rem = divmod(int(bad[0]), n)
        idx = np.unravel_index(rem, geometry.dims, order="F")
        raise DataError(f"non-finite value in volume {vol} at voxel {tuple(int(i) for i in idx)}")
    return [flat[i * n:(i + 1) * n].reshape(geometry.dims, order="F") for i in range(count)]


def save_volume(obj, path) -> None:
    """Write a volume object as a DTV file."""
    if isinstance(obj, ScalarVolume):
        header = {"kind": "scalar", **obj.geometry.to_header()}
        arrays = [obj.samples]
    elif isinstance(obj, TensorVolume):
        header = {"kind": "tensor", **obj.geometry.to_header(), "components": 6}
        arrays = list(obj.components)
    elif isinstance(obj, DwiSet):
        header = {"kind": "dwi", **obj.geometry.to_header(),
                  "gradients": obj.gradients.tolist(), "bvalue": obj.bvalue}
        arrays = [obj.s0.samples] + [v.samples for v in obj.dwis]
    elif isinstance(obj, VectorField):
        header = {"kind": "field", **obj.geometry.to_header(), "channels": 3}
        arrays = [obj.displacement[..., c] for c in range(3)]
    elif hasattr(obj, "to_container"):
        header, arrays = obj.to_container()
    else:
        raise ValidationError(f"cannot save object of type {type(obj).__name__}")
    for a in arrays:
        a = np.asarray(a)
        if not np.all(np.isfinite(a)):
            raise ValidationError("refusing to save non-finite samples")
        if np.any(np.abs(a[np.isfinite(a)]) > np.finfo(np.float32).max):
            raise ValidationError("sample magnitude exceeds float32 range")
    write_container(path, header, arrays)


def load_volume(path):
    """Read a DTV file and return the object it holds."""
    header, flat = read_container(path)
    kind = _require(header, "kind", str)
    if kind == "ffd":
        from .ffd import FfdTransform
        return FfdTransform.from_container(header, flat)
    geometry = geometry_from_header(header)
    if kind == "scalar":
        (arr,) = split_payload(flat, geometry, 1)
        return ScalarVolume(geometry, arr)
    if kind == "tensor":
        if _require(header, "components", int) != 6:
            raise FormatError("header field 'components' must equal 6")
        return TensorVolume(geometry, np.stack(split_payload(flat, geometry, 6)))
    if kind == "dwi":
        grads = _require(header, "gradients", list)
        bvalue = _require(header, "bvalue", (int, float))
        try:
            g = np.array(grads, dtype=float)
        except (TypeError, ValueError):
            raise FormatError("header field 'gradients' is not numeric") from None
        if g.ndim != 2 or g.shape[1] != 3:
            raise FormatError("header field 'gradients' must be a list of 3-vectors")
        vols = split_payload(flat, geometry, 1 + g.shape[0])
        try:
            return DwiSet(ScalarVolume(geometry, vols[0]),
                          tuple(ScalarVolume(geometry, v) for v in vols[1:]), g, bvalue)
        except ValidationError as exc:
            raise FormatError(f"header field 'gradients'/'bvalue': {exc}") from None
    if kind == "field":
        if _require(header, "channels", int) != 3:
            raise FormatError("header field 'channels' must equal 3")
        parts = split_payload(flat, geometry, 3)
        return VectorField(geometry, np.stack(parts, axis=-1))
    raise FormatError(f"header field 'kind' has unknown value '{kind}'")


# --------------------------------------------------------------------------
# figure export

def _slice(arr, axis, index):
    """2D image with rows top-to-bottom and columns left-to-right."""
    if not 0 <= index < arr.shape[axis]:
        raise ValidationError(f"slice index {index} outside [0, {arr.shape[axis]}) on axis {axis}")
    plane = np.take(arr, index, axis=axis)
    # remaining axes are (a, b) with a < b; show b along rows, a along columns
    return plane.T


def _to_byte(plane):
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.zeros(plane.shape, np.uint8)
    return np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_slice_ppm(vol, axis: int, index: int, path) -> None:
    """Write one slice as a binary PPM.

    ``vol`` is a ScalarVolume (gray) or a sequence of three ScalarVolumes
    written to the file's red, green and blue channels in that order. Each
    channel is min-max scaled to 0..255; a constant channel maps to 0.
    """
    if isinstance(vol, ScalarVolume):
        channels = [vol, vol, vol]
    else:
        channels = list(vol)
        if len(channels) != 3:
            raise ValidationError("RGB export needs exactly three volumes")
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    planes = [_to_byte(_slice(c.samples, axis, index)) for c in channels]
    img = np.stack(planes, axis=-1)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`export_slice_ppm`; returns (h, w, 3) uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w, 3)
