"""Core data model for 4D flow volumes: acquisition metadata, complex
channels, velocity fields, masks, and the phase/velocity conversions.

Conventions used throughout the package:

* array shape is (Nx, Ny, Nz, Nt) for 4D data and (Nx, Ny, Nz) for 3D,
* spacing is millimetres, velocities cm/s, phases radians,
* wrapped phases live in [-pi, pi],
* all objects are treated as immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BundleFormatError(ValueError):
    """Raised when an on-disk bundle, mask, or velocity file is malformed."""


def _as_tuple(values, n, kind, name):
    t = tuple(kind(v) for v in np.atleast_1d(values))
    if len(t) == 1 and n > 1:
        t = t * n
    if len(t) != n:
        raise ValueError(f"{name} must have {n} entries, got {len(t)}")
    return t


@dataclass(frozen=True)
class AcquisitionMeta:
    """Grid geometry and encoding parameters of one acquisition."""

    dims: tuple[int, int, int, int]
    spacing: tuple[float, float, float]
    frame_interval: float
    venc: tuple[float, float, float]
    snr_nominal: float | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_tuple(self.dims, 4, int, "dims"))
        object.__setattr__(self, "spacing", _as_tuple(self.spacing, 3, float, "spacing"))
        object.__setattr__(self, "venc", _as_tuple(self.venc, 3, float, "venc"))
        if any(d < 1 for d in self.dims):
            raise ValueError(f"all dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"all spacings must be > 0, got {self.spacing}")
        if any(v <= 0 for v in self.venc):
            raise ValueError(f"all venc must be > 0, got {self.venc}")
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be > 0")
        if self.snr_nominal is not None and self.snr_nominal <= 0:
            raise ValueError("snr_nominal must be > 0 when given")

    @property
    def n_frames(self) -> int:
        return self.dims[3]

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.dims[:3]


@dataclass(frozen=True)
class ComplexChannel:
    """One complex phase-contrast channel.

    ``encoding_axis`` is 0/1/2 for the velocity-encoded channels and None
    for the reference channel.
    """

    values: np.ndarray
    encoding_axis: int | None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4:
            raise ValueError(f"channel values must be 4D, got ndim={v.ndim}")
        if not np.iscomplexobj(v):
            raise ValueError("channel values must be complex")
        if not np.all(np.isfinite(v)):
            raise ValueError("channel values must be finite")
        object.__setattr__(self, "values", np.ascontiguousarray(v, dtype=np.complex64))
        if self.encoding_axis is not None and self.encoding_axis not in (0, 1, 2):
            raise ValueError(f"encoding_axis must be 0, 1, 2 or None, got {self.encoding_axis}")


# Tolerance for the [-pi, pi] phase-range check.  float32 rounds pi up to
# 3.1415927..., slightly above the float64 value, so an exact bound rejects
# valid data.
PHASE_RANGE_TOL = 1e-6


@dataclass(frozen=True)
class FlowBundle:
    """A complete 4D flow acquisition.

    ``channels`` holds (reference, enc_x, enc_y, enc_z).  ``magnitude`` is
    the modulus of the reference channel and ``phases`` are the phase
    differences arg(encoding * conj(reference)), one per encoding axis.
    Arrays are stored as float32/complex64 so that file round-trips are
    bit-exact.
    """

    meta: AcquisitionMeta
    channels: tuple[ComplexChannel, ComplexChannel, ComplexChannel, ComplexChannel]
    magnitude: np.ndarray
    phases: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("bundle needs four channels (reference + three encodings)")
        axes = [c.encoding_axis for c in self.channels]
        if axes != [None, 0, 1, 2]:
            raise ValueError(f"channels must be ordered (reference, x, y, z), got axes {axes}")
        mag = np.ascontiguousarray(self.magnitude, dtype=np.float32)
        phs = tuple(np.ascontiguousarray(p, dtype=np.float32) for p in self.phases)
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "phases", phs)
        for c in self.channels:
            if c.values.shape != self.meta.dims:
                raise ValueError(
                    f"channel shape {c.values.shape} does not match dims {self.meta.dims}")
        if mag.shape != self.meta.dims:
            raise ValueError(f"magnitude shape {mag.shape} does not match dims {self.meta.dims}")
        if not np.all(np.isfinite(mag)):
            raise ValueError("magnitude must be finite")
        if mag.min() < 0:
            raise ValueError("magnitude must be non-negative")
        for i, p in enumerate(phs):
            if p.shape != self.meta.dims:
                raise ValueError(f"phase {i} shape {p.shape} does not match dims {self.meta.dims}")
            if not np.all(np.isfinite(p)):
                raise ValueError(f"phase {i} must be finite")
            lim = np.pi + PHASE_RANGE_TOL
            if np.abs(p).max() > lim:
                raise ValueError(
                    f"phase {i} has values outside [-pi, pi] (max |phase| = {np.abs(p).max():.6g})")

    @classmethod
    def from_channels(cls, meta, reference, enc_x, enc_y, enc_z) -> "FlowBundle":
        """Build a bundle from raw complex channel arrays, deriving
        magnitude and phase differences."""
        channels = (
            ComplexChannel(reference, None),
            ComplexChannel(enc_x, 0),
            ComplexChannel(enc_y, 1),
            ComplexChannel(enc_z, 2),
        )
        ref = channels[0].values
        magnitude = np.abs(ref)
        phases = tuple(np.angle(c.values * np.conj(ref)) for c in channels[1:])
        return cls(meta=meta, channels=channels, magnitude=magnitude, phases=phases)

    @property
    def reference(self) -> ComplexChannel:
        return self.channels[0]

    @property
    def encodings(self) -> tuple[ComplexChannel, ComplexChannel, ComplexChannel]:
        return self.channels[1:]


@dataclass(frozen=True)
class VelocityField:
    """Three-component, time-resolved velocity in cm/s."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    meta: AcquisitionMeta

    def __post_init__(self):
        for name, comp in zip("uvw", (self.u, self.v, self.w)):
            arr = np.asarray(comp)
            if arr.shape != self.meta.dims:
                raise ValueError(
                    f"velocity component {name} shape {arr.shape} != dims {self.meta.dims}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"velocity component {name} must be finite")
            object.__setattr__(self, name, np.asarray(arr, dtype=np.float64))

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.u, self.v, self.w)

    def stacked(self) -> np.ndarray:
        """Components stacked on a leading axis: shape (3, Nx, Ny, Nz, Nt)."""
        return np.stack(self.components, axis=0)

    def speed(self) -> np.ndarray:
        return np.sqrt(self.u**2 + self.v**2 + self.w**2)


@dataclass(frozen=True)
class MaskVolume:
    """Boolean voxel labels, static (3D) or per cardiac phase (4D)."""

    labels: np.ndarray
    meta: AcquisitionMeta

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim not in (3, 4):
            raise ValueError(f"mask must be 3D or 4D, got ndim={arr.ndim}")
        if arr.shape[:3] != self.meta.spatial_dims:
            raise ValueError(
                f"mask spatial shape {arr.shape[:3]} != dims {self.meta.spatial_dims}")
        if arr.ndim == 4 and arr.shape[3] != self.meta.n_frames:
            raise ValueError(
                f"mask has {arr.shape[3]} frames, acquisition has {self.meta.n_frames}")
        object.__setattr__(self, "labels", np.ascontiguousarray(arr, dtype=bool))

    @property
    def is_static(self) -> bool:
        return self.labels.ndim == 3

    def frame(self, t: int) -> np.ndarray:
        """3D labels at frame t (static masks are the same for every t)."""
        if self.is_static:
            return self.labels
        return self.labels[..., t]


def wrap(phase):
    """Wrap phase (radians) into [-pi, pi].

    Values already inside the interval pass through unchanged, which makes
    the operation exactly idempotent.
    """
    arr = np.asarray(phase, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap requires finite phase values")
    wrapped = np.mod(arr + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(np.abs(arr) <= np.pi, arr, wrapped)
    if np.ndim(phase) == 0:
        return float(out)
    return out


def phase_to_velocity(phase, venc: float):
    """Convert phase (radians) to velocity (cm/s): venc * phase / pi."""
    if venc <= 0:
        raise ValueError(f"venc must be > 0, got {venc}")
    arr = np.asarray(phase, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("phase_to_velocity requires finite phase values")
    out = venc * arr / np.pi
    if np.ndim(phase) == 0:
        return float(out)
    return out


def velocity_to_phase(u, venc: float):
    """Convert velocity (cm/s) to encoding phase (radians): pi * u / venc.

    The result may lie outside [-pi, pi]; apply :func:`wrap` to obtain the
    measured (aliased) phase.
    """
    if venc <= 0:
        raise ValueError(f"venc must be > 0, got {venc}")
    arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("velocity_to_phase requires finite velocities")
    out = np.pi * arr / venc
    if np.ndim(u) == 0:
        return float(out)
    return out


def raw_velocity(bundle: FlowBundle) -> VelocityField:
    """Velocities straight from the wrapped phases (aliased where the true
    speed exceeds venc)."""
    comps = [phase_to_velocity(p, v) for p, v in zip(bundle.phases, bundle.meta.venc)]
    return VelocityField(u=comps[0], v=comps[1], w=comps[2], meta=bundle.meta)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbour.

    Neighbours outside the grid do not count as background, so a mask that
    touches the volume edge has no boundary there.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("boundary_voxels expects a 3D mask")
    out = np.zeros_like(mask)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        out[lo] |= mask[lo] & ~mask[hi]
        out[hi] |= mask[hi] & ~mask[lo]
    return out
