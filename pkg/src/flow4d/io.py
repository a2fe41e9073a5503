"""File formats for bundles, masks, and velocity fields.

A bundle is a directory with one text header and one raw array file per
payload:

    header.txt        key = value lines (dims, spacing, venc, ...)
    channel_ref.raw   complex64, interleaved real/imag float32
    channel_x.raw     (likewise for y, z)
    magnitude.raw     float32
    phase_x.raw       float32 (likewise for y, z)

All raw files are little-endian and laid out x-fastest, then y, z, t
(i.e. Fortran order of the (Nx, Ny, Nz, Nt) array).  Masks and velocity
fields use the same scheme with uint8 and float32 payloads respectively.
VTK export writes legacy ASCII structured-points files.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .volume import (
    AcquisitionMeta,
    BundleFormatError,
    FlowBundle,
    ComplexChannel,
    MaskVolume,
    VelocityField,
)

_INDEX_ORDER = "x-fastest (x, y, z, t)"

_CHANNEL_FILES = ("channel_ref.raw", "channel_x.raw", "channel_y.raw", "channel_z.raw")
_PHASE_FILES = ("phase_x.raw", "phase_y.raw", "phase_z.raw")


def _write_header(path: Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items() if v is not None]
    path.write_text("\n".join(lines) + "\n")


def _read_header(path: Path) -> dict:
    if not path.is_file():
        raise BundleFormatError(f"missing header file: {path}")
    entries = {}
    for raw_line in path.read_text().splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise BundleFormatError(f"malformed header line in {path}: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _meta_entries(meta: AcquisitionMeta, fmt: str) -> dict:
    nx, ny, nz, nt = meta.dims
    dx, dy, dz = meta.spacing
    vx, vy, vz = meta.venc
    return {
        "format": fmt,
        "version": 1,
        "nx": nx, "ny": ny, "nz": nz, "nt": nt,
        "dx_mm": dx, "dy_mm": dy, "dz_mm": dz,
        "frame_interval_ms": meta.frame_interval,
        "venc_x_cm_s": vx, "venc_y_cm_s": vy, "venc_z_cm_s": vz,
        "snr_nominal": meta.snr_nominal,
        "seed": meta.seed,
        "endianness": "little",
        "dtype": "float32",
        "index_order": _INDEX_ORDER,
    }


def _parse_meta(entries: dict, path: Path) -> AcquisitionMeta:
    try:
        dims = tuple(int(entries[k]) for k in ("nx", "ny", "nz", "nt"))
        spacing = tuple(float(entries[k]) for k in ("dx_mm", "dy_mm", "dz_mm"))
        venc = tuple(float(entries[k]) for k in ("venc_x_cm_s", "venc_y_cm_s", "venc_z_cm_s"))
        frame_interval = float(entries["frame_interval_ms"])
    except KeyError as exc:
        raise BundleFormatError(f"header in {path} is missing key {exc}") from exc
    snr = entries.get("snr_nominal")
    seed = entries.get("seed")
    try:
        return AcquisitionMeta(
            dims=dims,
            spacing=spacing,
            frame_interval=frame_interval,
            venc=venc,
            snr_nominal=float(snr) if snr is not None else None,
            seed=int(seed) if seed is not None else None,
        )
    except ValueError as exc:
        raise BundleFormatError(f"invalid metadata in {path}: {exc}") from exc


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    # tobytes(order="F") makes the first index (x) vary fastest on disk.
    path.write_bytes(np.asarray(arr).astype(dtype).tobytes(order="F"))


def _read_array(path: Path, dtype: str, shape: tuple) -> np.ndarray:
    if not path.is_file():
        raise BundleFormatError(f"missing array file: {path}")
    data = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    expected = int(np.prod(shape)) * itemsize
    if len(data) != expected:
        raise BundleFormatError(
            f"shape mismatch for {path}: header implies {expected} bytes "
            f"({shape} of {dtype}), file has {len(data)}")
    flat = np.frombuffer(data, dtype=dtype)
    arr = flat.reshape(shape, order="F")
    if not np.all(np.isfinite(arr)):
        raise BundleFormatError(f"non-finite values in {path}")
    return arr


def save_bundle(bundle: FlowBundle, path) -> None:
    """Write a bundle directory; the save/load round trip is bit-exact."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_header(path / "header.txt", _meta_entries(bundle.meta, "flow4d-bundle"))
    for fname, channel in zip(_CHANNEL_FILES, bundle.channels):
        _write_array(path / fname, channel.values, "<c8")
    _write_array(path / "magnitude.raw", bundle.magnitude, "<f4")
    for fname, phase in zip(_PHASE_FILES, bundle.phases):
        _write_array(path / fname, phase, "<f4")


def load_bundle(path) -> FlowBundle:
    path = Path(path)
    if not path.is_dir():
        raise BundleFormatError(f"bundle directory not found: {path}")
    meta = _parse_meta(_read_header(path / "header.txt"), path)
    dims = meta.dims
    channels = []
    for fname, axis in zip(_CHANNEL_FILES, (None, 0, 1, 2)):
        values = _read_array(path / fname, "<c8", dims)
        channels.append(ComplexChannel(values, axis))
    magnitude = _read_array(path / "magnitude.raw", "<f4", dims)
    phases = tuple(_read_array(path / f, "<f4", dims) for f in _PHASE_FILES)
    try:
        bundle = FlowBundle(meta=meta, channels=tuple(channels),
                            magnitude=magnitude, phases=phases)
    except ValueError as exc:
        raise BundleFormatError(f"invalid bundle at {path}: {exc}") from exc
    # Stored derived arrays must agree with the channels they came from.
    ref = bundle.reference.values
    if not np.allclose(bundle.magnitude, np.abs(ref), atol=1e-4):
        raise BundleFormatError(f"magnitude in {path} does not match reference channel")
    for i, (enc, phase) in enumerate(zip(bundle.encodings, bundle.phases)):
        derived = np.angle(enc.values * np.conj(ref))
        if not np.allclose(phase, derived, atol=1e-4):
            raise BundleFormatError(f"phase {i} in {path} does not match channels")
    return bundle


def save_mask(mask: MaskVolume, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = _meta_entries(mask.meta, "flow4d-mask")
    entries["dtype"] = "uint8"
    entries["per_phase"] = 0 if mask.is_static else 1
    _write_header(path / "header.txt", entries)
    _write_array(path / "labels.raw", mask.labels.astype(np.uint8), "<u1")


def load_mask(path) -> MaskVolume:
    path = Path(path)
    meta = _parse_meta(_read_header(path / "header.txt"), path)
    entries = _read_header(path / "header.txt")
    per_phase = int(entries.get("per_phase", 0))
    shape = meta.dims if per_phase else meta.spatial_dims
    raw = _read_array(path / "labels.raw", "<u1", shape)
    if raw.max(initial=0) > 1:
        raise BundleFormatError(f"mask labels in {path} must be 0/1")
    return MaskVolume(labels=raw.astype(bool), meta=meta)


def save_velocity(field: VelocityField, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_header(path / "header.txt", _meta_entries(field.meta, "flow4d-velocity"))
    for fname, comp in zip(("u.raw", "v.raw", "w.raw"), field.components):
        _write_array(path / fname, comp, "<f4")


def load_velocity(path) -> VelocityField:
    path = Path(path)
    meta = _parse_meta(_read_header(path / "header.txt"), path)
    comps = [_read_array(path / f, "<f4", meta.dims).astype(np.float64)
             for f in ("u.raw", "v.raw", "w.raw")]
    return VelocityField(u=comps[0], v=comps[1], w=comps[2], meta=meta)


def export_vtk(field: VelocityField, mask: MaskVolume, frame: int, path) -> None:
    """Write one frame as a legacy ASCII structured-points VTK file with a
    ``velocity`` vector field and a ``mask`` scalar."""
    nt = field.meta.n_frames
    if not 0 <= frame < nt:
        raise ValueError(f"frame {frame} out of range [0, {nt})")
    nx, ny, nz = field.meta.spatial_dims
    dx, dy, dz = field.meta.spacing
    labels = mask.frame(frame)

    vectors = np.column_stack([
        comp[..., frame].ravel(order="F") for comp in field.components
    ])
    scalars = labels.astype(np.uint8).ravel(order="F")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"flow4d velocity frame {frame}\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {dx:g} {dy:g} {dz:g}\n")
        fh.write(f"POINT_DATA {nx * ny * nz}\n")
        fh.write("VECTORS velocity float\n")
        for row in vectors:
            fh.write(f"{row[0]:.6g} {row[1]:.6g} {row[2]:.6g}\n")
        fh.write("SCALARS mask unsigned_char 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for value in scalars:
            fh.write(f"{value}\n")


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(root) -> str:
    """Deterministic content hash of every file under a directory."""
    import hashlib

    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(os.fspath(p.relative_to(root)).encode())
            h.update(bytes.fromhex(file_sha256(p)))
    return h.hexdigest()
