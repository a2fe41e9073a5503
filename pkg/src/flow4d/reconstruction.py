"""Physics-constrained velocity reconstruction inside a vessel mask.

Each outer iteration re-wraps the current velocity estimate into phases,
solves a continuity-constrained least-squares unwrapping problem per
frame, removes localized outliers with a normalized median test, and
denoises in a truncated POD basis whose modes are selected by spectral
entropy.  The loop stops when the retained POD energy stabilises and the
previous iterate is returned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.fft import dctn
from scipy.sparse.linalg import lsqr
from sklearn.cluster import DBSCAN

from ._windows import window_sum as _window_sum
from .volume import (
    FlowBundle,
    MaskVolume,
    VelocityField,
    boundary_voxels,
    phase_to_velocity,
    raw_velocity,
    velocity_to_phase,
    wrap,
)


class ReconstructionError(RuntimeError):
    """Reconstruction cannot proceed (empty mask, degenerate problem)."""


# ---------------------------------------------------------------------------
# wrapped gradient observations

@dataclass(frozen=True)
class GradientObservations:
    """Wrapped forward differences along one axis, between in-mask pairs.

    ``lower``/``upper`` are flat C-order voxel indices of each pair and
    ``weights`` are inverse variances of the observations, estimated over a
    3x3x3 neighbourhood and floored.
    """

    axis: int
    lower: np.ndarray
    upper: np.ndarray
    values: np.ndarray
    weights: np.ndarray


def wrapped_gradients(psi: np.ndarray, mask: np.ndarray,
                      var_floor: float = 1e-4) -> list[GradientObservations]:
    """Per-axis wrapped gradient observations of a 3D phase volume."""
    psi = np.asarray(psi, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if psi.ndim != 3 or mask.shape != psi.shape:
        raise ValueError("wrapped_gradients expects matching 3D phase and mask")
    dims = psi.shape
    flat = np.arange(int(np.prod(dims))).reshape(dims)
    out = []
    total_pairs = 0
    for axis in range(3):
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        head, tail = tuple(head), tuple(tail)
        valid = mask[head] & mask[tail]
        g = wrap(psi[tail] - psi[head])
        # Embed the valid gradients at their lower voxel to estimate a local
        # variance over 3x3x3 windows, counting only valid entries.
        grad_embedded = np.zeros(dims)
        grad_embedded[head] = np.where(valid, g, 0.0)
        vgrid = np.zeros(dims)
        vgrid[head] = valid

        count = _window_sum(vgrid, 3)
        mean = np.zeros(dims)
        np.divide(_window_sum(grad_embedded, 3), count, out=mean, where=count > 0)
        meansq = np.zeros(dims)
        np.divide(_window_sum(grad_embedded**2, 3), count, out=meansq,
                  where=count > 0)
        variance = np.clip(meansq - mean**2, var_floor, None)

        lower = flat[head][valid]
        upper = flat[tail][valid]
        values = g[valid]
        weights = 1.0 / variance[head][valid]
        total_pairs += lower.size
        out.append(GradientObservations(axis=axis, lower=lower, upper=upper,
                                        values=values, weights=weights))
    if total_pairs == 0:
        raise ValueError("mask has no in-mask voxel pairs along any axis")
    return out


@dataclass(frozen=True)
class UnwrapProblem:
    """One frame of the joint three-component unwrapping problem."""

    psi: tuple[np.ndarray, np.ndarray, np.ndarray]
    mask: np.ndarray
    observations: tuple[list[GradientObservations], ...]
    venc: tuple[float, float, float]
    spacing_mm: tuple[float, float, float]
    alpha: float
    boundary_value: tuple[float, float, float]


def build_unwrap_problem(phases, mask, venc, spacing_mm, alpha=0.01,
                         var_floor=1e-4) -> UnwrapProblem:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ReconstructionError("empty mask; unwrapping problem is ill-posed")
    psi = tuple(np.asarray(p, dtype=np.float64) for p in phases)
    observations = tuple(wrapped_gradients(p, mask, var_floor=var_floor) for p in psi)
    boundary = boundary_voxels(mask)
    if not boundary.any():
        boundary = mask
    bvals = tuple(float(np.median(p[boundary])) for p in psi)
    return UnwrapProblem(psi=psi, mask=mask, observations=observations,
                         venc=tuple(float(v) for v in venc),
                         spacing_mm=tuple(float(s) for s in spacing_mm),
                         alpha=float(alpha), boundary_value=bvals)


@dataclass(frozen=True)
class UnwrapResult:
    phi: tuple[np.ndarray, np.ndarray, np.ndarray]
    residual: float
    iterations: int
    converged: bool


def continuity_unwrap(problem: UnwrapProblem, tol: float = 1e-8,
                      iter_factor: float = 10.0) -> UnwrapResult:
    """Solve the joint unwrapping least-squares problem.

    Stacked rows: weighted gradient misfits per component and axis, the
    divergence of the implied velocity field (forward differences, falling
    back to one-sided backward differences at mask boundaries), a Tikhonov
    ridge, and one zero-mean gauge row per component.  After the solve,
    each component is shifted so the median unwrapped phase over the mask
    boundary equals the median wrapped boundary phase; per-voxel Dirichlet
    pinning would bias wall-adjacent voxels wherever the boundary phase is
    not spatially uniform.
    """
    mask = problem.mask
    dims = mask.shape
    n_vox = int(np.prod(dims))
    rank = np.full(n_vox, -1, dtype=np.int64)
    mask_flat = np.flatnonzero(mask.ravel())
    m = mask_flat.size
    rank[mask_flat] = np.arange(m)
    n_unknowns = 3 * m

    rows, cols, vals, rhs = [], [], [], []
    row_count = 0

    def add_rows(r, c, v):
        rows.append(np.asarray(r, dtype=np.int64))
        cols.append(np.asarray(c, dtype=np.int64))
        vals.append(np.asarray(v, dtype=np.float64))

    # gradient misfit rows
    for comp in range(3):
        offset = comp * m
        for obs in problem.observations[comp]:
            k = obs.lower.size
            if k == 0:
                continue
            w = np.sqrt(obs.weights)
            r = row_count + np.arange(k)
            add_rows(r, offset + rank[obs.upper], w)
            add_rows(r, offset + rank[obs.lower], -w)
            rhs.append(w * obs.values)
            row_count += k

    # divergence rows, one per mask voxel
    flat = np.arange(n_vox).reshape(dims)
    for comp in range(3):
        axis = comp
        scale = problem.venc[comp] / (np.pi * problem.spacing_mm[axis] / 10.0)
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        head, tail = tuple(head), tuple(tail)
        fwd = np.zeros(dims, dtype=bool)
        fwd[head] = mask[head] & mask[tail]
        bwd = np.zeros(dims, dtype=bool)
        bwd[tail] = mask[tail] & mask[head]
        bwd &= ~fwd
        offset = comp * m

        vox = flat[mask & fwd]
        nb = np.zeros(dims, dtype=np.int64)
        nb[head] = flat[tail]
        r = row_count + rank[vox]
        add_rows(r, offset + rank[nb.ravel()[vox]], np.full(vox.size, scale))
        add_rows(r, offset + rank[vox], np.full(vox.size, -scale))

        vox_b = flat[mask & bwd]
        pb = np.zeros(dims, dtype=np.int64)
        pb[tail] = flat[head]
        r = row_count + rank[vox_b]
        add_rows(r, offset + rank[vox_b], np.full(vox_b.size, scale))
        add_rows(r, offset + rank[pb.ravel()[vox_b]], np.full(vox_b.size, -scale))
    rhs.append(np.zeros(m))
    row_count += m

    # ridge rows
    if problem.alpha > 0:
        r = row_count + np.arange(n_unknowns)
        add_rows(r, np.arange(n_unknowns), np.full(n_unknowns, np.sqrt(problem.alpha)))
        rhs.append(np.zeros(n_unknowns))
        row_count += n_unknowns

    # zero-mean gauge per component (the level is reset from the boundary
    # median after the solve)
    for comp in range(3):
        add_rows(np.full(m, row_count), comp * m + np.arange(m),
                 np.full(m, 1.0 / np.sqrt(m)))
        rhs.append(np.zeros(1))
        row_count += 1

    a = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row_count, n_unknowns)).tocsr()
    b = np.concatenate(rhs)

    iter_lim = max(100, int(iter_factor * np.sqrt(n_unknowns)))
    x, istop, itn, r1norm = lsqr(a, b, atol=tol, btol=tol, iter_lim=iter_lim)[:4]
    # istop 7 means the iteration cap was reached; the best iterate is still
    # returned, flagged through ``converged``.
    converged = istop in (0, 1, 2)

    boundary = boundary_voxels(mask)
    if not boundary.any():
        boundary = mask
    phi = []
    for comp in range(3):
        grid = np.zeros(dims)
        grid.ravel()[mask_flat] = x[comp * m:(comp + 1) * m]
        shift = problem.boundary_value[comp] - float(np.median(grid[boundary]))
        grid[mask] += shift
        phi.append(grid)
    residual = float(r1norm / max(np.linalg.norm(b), 1e-300))
    return UnwrapResult(phi=tuple(phi), residual=residual,
                        iterations=int(itn), converged=converged)


# ---------------------------------------------------------------------------
# universal outlier detection

_OFFSETS_26 = [(dx, dy, dz)
               for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
               if (dx, dy, dz) != (0, 0, 0)]


def _neighbor_table(dims) -> np.ndarray:
    """Flat indices of the 26 neighbours of every voxel, with coordinates
    clamped at the volume border (duplicating edge voxels)."""
    dims = tuple(dims)
    coords = np.indices(dims).reshape(3, -1).T
    table = np.empty((coords.shape[0], len(_OFFSETS_26)), dtype=np.int64)
    upper = np.asarray(dims) - 1
    for k, off in enumerate(_OFFSETS_26):
        p = np.clip(coords + np.asarray(off), 0, upper)
        table[:, k] = np.ravel_multi_index(p.T, dims)
    return table


def _uod_pass(vals, table, tau, eps):
    """One detect-and-replace sweep; returns (flags, median replacements)."""
    nb = vals[table]
    med = np.median(nb, axis=1)
    res = np.abs(vals - med)
    den = np.median(np.abs(nb - med[:, None]), axis=1)
    return res / (den + eps) > tau, med


def uod_correct(velocity: VelocityField, mask, tau: float = 2.0,
                eps: float = 1e-3, window: int = 3, max_passes: int = 15):
    """Normalized-median outlier correction per component and frame.

    Residual = |value - median of the 26 neighbours|, normalised by the
    median absolute deviation of those neighbours from their own median,
    plus ``eps``.  Neighbourhoods span the full grid with edge-clamped
    windows; the field is zero outside the mask, so wall voxels see the
    background zeros.  Detection and median replacement are repeated until
    no in-mask voxel is flagged (convergent cleaning), and the total flag
    count over all sweeps is returned alongside the corrected field.
    """
    if window != 3:
        raise ValueError("only the 3x3x3 neighbourhood is supported")
    mask3 = mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask, dtype=bool)
    if mask3.ndim != 3:
        raise ValueError("uod_correct expects a static 3D mask")
    table = _neighbor_table(mask3.shape)
    in_mask = mask3.ravel()
    nt = velocity.meta.n_frames

    corrected = [comp * mask3[..., None] for comp in velocity.components]
    flags = 0
    for comp in corrected:
        for t in range(nt):
            vals = comp[..., t].ravel().copy()
            for _ in range(max_passes):
                flag, med = _uod_pass(vals, table, tau, eps)
                flag &= in_mask
                if not flag.any():
                    break
                vals[flag] = med[flag]
                flags += int(flag.sum())
            comp[..., t] = vals.reshape(mask3.shape)
    field = VelocityField(u=corrected[0], v=corrected[1], w=corrected[2],
                          meta=velocity.meta)
    return field, flags


# ---------------------------------------------------------------------------
# POD denoising

@dataclass(frozen=True)
class PodBasis:
    """Snapshot POD of a masked velocity field.

    ``modes`` has shape (3*M, K) with orthonormal columns, ``coeffs`` is
    (K, Nt), and ``eigenvalues`` are the squared singular values in
    non-increasing order.  ``selected`` is the retained mode index set.
    """

    modes: np.ndarray
    coeffs: np.ndarray
    eigenvalues: np.ndarray
    mask: np.ndarray
    meta: object
    entropies: tuple[float, ...] | None = None
    selected: tuple[int, ...] | None = None
    degenerate: bool = False

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]


def pod_decompose(velocity: VelocityField, mask) -> PodBasis:
    """Snapshot POD via the SVD of the (3*M, Nt) masked data matrix."""
    mask3 = mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask, dtype=bool)
    if mask3.ndim != 3:
        raise ValueError("pod_decompose expects a static 3D mask")
    if not mask3.any():
        raise ReconstructionError("empty mask; POD is undefined")
    if velocity.meta.n_frames < 2:
        raise ValueError("POD needs at least two frames")
    m = int(mask3.sum())
    nt = velocity.meta.n_frames
    x = np.empty((3 * m, nt))
    for i, comp in enumerate(velocity.components):
        x[i * m:(i + 1) * m, :] = comp[mask3, :]
    if not x.any():
        return PodBasis(modes=np.zeros((3 * m, 1)), coeffs=np.zeros((1, nt)),
                        eigenvalues=np.zeros(1), mask=mask3, meta=velocity.meta,
                        degenerate=True)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return PodBasis(modes=u, coeffs=s[:, None] * vt, eigenvalues=s**2,
                    mask=mask3, meta=velocity.meta)


def mode_entropy(mode: np.ndarray, mask: np.ndarray, dims) -> float:
    """Shannon entropy (natural log) of the pooled, squared 3D DCT spectra
    of a spatial mode embedded back onto the grid (zeros outside the mask).

    A zero mode has entropy 0 by convention.
    """
    mask = np.asarray(mask, dtype=bool)
    dims = tuple(dims)
    m = int(mask.sum())
    mode = np.asarray(mode, dtype=np.float64)
    if mode.size != 3 * m:
        raise ValueError(f"mode length {mode.size} != 3 * mask voxels ({3 * m})")
    power = []
    for i in range(3):
        vol = np.zeros(dims)
        vol[mask] = mode[i * m:(i + 1) * m]
        coeffs = dctn(vol, type=2, norm="ortho")
        power.append((coeffs**2).ravel())
    p = np.concatenate(power)
    total = p.sum()
    if total == 0.0:
        return 0.0
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mode_entropies(basis: PodBasis) -> tuple[float, ...]:
    dims = basis.meta.spatial_dims
    return tuple(mode_entropy(basis.modes[:, k], basis.mask, dims)
                 for k in range(basis.n_modes))


def select_modes(entropies, eigenvalues) -> tuple[int, ...]:
    """Density-based selection of informative (low-entropy) modes.

    Entropies are clustered with DBSCAN (eps = median gap between sorted
    entropies, min_samples = 2); the retained set is the cluster holding
    the minimum-entropy mode.  If that mode is an unclustered outlier it is
    kept alone, and if no cluster forms at all the highest-energy mode is
    kept.
    """
    ent = np.asarray(entropies, dtype=np.float64)
    eig = np.asarray(eigenvalues, dtype=np.float64)
    if ent.size == 0:
        raise ValueError("select_modes needs at least one mode")
    if ent.size == 1:
        return (0,)
    gaps = np.diff(np.sort(ent))
    eps = max(float(np.median(gaps)), 1e-12)
    labels = DBSCAN(eps=eps, min_samples=2).fit_predict(ent.reshape(-1, 1))
    imin = int(np.argmin(ent))
    if labels[imin] != -1:
        return tuple(int(i) for i in np.flatnonzero(labels == labels[imin]))
    if np.all(labels == -1):
        return (int(np.argmax(eig)),)
    return (imin,)


def pod_filter(basis: PodBasis) -> VelocityField:
    """Reconstruction restricted to the selected modes, zero outside the
    mask."""
    if not basis.selected:
        raise ValueError("pod_filter requires a non-empty selected mode set")
    sel = list(basis.selected)
    x = basis.modes[:, sel] @ basis.coeffs[sel, :]
    m = int(basis.mask.sum())
    dims = basis.meta.dims
    comps = []
    for i in range(3):
        grid = np.zeros(dims)
        grid[basis.mask, :] = x[i * m:(i + 1) * m, :]
        comps.append(grid)
    return VelocityField(u=comps[0], v=comps[1], w=comps[2], meta=basis.meta)


def pod_denoise(velocity: VelocityField, mask) -> tuple[VelocityField, PodBasis]:
    basis = pod_decompose(velocity, mask)
    if basis.degenerate:
        basis = replace(basis, entropies=(0.0,), selected=(0,))
        return pod_filter(basis), basis
    entropies = mode_entropies(basis)
    selected = select_modes(entropies, basis.eigenvalues)
    basis = replace(basis, entropies=entropies, selected=selected)
    return pod_filter(basis), basis


# ---------------------------------------------------------------------------
# outer loop

@dataclass(frozen=True)
class ReconstructionParams:
    alpha: float = 0.01
    tau: float = 2.0
    eps: float = 1e-3
    solver_tol: float = 1e-8
    solver_iter_factor: float = 10.0
    gradient_var_floor: float = 1e-4
    max_outer_iterations: int = 10
    energy_tol: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be > 0")
        if self.solver_tol <= 0 or self.energy_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")


@dataclass(frozen=True)
class ReconState:
    """Per-iteration diagnostics of the outer loop."""

    iteration: int
    energy: float
    stop_ratio: float
    uod_flags: int
    n_modes_selected: int
    solver_residual: float
    solver_converged: bool
    converged: bool


@dataclass(frozen=True)
class ReconstructionResult:
    velocity: VelocityField
    history: tuple[ReconState, ...]
    converged: bool
    iterations: int


def _masked_velocity(field: VelocityField, mask3: np.ndarray) -> VelocityField:
    comps = [comp * mask3[..., None] for comp in field.components]
    return VelocityField(u=comps[0], v=comps[1], w=comps[2], meta=field.meta)


def reconstruct(bundle: FlowBundle, mask,
                params: ReconstructionParams | None = None) -> ReconstructionResult:
    """Outer reconstruction loop: unwrap, correct outliers, POD-denoise.

    The retained POD energy E is monitored; once its relative change drops
    below ``energy_tol`` the loop stops and the previous iterate is
    returned.  Velocities are identically zero outside the mask.
    """
    params = params or ReconstructionParams()
    mask3 = mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask, dtype=bool)
    if mask3.ndim == 4:
        mask3 = mask3.any(axis=3)
    if not mask3.any():
        raise ReconstructionError("empty mask; nothing to reconstruct")
    meta = bundle.meta
    venc = meta.venc
    nt = meta.n_frames

    current = _masked_velocity(raw_velocity(bundle), mask3)
    prev_field = None
    prev_energy = None
    history: list[ReconState] = []
    for i in range(1, params.max_outer_iterations + 1):
        psi = [wrap(velocity_to_phase(comp, v))
               for comp, v in zip(current.components, venc)]
        phi = [np.zeros(meta.dims) for _ in range(3)]
        residuals = []
        solver_ok = True
        for t in range(nt):
            problem = build_unwrap_problem(
                [p[..., t] for p in psi], mask3, venc, meta.spacing,
                alpha=params.alpha, var_floor=params.gradient_var_floor)
            res = continuity_unwrap(problem, tol=params.solver_tol,
                                    iter_factor=params.solver_iter_factor)
            for c in range(3):
                phi[c][..., t] = res.phi[c]
            residuals.append(res.residual)
            solver_ok = solver_ok and res.converged

        unwrapped = VelocityField(
            u=phase_to_velocity(phi[0], venc[0]),
            v=phase_to_velocity(phi[1], venc[1]),
            w=phase_to_velocity(phi[2], venc[2]), meta=meta)
        unwrapped = _masked_velocity(unwrapped, mask3)
        cleaned, flags = uod_correct(unwrapped, mask3, tau=params.tau, eps=params.eps)
        filtered, basis = pod_denoise(cleaned, mask3)
        energy = float(np.asarray(basis.eigenvalues)[list(basis.selected)].sum())

        if prev_energy is None:
            ratio = float("nan")
            stop = False
        elif prev_energy == 0.0:
            ratio = 0.0 if energy == 0.0 else float("inf")
            stop = energy == 0.0
        else:
            ratio = abs(energy - prev_energy) / prev_energy
            stop = ratio < params.energy_tol
        history.append(ReconState(
            iteration=i, energy=energy, stop_ratio=ratio, uod_flags=flags,
            n_modes_selected=len(basis.selected),
            solver_residual=float(np.mean(residuals)),
            solver_converged=solver_ok, converged=stop))
        if stop:
            return ReconstructionResult(velocity=prev_field,
                                        history=tuple(history),
                                        converged=True, iterations=i)
        prev_field = filtered
        prev_energy = energy
        current = filtered

    warnings.warn("reconstruct: outer loop hit the iteration cap without "
                  "stabilising", RuntimeWarning)
    return ReconstructionResult(velocity=prev_field, history=tuple(history),
                                converged=False,
                                iterations=params.max_outer_iterations)
