"""Unsupervised vessel segmentation from complex 4D flow data.

The pipeline: denoise the magnitude with a low-rank Tucker model keeping
only the dominant temporal mode, initialise a background mask with 3D
Sauvola thresholding, then iterate background-likelihood estimation from
magnitude (kernel density) and phase (standardized-difference statistic),
fuse the two likelihoods in log space with a TV-regularised weight field,
re-threshold, and clean the mask morphologically, until the adaptive
thresholds stabilise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.integrate import cumulative_trapezoid
from scipy.stats import gaussian_kde

from ._windows import window_count as _window_count
from ._windows import window_sum as _window_sum
from .volume import FlowBundle, MaskVolume, VelocityField, raw_velocity


class SegmentationError(RuntimeError):
    """Segmentation cannot proceed (degenerate data, empty masks, ...)."""


class DecompositionError(RuntimeError):
    """Tensor decomposition failed to converge."""


# ---------------------------------------------------------------------------
# Tucker magnitude denoising

def _unfold(tensor, mode):
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def _mode_dot(tensor, matrix, mode):
    moved = np.moveaxis(tensor, mode, 0)
    out = np.tensordot(matrix, moved, axes=(1, 0))
    return np.moveaxis(out, 0, mode)


@dataclass(frozen=True)
class TuckerModel:
    """Orthogonal Tucker factors and core for a 4D tensor."""

    core: np.ndarray
    factors: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    ranks: tuple[int, int, int, int]
    sweeps: int

    def reconstruct(self) -> np.ndarray:
        out = self.core
        for mode, factor in enumerate(self.factors):
            out = _mode_dot(out, factor, mode)
        return out

    def dominant_temporal(self) -> np.ndarray:
        """Reconstruction keeping only the first (dominant) temporal mode."""
        core = self.core[..., :1]
        out = core
        for mode in range(3):
            out = _mode_dot(out, self.factors[mode], mode)
        return _mode_dot(out, self.factors[3][:, :1], 3)


def default_ranks(dims) -> tuple[int, int, int, int]:
    nx, ny, nz, nt = dims
    return (min(nx, 8), min(ny, 8), min(nz, 8), min(nt, 3))


def tucker_decompose(tensor, ranks, max_sweeps=100, tol=1e-7) -> TuckerModel:
    """Tucker decomposition via truncated HOSVD followed by HOOI sweeps."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 4:
        raise ValueError("tucker_decompose expects a 4D tensor")
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 4 or any(r < 1 for r in ranks):
        raise ValueError(f"need four ranks >= 1, got {ranks}")
    if any(r > d for r, d in zip(ranks, tensor.shape)):
        raise ValueError(f"ranks {ranks} exceed tensor shape {tensor.shape}")

    def svd_factor(mat, rank, where):
        try:
            u, _, _ = np.linalg.svd(mat, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise DecompositionError(f"SVD failed during {where}") from exc
        return u[:, :rank]

    factors = [svd_factor(_unfold(tensor, m), ranks[m], f"HOSVD mode {m}")
               for m in range(4)]

    prev_norm = None
    for sweep in range(1, max_sweeps + 1):
        for mode in range(4):
            y = tensor
            for other in range(4):
                if other != mode:
                    y = _mode_dot(y, factors[other].T, other)
            factors[mode] = svd_factor(_unfold(y, mode), ranks[mode],
                                       f"HOOI sweep {sweep} mode {mode}")
        core = tensor
        for mode in range(4):
            core = _mode_dot(core, factors[mode].T, mode)
        norm = float(np.linalg.norm(core))
        if prev_norm is not None and abs(norm - prev_norm) <= tol * max(prev_norm, 1e-300):
            return TuckerModel(core=core, factors=tuple(factors),
                               ranks=ranks, sweeps=sweep)
        prev_norm = norm
    raise DecompositionError(
        f"Tucker decomposition did not converge within {max_sweeps} sweeps")


def tucker_denoise(mag, ranks=None) -> np.ndarray:
    """Low-rank magnitude denoising keeping only the dominant temporal
    mode; the output is clamped at zero."""
    mag = np.asarray(mag, dtype=np.float64)
    if ranks is None:
        ranks = default_ranks(mag.shape)
    model = tucker_decompose(mag, ranks)
    return np.clip(model.dominant_temporal(), 0.0, None)


# ---------------------------------------------------------------------------
# adaptive thresholding

def sauvola3d(vol, window=11, k=0.2, r=0.5):
    """3D Sauvola threshold field and background mask.

    threshold = m * (1 + k * (sigma / r - 1)) with local mean m and
    population std sigma over a cubic window clipped at the borders; a
    voxel is background iff its value is below the threshold.
    """
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("sauvola3d expects a 3D volume")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    count = _window_count(vol.shape, window)
    mean = _window_sum(vol, window) / count
    meansq = _window_sum(vol * vol, window) / count
    sigma = np.sqrt(np.clip(meansq - mean**2, 0.0, None))
    threshold = mean * (1.0 + k * (sigma / r - 1.0))
    return threshold, vol < threshold


# ---------------------------------------------------------------------------
# magnitude background likelihood (kernel density)

def magnitude_likelihood(mag1, bg_mask, grid_points=1024, max_samples=20000,
                         min_samples=10, trim_fraction=0.01) -> np.ndarray:
    """Background likelihood from magnitude: 1 - F_bg(mag1), where F_bg is
    the CDF of a Gaussian KDE fitted to the current background samples.

    The top ``trim_fraction`` of samples is dropped before the fit: the
    upper tail of the estimate is otherwise destroyed by even a fraction
    of a percent of bright flow voxels leaking into the background mask.
    """
    mag1 = np.asarray(mag1, dtype=np.float64)
    bg_mask = np.asarray(bg_mask, dtype=bool)
    if bg_mask.shape != mag1.shape:
        raise ValueError("bg_mask shape must match the magnitude volume")
    samples = mag1[bg_mask]
    if samples.size < min_samples:
        raise SegmentationError(
            f"only {samples.size} background samples, need at least {min_samples}")
    if trim_fraction > 0:
        cutoff = np.quantile(samples, 1.0 - trim_fraction)
        trimmed = samples[samples <= cutoff]
        if trimmed.size >= min_samples:
            samples = trimmed
    if samples.size > max_samples:
        stride = int(np.ceil(samples.size / max_samples))
        samples = samples[::stride]

    if samples.std() <= 1e-12 * max(abs(float(samples.mean())), 1.0):
        # Degenerate background: a step CDF at the single sample value.
        v0 = samples[0]
        cdf = np.where(mag1 < v0, 0.0, np.where(mag1 > v0, 1.0, 0.5))
        return np.clip(1.0 - cdf, 0.0, 1.0)

    kde = gaussian_kde(samples, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(samples.min() - 4.0 * bandwidth,
                       samples.max() + 4.0 * bandwidth, grid_points)
    density = kde(grid)
    cdf = cumulative_trapezoid(density, grid, initial=0.0)
    cdf /= cdf[-1]
    f_bg = np.interp(mag1, grid, cdf, left=0.0, right=1.0)
    return np.clip(1.0 - f_bg, 0.0, 1.0)


# ---------------------------------------------------------------------------
# phase (SDM) background likelihood

def sdm_statistic(velocity: VelocityField, at, frame, eps_sigma=1e-6) -> float:
    """Standardized-difference statistic at one voxel/frame, computed over
    a 3x3x3 spatial stencil and frames (t-1, t, t+1).

    The temporal window repeats the edge frame at the sequence ends, the
    spatial stencil is clipped at volume borders, and the per-component
    standard deviation is floored at ``eps_sigma``.
    """
    x, y, z = at
    nx, ny, nz, nt = velocity.meta.dims
    frames = np.clip([frame - 1, frame, frame + 1], 0, nt - 1)
    sx = slice(max(x - 1, 0), min(x + 2, nx))
    sy = slice(max(y - 1, 0), min(y + 2, ny))
    sz = slice(max(z - 1, 0), min(z + 2, nz))
    total = 0.0
    for comp in velocity.components:
        patch = np.concatenate([comp[sx, sy, sz, t].ravel() for t in frames])
        mean = patch.mean()
        sigma = max(float(patch.std()), eps_sigma)
        total += (mean * np.sqrt(3.0) / sigma) ** 2
    return float(np.sqrt(total))


def sdm_field(velocity: VelocityField, eps_sigma=1e-6) -> np.ndarray:
    """Vectorised :func:`sdm_statistic` over the whole 4D grid."""
    nt = velocity.meta.n_frames
    count3 = _window_count(velocity.meta.spatial_dims, 3)
    total = np.zeros(velocity.meta.dims, dtype=np.float64)
    for comp in velocity.components:
        padded = np.pad(comp, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="edge")
        sums = [_window_sum(padded[..., t], 3) for t in range(nt + 2)]
        sqsums = [_window_sum(padded[..., t] ** 2, 3) for t in range(nt + 2)]
        for t in range(nt):
            s1 = sums[t] + sums[t + 1] + sums[t + 2]
            s2 = sqsums[t] + sqsums[t + 1] + sqsums[t + 2]
            n = 3.0 * count3
            mean = s1 / n
            sigma = np.sqrt(np.clip(s2 / n - mean**2, 0.0, None))
            sigma = np.maximum(sigma, eps_sigma)
            total[..., t] += (mean * np.sqrt(3.0) / sigma) ** 2
    return np.sqrt(total)


def phase_likelihood(u_tilde, bg_mask) -> np.ndarray:
    """Background likelihood from the SDM statistic: one minus the
    empirical CDF of the statistic over current background voxels."""
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    bg_mask = np.asarray(bg_mask, dtype=bool)
    if bg_mask.shape != u_tilde.shape:
        raise ValueError("bg_mask shape must match the statistic field")
    samples = u_tilde[bg_mask]
    if samples.size == 0:
        raise SegmentationError("empty background; cannot calibrate phase likelihood")
    ordered = np.sort(samples)
    # upper-tail probability with ties counted in: P(sample >= query), so a
    # degenerate all-zero background still assigns zero statistics p = 1
    below = np.searchsorted(ordered, u_tilde, side="left") / ordered.size
    return np.clip(1.0 - below, 0.0, 1.0)


# ---------------------------------------------------------------------------
# likelihood fusion with a TV-regularised weight field

def anisotropic_tv(x) -> float:
    """Sum of absolute one-sided finite differences along every axis."""
    x = np.asarray(x, dtype=np.float64)
    return float(sum(np.abs(np.diff(x, axis=a)).sum() for a in range(x.ndim)))


def combine_likelihoods(p_mag, p_phase, w, floor=1e-6) -> np.ndarray:
    """Log-space convex combination: exp(w log p_mag + (1-w) log p_phase)."""
    a = np.log(np.clip(p_mag, floor, 1.0))
    b = np.log(np.clip(p_phase, floor, 1.0))
    return np.clip(np.exp(w * a + (1.0 - w) * b), 0.0, 1.0)


def _tv_subgradient(combined_log, c, mu=0.0):
    """Subgradient of the (optionally Huber-smoothed) anisotropic TV of the
    fused log likelihood with respect to the weight field."""
    g = np.zeros_like(combined_log)
    ndim = combined_log.ndim
    for axis in range(ndim):
        d = np.diff(combined_log, axis=axis)
        s = np.sign(d) if mu == 0.0 else d / np.sqrt(d * d + mu * mu)
        head = [slice(None)] * ndim
        tail = [slice(None)] * ndim
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        g[tuple(head)] -= s
        g[tuple(tail)] += s
    return g * c


@dataclass(frozen=True)
class FusionResult:
    w: np.ndarray
    p_comb: np.ndarray
    objective_history: tuple[float, ...]
    converged: bool
    iterations: int


def fuse_likelihoods(p_mag, p_phase, max_iterations=200, tol=1e-4,
                     floor=1e-6, smoothing=0.05) -> FusionResult:
    """Choose a per-voxel weight field w in [0, 1] minimising the
    anisotropic total variation of the fused log likelihood.

    The objective is convex in w (the fused log likelihood is affine in
    w).  Projected descent along the Huber-smoothed TV subgradient with
    per-voxel normalized steps and monotone acceptance reaches the
    optimum; plain sign steps stall on plateaus whose improvement is
    rejected by the global acceptance test.  The recorded objective
    history is non-increasing by construction.
    """
    p_mag = np.asarray(p_mag, dtype=np.float64)
    p_phase = np.asarray(p_phase, dtype=np.float64)
    if p_mag.shape != p_phase.shape:
        raise ValueError("likelihood shapes differ")
    a = np.log(np.clip(p_mag, floor, 1.0))
    b = np.log(np.clip(p_phase, floor, 1.0))
    c = a - b

    w = np.full(p_mag.shape, 0.5)
    objective = anisotropic_tv(b + w * c)
    history = [objective]
    step = 0.25
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        grad = _tv_subgradient(b + w * c, c, mu=smoothing)
        gmax = np.abs(grad).max()
        if gmax == 0.0:
            converged = True
            break
        # Per-voxel normalization (damped for small entries) moves whole
        # plateaus together instead of crawling at the global step scale.
        direction = grad / np.maximum(np.abs(grad), 0.1 * gmax)
        proposal = np.clip(w - step * direction, 0.0, 1.0)
        candidate = anisotropic_tv(b + proposal * c)
        if candidate < objective:
            improvement = objective - candidate
            w = proposal
            objective = candidate
            history.append(objective)
            if improvement <= tol * max(objective, 1e-300):
                converged = True
                break
            step *= 1.25
        else:
            history.append(objective)
            step *= 0.5
            if step < 1e-12:
                converged = True
                break
    return FusionResult(w=w, p_comb=combine_likelihoods(p_mag, p_phase, w, floor),
                        objective_history=tuple(history), converged=converged,
                        iterations=iterations)


# ---------------------------------------------------------------------------
# mask refinement

@dataclass(frozen=True)
class RefineResult:
    mask: np.ndarray
    threshold_mean: float
    n_components: int


def refine_mask(p_comb, window=11, k=0.2, r=0.5, component_fraction=0.1,
                floor=1e-6) -> RefineResult:
    """Threshold the fused background likelihood into a flow mask and clean
    it up: keep connected components of at least ``component_fraction`` of
    the largest one (6-connectivity) and fill enclosed holes.

    Flow has low background likelihood, so the Sauvola below-threshold set
    of the normalised log likelihood is the flow candidate.
    """
    p_comb = np.asarray(p_comb, dtype=np.float64)
    logp = np.log(np.clip(p_comb, floor, 1.0))
    lo, hi = logp.min(), logp.max()
    if hi - lo < 1e-12:
        raise SegmentationError("combined likelihood is constant; no flow structure")
    norm = (logp - lo) / (hi - lo)
    threshold, below = sauvola3d(norm, window=window, k=k, r=r)
    flow = below
    if not flow.any():
        raise SegmentationError("empty flow mask after adaptive thresholding")
    structure = ndimage.generate_binary_structure(3, 1)
    labeled, _ = ndimage.label(flow, structure=structure)
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    keep = sizes >= component_fraction * sizes.max()
    keep[0] = False
    flow = keep[labeled]
    flow = ndimage.binary_fill_holes(flow, structure=structure)
    return RefineResult(mask=flow, threshold_mean=float(threshold.mean()),
                        n_components=int(keep.sum()))


# ---------------------------------------------------------------------------
# outer loop

@dataclass(frozen=True)
class SegmentationParams:
    ranks: tuple[int, int, int, int] | None = None
    window: int = 11
    k: float = 0.2
    r: float = 0.5
    tv_iterations: int = 200
    tv_tol: float = 1e-4
    likelihood_floor: float = 1e-6
    eps_sigma: float = 1e-6
    component_fraction: float = 0.1
    max_iterations: int = 20
    stabilize_tol: float = 0.01
    kde_grid_points: int = 1024
    kde_max_samples: int = 20000

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd integer >= 3")
        if not 0 < self.k <= 1 or not 0 < self.r <= 1:
            raise ValueError("k and r must lie in (0, 1]")
        if self.max_iterations < 1 or self.tv_iterations < 1:
            raise ValueError("iteration budgets must be >= 1")


@dataclass(frozen=True)
class SegmentationState:
    """Fields of the final segmentation iteration."""

    iteration: int
    flow_mask: np.ndarray
    background_mask: np.ndarray
    p_mag: np.ndarray
    p_phase: np.ndarray
    p_comb: np.ndarray
    w: np.ndarray
    threshold_stat: float
    threshold_stats: tuple[float, ...]


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    threshold_stat: float
    flow_voxels: int
    tv_objective: float
    fusion_converged: bool


@dataclass(frozen=True)
class SegmentationResult:
    static_mask: MaskVolume
    phase_masks: MaskVolume
    state: SegmentationState
    history: tuple[IterationStats, ...]
    converged: bool
    iterations: int


def segment(bundle: FlowBundle, params: SegmentationParams | None = None) -> SegmentationResult:
    """Full segmentation loop on one bundle.

    Deterministic: no randomness anywhere in the pipeline.  Raises
    :class:`SegmentationError` on degenerate inputs (constant magnitude,
    empty masks, too few background samples).
    """
    params = params or SegmentationParams()
    meta = bundle.meta
    nt = meta.n_frames

    mag1 = tucker_denoise(bundle.magnitude, params.ranks)
    lo, hi = mag1.min(), mag1.max()
    if hi - lo < 1e-12:
        raise SegmentationError("denoised magnitude is constant; no lumen contrast")
    norm_mag = (mag1 - lo) / (hi - lo)

    background = np.zeros(meta.dims, dtype=bool)
    for t in range(nt):
        _, bg_t = sauvola3d(norm_mag[..., t], window=params.window,
                            k=params.k, r=params.r)
        background[..., t] = bg_t
    # Statistics are calibrated on the complement of the union mask: a voxel
    # that looks like flow in any phase must not feed the background model,
    # otherwise a handful of bright leaked samples destroys the KDE tail.
    calib_bg = np.repeat(~(~background).any(axis=3)[..., None], nt, axis=3)

    u_tilde = sdm_field(raw_velocity(bundle), eps_sigma=params.eps_sigma)

    history: list[IterationStats] = []
    prev_stat = None
    converged = False
    state = None
    for n in range(1, params.max_iterations + 1):
        p_mag = magnitude_likelihood(mag1, calib_bg,
                                     grid_points=params.kde_grid_points,
                                     max_samples=params.kde_max_samples)
        flow = np.zeros(meta.dims, dtype=bool)
        p_phase = np.zeros(meta.dims)
        p_comb = np.zeros(meta.dims)
        weight = np.zeros(meta.dims)
        stats = []
        tv_objectives = []
        fusion_ok = True
        for t in range(nt):
            p_phase_t = phase_likelihood(u_tilde[..., t], calib_bg[..., t])
            fusion = fuse_likelihoods(p_mag[..., t], p_phase_t,
                                      max_iterations=params.tv_iterations,
                                      tol=params.tv_tol,
                                      floor=params.likelihood_floor)
            refined = refine_mask(fusion.p_comb, window=params.window,
                                  k=params.k, r=params.r,
                                  component_fraction=params.component_fraction,
                                  floor=params.likelihood_floor)
            flow[..., t] = refined.mask
            p_phase[..., t] = p_phase_t
            p_comb[..., t] = fusion.p_comb
            weight[..., t] = fusion.w
            stats.append(refined.threshold_mean)
            tv_objectives.append(fusion.objective_history[-1])
            fusion_ok = fusion_ok and fusion.converged

        stat = float(np.mean(stats))
        history.append(IterationStats(
            iteration=n, threshold_stat=stat, flow_voxels=int(flow.sum()),
            tv_objective=float(np.mean(tv_objectives)), fusion_converged=fusion_ok))
        background = ~flow
        calib_bg = np.repeat(~flow.any(axis=3)[..., None], nt, axis=3)
        state = SegmentationState(
            iteration=n, flow_mask=flow, background_mask=background,
            p_mag=p_mag, p_phase=p_phase, p_comb=p_comb, w=weight,
            threshold_stat=stat, threshold_stats=tuple(stats))
        if prev_stat is not None and abs(stat - prev_stat) < params.stabilize_tol * abs(prev_stat):
            converged = True
            break
        prev_stat = stat

    static = state.flow_mask.any(axis=3)
    if not static.any():
        raise SegmentationError("segmentation produced an empty static mask")
    return SegmentationResult(
        static_mask=MaskVolume(labels=static, meta=meta),
        phase_masks=MaskVolume(labels=state.flow_mask, meta=meta),
        state=state, history=tuple(history), converged=converged,
        iterations=state.iteration)
