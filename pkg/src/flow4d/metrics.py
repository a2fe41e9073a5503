"""Quantitative evaluation: volumetric overlap, surface distances,
velocity agreement, and divergence residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from .volume import MaskVolume, VelocityField, boundary_voxels


def _labels(mask) -> np.ndarray:
    if isinstance(mask, MaskVolume):
        return mask.labels
    return np.asarray(mask, dtype=bool)


@dataclass(frozen=True)
class OverlapScores:
    """Set-count overlap metrics; entries are None where undefined
    (empty truth or prediction)."""

    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    dice: float | None
    jaccard: float | None

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "dice": self.dice,
            "jaccard": self.jaccard,
        }


def overlap_scores(truth, prediction) -> OverlapScores:
    t = _labels(truth)
    p = _labels(prediction)
    if t.shape != p.shape:
        raise ValueError(f"mask shapes differ: {t.shape} vs {p.shape}")
    tp = int(np.count_nonzero(t & p))
    tn = int(np.count_nonzero(~t & ~p))
    n_t = int(np.count_nonzero(t))
    n_p = int(np.count_nonzero(p))
    total = t.size
    union = n_t + n_p - tp

    accuracy = (tp + tn) / total
    precision = tp / n_p if n_p > 0 else None
    recall = tp / n_t if n_t > 0 else None
    dice = 2 * tp / (n_t + n_p) if (n_t + n_p) > 0 else None
    jaccard = tp / union if union > 0 else None
    return OverlapScores(accuracy=accuracy, precision=precision, recall=recall,
                         f1=dice, dice=dice, jaccard=jaccard)


@dataclass(frozen=True)
class SurfaceDistanceReport:
    """Nearest-boundary distances normalised by the smallest voxel
    dimension.  ``quartiles`` are the 25/50/75 percentiles."""

    distances: np.ndarray
    mean: float
    quartiles: tuple[float, float, float]


def surface_distance(mask_a, mask_b, spacing, symmetric=False) -> SurfaceDistanceReport:
    """Distances from each boundary voxel of A to the nearest boundary
    voxel of B, in physical units, divided by min(spacing).

    With ``symmetric=True`` both directions are pooled and the reported
    mean is the average of the two directed means.
    """
    a = _labels(mask_a)
    b = _labels(mask_b)
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("surface_distance expects static 3D masks")
    if not a.any() or not b.any():
        raise ValueError("both masks must be non-empty")
    spacing = np.asarray(spacing, dtype=np.float64)

    def boundary_points(mask):
        surf = boundary_voxels(mask)
        if not surf.any():
            raise ValueError("mask has no boundary voxels")
        return np.argwhere(surf) * spacing

    pts_a = boundary_points(a)
    pts_b = boundary_points(b)
    norm = float(spacing.min())
    d_ab = cKDTree(pts_b).query(pts_a)[0] / norm
    if not symmetric:
        q = np.percentile(d_ab, [25, 50, 75])
        return SurfaceDistanceReport(distances=d_ab, mean=float(d_ab.mean()),
                                     quartiles=tuple(float(v) for v in q))
    d_ba = cKDTree(pts_a).query(pts_b)[0] / norm
    pooled = np.concatenate([d_ab, d_ba])
    q = np.percentile(pooled, [25, 50, 75])
    mean = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    return SurfaceDistanceReport(distances=pooled, mean=mean,
                                 quartiles=tuple(float(v) for v in q))


@dataclass(frozen=True)
class VelocityAgreement:
    rmse: float
    ssim: float
    cosine: float


def velocity_agreement(field: VelocityField, reference: VelocityField,
                       mask) -> VelocityAgreement:
    """RMSE (cm/s, pooled over components), mean SSIM per component and
    frame, and mean in-mask cosine similarity between velocity vectors.

    Voxels where either vector norm is below 1e-9 are excluded from the
    cosine average.  SSIM uses a 7-voxel uniform window with the dynamic
    range taken from the in-mask reference speed.
    """
    mask3 = _labels(mask)
    if mask3.ndim == 4:
        mask3 = mask3.any(axis=3)
    if field.meta.dims != reference.meta.dims:
        raise ValueError("field shapes differ")
    if not mask3.any():
        raise ValueError("empty evaluation mask")
    nt = field.meta.n_frames

    u = np.stack([c[mask3, :] for c in field.components])        # (3, M, Nt)
    r = np.stack([c[mask3, :] for c in reference.components])
    rmse = float(np.sqrt(np.mean((u - r) ** 2)))

    data_range = max(float(np.abs(r).max()), 1e-9)
    ssim_values = []
    for comp_f, comp_r in zip(field.components, reference.components):
        for t in range(nt):
            ssim_values.append(structural_similarity(
                comp_r[..., t], comp_f[..., t], win_size=7,
                data_range=data_range))
    ssim = float(np.mean(ssim_values))

    dot = (u * r).sum(axis=0)
    norm_u = np.sqrt((u**2).sum(axis=0))
    norm_r = np.sqrt((r**2).sum(axis=0))
    valid = (norm_u >= 1e-9) & (norm_r >= 1e-9)
    if not valid.any():
        cosine = float("nan")
    else:
        cosine = float((dot[valid] / (norm_u[valid] * norm_r[valid])).mean())
    return VelocityAgreement(rmse=rmse, ssim=ssim, cosine=cosine)


@dataclass(frozen=True)
class DivergenceReport:
    """Normalised divergence residuals at interior mask voxels.

    ``residuals`` are |div u| * min(spacing) / mean in-mask speed, pooled
    over frames; ``mean_abs_divergence`` is the unnormalised mean in 1/s.
    """

    residuals: np.ndarray
    mean: float
    iqr: float
    histogram: tuple[np.ndarray, np.ndarray]
    mean_abs_divergence: float
    norm_factor: float


def divergence_residuals(field: VelocityField, mask, bins: int = 50) -> DivergenceReport:
    """Central-difference divergence at interior in-mask voxels (all six
    neighbours inside the mask), normalised to a dimensionless residual."""
    mask3 = _labels(mask)
    if mask3.ndim == 4:
        mask3 = mask3.any(axis=3)
    interior = mask3.copy()
    for axis in range(3):
        shifted_fwd = np.zeros_like(mask3)
        shifted_bwd = np.zeros_like(mask3)
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        shifted_fwd[tuple(head)] = mask3[tuple(tail)]
        shifted_bwd[tuple(tail)] = mask3[tuple(head)]
        interior &= shifted_fwd & shifted_bwd
    if not interior.any():
        raise ValueError("mask interior is empty; central differences undefined")

    spacing_cm = np.asarray(field.meta.spacing, dtype=np.float64) / 10.0
    nt = field.meta.n_frames
    div = np.zeros(field.meta.dims)
    for axis, comp in enumerate(field.components):
        div += (np.roll(comp, -1, axis=axis) - np.roll(comp, 1, axis=axis)) \
            / (2.0 * spacing_cm[axis])
    abs_div = np.abs(div[interior, :]).ravel()

    speed = field.speed()[mask3, :]
    mean_speed = float(speed.mean())
    norm_factor = float(spacing_cm.min()) / max(mean_speed, 1e-300)
    residuals = abs_div * norm_factor
    q25, q75 = np.percentile(residuals, [25, 75])
    counts, edges = np.histogram(residuals, bins=bins)
    return DivergenceReport(residuals=residuals, mean=float(residuals.mean()),
                            iqr=float(q75 - q25), histogram=(counts, edges),
                            mean_abs_divergence=float(abs_div.mean()),
                            norm_factor=norm_factor)
