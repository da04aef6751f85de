"""Evaluation metrics and the spherical-harmonic interpolation baseline.

The SH basis is the real, symmetric (even-degree) basis with the usual
orthonormal scaling, so a constant signal c fits to a single degree-0
coefficient of c*sqrt(4*pi). Fits use the pseudo-inverse least-squares
solution; the angular correlation coefficient is the cosine similarity of
two coefficient vectors (real coefficients, so conjugation is a no-op).

MSSIM uses a uniform 7x7x7 window with K1=0.01, K2=0.03; only window centers
whose window lies fully inside the volume (and inside the mask) contribute.
The dynamic range is taken from the union of both inputs, keeping the metric
exactly symmetric.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import lpmv

from .data import VolumeSet
from .geometry import QSpacePoint

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_IDENTICAL = math.inf


def _resolve_mask(mask: np.ndarray, shape: tuple) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.broadcast_to(mask[..., None] if mask.ndim == len(shape) - 1 else mask, shape)


def mae(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over masked entries."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    m = _resolve_mask(mask, pred.shape)
    if not m.any():
        raise ValueError("empty mask")
    return float(np.abs(pred[m] - target[m]).mean())


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return inf.

    peak defaults to the dynamic range (max - min) of the target in the mask.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    m = _resolve_mask(mask, pred.shape)
    if not m.any():
        raise ValueError("empty mask")
    if peak is None:
        peak = float(target[m].max() - target[m].min())
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(((pred[m] - target[m]) ** 2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * math.log10(peak * peak / mse))


def _ssim_volume(x: np.ndarray, y: np.ndarray, mask3: np.ndarray, dynamic_range: float):
    """Per-direction SSIM samples at valid window centers."""
    size = SSIM_WINDOW
    half = size // 2
    mu_x = uniform_filter(x, size)
    mu_y = uniform_filter(y, size)
    mu_xx = uniform_filter(x * x, size)
    mu_yy = uniform_filter(y * y, size)
    mu_xy = uniform_filter(x * y, size)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    ssim = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    valid = np.zeros(x.shape, dtype=bool)
    valid[half:-half or None, half:-half or None, half:-half or None] = True
    valid &= mask3
    return ssim[valid]


def mssim(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean SSIM over valid window centers, pooled across directions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 3:
        pred, target = pred[..., None], target[..., None]
    mask3 = np.asarray(mask, dtype=bool)
    if any(s < SSIM_WINDOW for s in pred.shape[:3]):
        raise ValueError(f"volume {pred.shape[:3]} smaller than the {SSIM_WINDOW}^3 window")
    both = np.concatenate([pred[mask3].ravel(), target[mask3].ravel()])
    dynamic_range = float(both.max() - both.min())
    if dynamic_range == 0.0:
        dynamic_range = 1.0  # identical constants: SSIM is 1 regardless
    samples = [
        _ssim_volume(pred[..., d], target[..., d], mask3, dynamic_range)
        for d in range(pred.shape[3])
    ]
    pooled = np.concatenate(samples)
    if pooled.size == 0:
        raise ValueError("no valid window centers inside the mask")
    return float(pooled.mean())


def sh_basis_size(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def real_sym_sh_basis(order: int, units: np.ndarray) -> np.ndarray:
    """Design matrix of the real symmetric SH basis at unit vectors.

    Columns run l = 0, 2, ..., order with m = -l..l inside each degree;
    negative m pairs with cos(|m| phi), positive with sin(m phi).
    """
    if order % 2 != 0 or order < 0:
        raise ValueError(f"order must be a non-negative even integer, got {order}")
    units = np.atleast_2d(np.asarray(units, dtype=np.float64))
    cos_theta = np.clip(units[:, 2], -1.0, 1.0)
    phi = np.arctan2(units[:, 1], units[:, 0])
    cols = []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            am = abs(m)
            norm = math.sqrt(
                (2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am)
            )
            leg = lpmv(am, l, cos_theta)
            if m == 0:
                cols.append(norm * leg)
            elif m < 0:
                cols.append(math.sqrt(2.0) * norm * leg * np.cos(am * phi))
            else:
                cols.append(math.sqrt(2.0) * norm * leg * np.sin(m * phi))
    return np.stack(cols, axis=1)


@dataclass
class SHCoefficients:
    """Even-degree real SH coefficients; last axis is the coefficient axis."""

    max_order: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        if self.coeffs.shape[-1] != sh_basis_size(self.max_order):
            raise ValueError(
                f"expected {sh_basis_size(self.max_order)} coefficients for order {self.max_order}"
            )


def sh_fit(values: np.ndarray, units: np.ndarray, order: int) -> SHCoefficients:
    """Least-squares SH fit of per-direction signals.

    values is [..., n_dirs]; the fit is the pseudo-inverse solution. Raises
    when the design matrix is rank-deficient for the requested order.
    """
    values = np.asarray(values, dtype=np.float64)
    basis = real_sym_sh_basis(order, units)
    n_coef = basis.shape[1]
    if values.shape[-1] != basis.shape[0]:
        raise ValueError(f"{values.shape[-1]} signal values vs {basis.shape[0]} directions")
    if values.shape[-1] < n_coef or np.linalg.matrix_rank(basis) < n_coef:
        raise ValueError(
            f"design matrix is rank-deficient: {values.shape[-1]} directions for {n_coef} coefficients"
        )
    coeffs = values @ np.linalg.pinv(basis).T
    return SHCoefficients(max_order=order, coeffs=coeffs)


def sh_predict(values: np.ndarray, units_in: np.ndarray, units_out: np.ndarray, order: int = 2) -> np.ndarray:
    """Fit at units_in, evaluate the fitted expansion at units_out."""
    fit = sh_fit(values, units_in, order)
    return fit.coeffs @ real_sym_sh_basis(order, units_out).T


def sh_interpolate(low_res: VolumeSet, target_points: Sequence[QSpacePoint], order: int = 2) -> np.ndarray:
    """Classical baseline: per-voxel order-2 SH fit, evaluated at the targets.

    low_res must hold a single shell; returns [X, Y, Z, len(target_points)].
    """
    shells = low_res.shells()
    if len(shells) != 1:
        raise ValueError(f"SH interpolation expects a single shell, got {len(shells)}")
    shell = shells[0]
    vol_idx = low_res.volume_indices(shell.bval)
    values = low_res.intensities[..., vol_idx]
    units_out = np.array([p.dir.unit for p in target_points])
    return sh_predict(values, shell.units, units_out, order)


def acc(alpha: SHCoefficients, beta: SHCoefficients) -> float:
    """Angular correlation coefficient: cosine similarity of coefficients."""
    if alpha.max_order != beta.max_order:
        raise ValueError(f"layout mismatch: order {alpha.max_order} vs {beta.max_order}")
    a = alpha.coeffs.ravel()
    b = beta.coeffs.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("ACC is undefined for zero-norm coefficient vectors")
    return float(a @ b / (na * nb))


def acc_map(alpha: SHCoefficients, beta: SHCoefficients) -> np.ndarray:
    """Voxelwise ACC; zero-norm voxels yield nan (masked out by callers)."""
    if alpha.max_order != beta.max_order:
        raise ValueError(f"layout mismatch: order {alpha.max_order} vs {beta.max_order}")
    num = np.sum(alpha.coeffs * beta.coeffs, axis=-1)
    denom = np.linalg.norm(alpha.coeffs, axis=-1) * np.linalg.norm(beta.coeffs, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / denom


@dataclass
class MetricSummary:
    per_subject: list[float]
    mean: float
    std: float


def aggregate(per_voxel_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], subject_ids: Sequence) -> MetricSummary:
    """Per-subject masked means, then cross-subject mean and population std."""
    if not len(per_voxel_maps):
        raise ValueError("aggregate requires at least one subject")
    if not (len(per_voxel_maps) == len(masks) == len(subject_ids)):
        raise ValueError("maps, masks and subject ids must align")
    per_subject = []
    for values, mask in zip(per_voxel_maps, masks):
        m = _resolve_mask(mask, np.asarray(values).shape)
        sel = np.asarray(values)[m]
        sel = sel[np.isfinite(sel)]
        per_subject.append(float(sel.mean()))
    arr = np.asarray(per_subject)
    return MetricSummary(per_subject=per_subject, mean=float(arr.mean()), std=float(arr.std()))


def write_report(report: dict[str, MetricSummary], json_path, csv_path) -> None:
    """JSON document plus a flat CSV mirror of the metric table."""
    doc = {
        name: {"per_subject": s.per_subject, "mean": s.mean, "std": s.std}
        for name, s in report.items()
    }
    Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std", "per_subject"])
        for name in sorted(report):
            s = report[name]
            writer.writerow([name, f"{s.mean:.9g}", f"{s.std:.9g}", ";".join(f"{v:.9g}" for v in s.per_subject)])
