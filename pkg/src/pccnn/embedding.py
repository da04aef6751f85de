"""Coordinate embeddings fed to the kernel-generating hypernetwork.

For an (input point, output point) pair, a coordinate vector p is assembled
from the spatial offset, the b-value component(s), the angular cosine
similarity, and optionally a global patch-centroid coordinate. p is then
lifted by a sinusoidal feature mapping

    gamma(p_m) = [sin(2^0 pi p_m), cos(2^0 pi p_m), ...,
                  sin(2^(L-1) pi p_m), cos(2^(L-1) pi p_m)]

concatenated over the components of p, giving a vector of length 2*L*E.

b-values are divided by ``b_scale`` before embedding so the component stays
in [-1, 1]; raw s/mm^2 values alias badly under the sinusoids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import QSpacePoint, d_cos

VARIANTS = ("standard", "bv", "sp", "bv_sp")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Which components enter p, and the width of the sinusoidal lift.

    variant:   'standard' uses the b-value difference, 'bv' the two absolute
               b-values, and the '_sp' forms append the normalized patch
               centroid.
    L:         number of frequency bands.
    b_scale:   divisor applied to b-values (s/mm^2).
    use_dcos:  drop the angular component when False (b-vector ablation).
    use_fourier: bypass the sinusoidal lift when False, feeding p directly.
    """

    variant: str = "standard"
    L: int = 4
    b_scale: float = 3000.0
    use_dcos: bool = True
    use_fourier: bool = True

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.b_scale <= 0:
            raise ValueError(f"b_scale must be positive, got {self.b_scale}")

    @property
    def uses_centroid(self) -> bool:
        return self.variant in ("sp", "bv_sp")

    @property
    def n_components(self) -> int:
        """E: number of components of p."""
        e = 3  # spatial offsets
        e += 2 if self.variant in ("bv", "bv_sp") else 1
        if self.use_dcos:
            e += 1
        if self.uses_centroid:
            e += 3
        return e

    @property
    def width(self) -> int:
        """Length of the embedding vector handed to the hypernetwork."""
        if not self.use_fourier:
            return self.n_components
        return 2 * self.L * self.n_components


def _check_centroid(cfg: EmbeddingConfig, centroid) -> np.ndarray | None:
    if not cfg.uses_centroid:
        return None
    if centroid is None:
        raise ValueError(f"variant {cfg.variant!r} requires a patch centroid")
    c = np.asarray(centroid, dtype=np.float64).reshape(3)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"centroid components must lie in [0, 1], got {c}")
    return c


def build_p(
    x: QSpacePoint,
    y: QSpacePoint,
    cfg: EmbeddingConfig,
    centroid=None,
) -> np.ndarray:
    """Coordinate vector p for input point x and output point y.

    Component order is fixed: spatial offsets (x minus y, voxel units), the
    b-value component(s) divided by b_scale, the cosine similarity, then the
    centroid components if the variant uses them.
    """
    c = _check_centroid(cfg, centroid)
    parts = [x.u - y.u, x.v - y.v, x.w - y.w]
    if cfg.variant in ("bv", "bv_sp"):
        parts += [x.rho / cfg.b_scale, y.rho / cfg.b_scale]
    else:
        parts.append((x.rho - y.rho) / cfg.b_scale)
    if cfg.use_dcos:
        parts.append(d_cos(x.dir, y.dir))
    p = np.array(parts, dtype=np.float64)
    if c is not None:
        p = np.concatenate([p, c])
    return p


def embedding_rows(
    offsets: np.ndarray,
    rho_x: np.ndarray,
    rho_y: np.ndarray,
    dcos: np.ndarray,
    cfg: EmbeddingConfig,
    centroid=None,
) -> np.ndarray:
    """Batched p construction: one row per pair.

    offsets: [n, 3] spatial offsets (input minus output, voxel units);
    rho_x, rho_y, dcos: [n] per-pair values. Returns [n, E].
    """
    c = _check_centroid(cfg, centroid)
    offsets = np.asarray(offsets, dtype=np.float64)
    n = offsets.shape[0]
    cols = [offsets]
    if cfg.variant in ("bv", "bv_sp"):
        cols.append(np.asarray(rho_x, dtype=np.float64)[:, None] / cfg.b_scale)
        cols.append(np.asarray(rho_y, dtype=np.float64)[:, None] / cfg.b_scale)
    else:
        diff = np.asarray(rho_x, dtype=np.float64) - np.asarray(rho_y, dtype=np.float64)
        cols.append(diff[:, None] / cfg.b_scale)
    if cfg.use_dcos:
        cols.append(np.asarray(dcos, dtype=np.float64)[:, None])
    if c is not None:
        cols.append(np.broadcast_to(c, (n, 3)))
    return np.concatenate(cols, axis=1)


def fourier_map(p: np.ndarray, L: int) -> np.ndarray:
    """Sinusoidal lift of a single coordinate vector, length 2*L*E.

    Per component, frequencies run sin/cos at 2^l * pi for l = 0..L-1;
    components are concatenated in p order.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    return fourier_map_rows(np.asarray(p, dtype=np.float64)[None, :], L)[0]


def fourier_map_rows(p: np.ndarray, L: int) -> np.ndarray:
    """Batched sinusoidal lift: [n, E] -> [n, 2*L*E]."""
    p = np.asarray(p, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(L))
    angles = p[:, :, None] * freqs  # [n, E, L]
    out = np.empty(p.shape + (L, 2), dtype=np.float64)
    np.sin(angles, out=out[..., 0])
    np.cos(angles, out=out[..., 1])
    return out.reshape(p.shape[0], p.shape[1] * 2 * L)


def embed(
    x: QSpacePoint,
    y: QSpacePoint,
    cfg: EmbeddingConfig,
    centroid=None,
) -> np.ndarray:
    """Full embedding for one point pair: fourier_map(build_p(...)).

    With ``use_fourier`` off, returns p itself (the bypass used by the
    no-Fourier ablation).
    """
    p = build_p(x, y, cfg, centroid)
    if not cfg.use_fourier:
        return p
    return fourier_map(p, cfg.L)


def embed_rows(p_rows: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Batched counterpart of :func:`embed` applied to prebuilt p rows."""
    if not cfg.use_fourier:
        return np.asarray(p_rows, dtype=np.float64)
    return fourier_map_rows(p_rows, cfg.L)
