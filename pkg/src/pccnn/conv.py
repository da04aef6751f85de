"""Continuous convolution over joint spatial-angular neighborhoods.

A layer owns a small MLP (the hypernetwork) that maps a coordinate embedding
for each (input point, output point) pair to a kernel weight, so the output
point set never has to coincide with the input set. Spatial structure follows
the usual windowed convolution (extent 1 or 3 per axis, truncated at patch
borders); the angular dimension selects the k_q nearest directions, with a
binary radius mask applied multiplicatively after the weight-feature product.

Weight modes:
  full        hypernetwork emits a C*K weight per pair (reference mode)
  per_channel hypernetwork emits C weights per pair, then a learned [C, K]
              projection mixes channels
  scalar      hypernetwork emits one weight per pair, then the projection

Embeddings repeat heavily across a patch (offsets and direction pairs repeat
for every voxel), so neighborhoods store unique embedding rows plus an index;
the hypernetwork only ever evaluates the unique rows.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .embedding import EmbeddingConfig, embed_rows, embedding_rows
from .geometry import QSpacePoint, dang_matrix, dcos_matrix

WEIGHT_MODES = ("full", "per_channel", "scalar")


@dataclass(frozen=True)
class PCConvLayerConfig:
    """Static description of one continuous-convolution layer."""

    spatial_extent: tuple[int, int, int]
    k_q: int
    d_max: float
    in_channels: int
    out_channels: int
    weight_mode: str
    embedding: EmbeddingConfig

    def __post_init__(self) -> None:
        if any(e not in (1, 3) for e in self.spatial_extent):
            raise ValueError(f"spatial extents must be 1 or 3, got {self.spatial_extent}")
        if self.k_q < 1:
            raise ValueError(f"k_q must be >= 1, got {self.k_q}")
        if not 0.0 < self.d_max <= math.pi:
            raise ValueError(f"d_max must lie in (0, pi], got {self.d_max}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def hyper_out_dim(self) -> int:
        if self.weight_mode == "full":
            return self.in_channels * self.out_channels
        if self.weight_mode == "per_channel":
            return self.in_channels
        return 1


@dataclass
class AngularSet:
    """The shared angular slots of a patch: one (direction, b-value) per slot.

    ``active`` is False for zero-fill padding slots, which never contribute
    to any neighborhood.
    """

    units: np.ndarray  # [q, 3]
    rhos: np.ndarray  # [q]
    active: np.ndarray  # bool [q]

    def __post_init__(self) -> None:
        self.units = np.asarray(self.units, dtype=np.float64)
        self.rhos = np.asarray(self.rhos, dtype=np.float64)
        self.active = np.asarray(self.active, dtype=bool)
        q = self.units.shape[0]
        if self.units.shape != (q, 3) or self.rhos.shape != (q,) or self.active.shape != (q,):
            raise ValueError("inconsistent angular set arrays")
        if not self.active.any():
            raise ValueError("angular set has no active slots")

    def __len__(self) -> int:
        return self.units.shape[0]

    @classmethod
    def from_points(cls, points: Sequence[QSpacePoint], padding_mask=None) -> "AngularSet":
        units = np.array([p.dir.unit for p in points], dtype=np.float64)
        rhos = np.array([p.rho for p in points], dtype=np.float64)
        if padding_mask is None:
            active = np.ones(len(points), dtype=bool)
        else:
            active = ~np.asarray(padding_mask, dtype=bool)
        return cls(units=units, rhos=rhos, active=active)


@dataclass
class Neighborhood:
    """Flattened pair lists for one layer application.

    Pairs are grouped by output point (``y_starts`` delimits the groups) and
    ordered within a group by spatial offset, then angular rank. ``embed_id``
    maps each pair to a row of the unique embedding matrix.
    """

    pairs_x: np.ndarray  # int64 [P]
    y_starts: np.ndarray  # int64 [n_y + 1]
    embed_id: np.ndarray  # int64 [P]
    embeddings: np.ndarray  # [n_unique, width]
    mask: np.ndarray  # float64 [P], 1.0 inside the radius
    n_x: int
    n_y: int

    def __post_init__(self) -> None:
        self._mask_trivial = bool(np.all(self.mask == 1.0))

    @property
    def mask_is_trivial(self) -> bool:
        return self._mask_trivial

    @property
    def n_pairs(self) -> int:
        return int(self.pairs_x.shape[0])

    def pairs_y(self) -> np.ndarray:
        counts = np.diff(self.y_starts)
        return np.repeat(np.arange(self.n_y, dtype=np.int64), counts)

    def pair_list(self) -> list[tuple[int, int]]:
        """(y_index, x_index) tuples in storage order; for oracle comparison."""
        return list(zip(self.pairs_y().tolist(), self.pairs_x.tolist()))


def _angular_knearest(in_set: AngularSet, out_set: AngularSet, k_q: int, d_max: float):
    """k nearest active input slots per output slot, plus the radius mask.

    Returns (ang_idx [q_out, k], ang_mask [q_out, k], dcos [q_out, q_in]).
    Selection keeps the k nearest regardless of d_max; the mask carries the
    radius constraint. Ties resolve by ascending slot index.
    """
    act = np.flatnonzero(in_set.active)
    dists = dang_matrix(out_set.units, in_set.units[act])  # [q_out, n_act]
    k = min(k_q, act.size)
    order = np.argsort(dists, axis=1, kind="stable")[:, :k]
    ang_idx = act[order]
    ang_dist = np.take_along_axis(dists, order, axis=1)
    ang_mask = (ang_dist <= d_max).astype(np.float64)
    dcos = dcos_matrix(out_set.units, in_set.units)
    return ang_idx, ang_mask, dcos


def _angular_identity(point_set: AngularSet):
    q = len(point_set)
    ang_idx = np.arange(q, dtype=np.int64)[:, None]
    ang_mask = np.ones((q, 1), dtype=np.float64)
    dcos = np.ones((q, q), dtype=np.float64)
    return ang_idx, ang_mask, dcos


def _offset_list(spatial_extent: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    ranges = [(-1, 0, 1) if e == 3 else (0,) for e in spatial_extent]
    return list(itertools.product(*ranges))


def _assemble_neighborhood(
    shape: tuple[int, int, int],
    in_set: AngularSet,
    out_set: AngularSet,
    offsets: list[tuple[int, int, int]],
    ang_idx: np.ndarray,
    ang_mask: np.ndarray,
    dcos: np.ndarray,
    embedding: EmbeddingConfig,
    centroid,
    prefilter: bool,
) -> Neighborhood:
    nx, ny, nz = shape
    nvox = nx * ny * nz
    q_in, q_out = len(in_set), len(out_set)
    k = ang_idx.shape[1]
    n_off = len(offsets)

    vox = np.arange(nvox, dtype=np.int64)
    cu, rem = np.divmod(vox, ny * nz)
    cv, cw = np.divmod(rem, nz)

    # neighbor voxel per offset, -1 where the window falls off the patch
    nb_flat = np.empty((nvox, n_off), dtype=np.int64)
    valid_off = np.empty((nvox, n_off), dtype=bool)
    for m, (du, dv, dw) in enumerate(offsets):
        uu, vv, ww = cu + du, cv + dv, cw + dw
        ok = (0 <= uu) & (uu < nx) & (0 <= vv) & (vv < ny) & (0 <= ww) & (ww < nz)
        valid_off[:, m] = ok
        nb_flat[:, m] = np.where(ok, (uu * ny + vv) * nz + ww, -1)

    # pair tables ordered (voxel, target slot, offset, angular rank)
    x_idx = nb_flat[:, None, :, None] * q_in + ang_idx[None, :, None, :]
    eid = (
        np.arange(n_off, dtype=np.int64)[None, None, :, None] * (q_out * k)
        + np.arange(q_out, dtype=np.int64)[None, :, None, None] * k
        + np.arange(k, dtype=np.int64)[None, None, None, :]
    )
    mask4 = np.broadcast_to(ang_mask[None, :, None, :], (nvox, q_out, n_off, k))
    valid = np.broadcast_to(valid_off[:, None, :, None], (nvox, q_out, n_off, k))
    if prefilter:
        valid = valid & (mask4 > 0)

    counts = valid.reshape(nvox * q_out, -1).sum(axis=1)
    if prefilter and np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise ValueError(f"empty neighborhood for output point {bad}")
    flat_valid = valid.reshape(-1)
    pairs_x = x_idx.reshape(-1)[flat_valid]
    embed_id = np.broadcast_to(eid, (nvox, q_out, n_off, k)).reshape(-1)[flat_valid]
    mask = np.ones_like(pairs_x, dtype=np.float64) if prefilter else mask4.reshape(-1)[flat_valid]
    y_starts = np.zeros(nvox * q_out + 1, dtype=np.int64)
    np.cumsum(counts, out=y_starts[1:])

    # unique embedding rows indexed by (offset, target slot, angular rank)
    off_arr = np.asarray(offsets, dtype=np.float64)
    t_grid = np.tile(np.repeat(np.arange(q_out), k), n_off)
    s_grid = np.tile(ang_idx.reshape(-1), n_off)
    o_grid = np.repeat(np.arange(n_off), q_out * k)
    p_rows = embedding_rows(
        off_arr[o_grid],
        in_set.rhos[s_grid],
        out_set.rhos[t_grid],
        dcos[t_grid, s_grid],
        embedding,
        centroid,
    )
    return Neighborhood(
        pairs_x=pairs_x,
        y_starts=y_starts,
        embed_id=embed_id,
        embeddings=embed_rows(p_rows, embedding),
        mask=mask,
        n_x=nvox * q_in,
        n_y=nvox * q_out,
    )


def grid_neighborhood(
    shape: tuple[int, int, int],
    in_set: AngularSet,
    out_set: AngularSet,
    cfg: PCConvLayerConfig,
    centroid=None,
    prefilter: bool = False,
) -> Neighborhood:
    """Neighborhood for a layer whose points live on a regular voxel grid.

    With ``prefilter`` the radius constraint removes pairs up front (raising
    if some output point keeps none); otherwise the constraint is carried by
    the mask, which is numerically identical wherever both are defined.
    """
    ang_idx, ang_mask, dcos = _angular_knearest(in_set, out_set, cfg.k_q, cfg.d_max)
    return _assemble_neighborhood(
        shape, in_set, out_set, _offset_list(cfg.spatial_extent),
        ang_idx, ang_mask, dcos, cfg.embedding, centroid, prefilter,
    )


def axis_neighborhood(
    shape: tuple[int, int, int],
    point_set: AngularSet,
    axis: int,
    cfg: PCConvLayerConfig,
    centroid=None,
) -> Neighborhood:
    """Extent-3 window along one spatial axis with the angular slot fixed."""
    extent = tuple(3 if a == axis else 1 for a in range(3))
    ang_idx, ang_mask, dcos = _angular_identity(point_set)
    return _assemble_neighborhood(
        shape, point_set, point_set, _offset_list(extent),
        ang_idx, ang_mask, dcos, cfg.embedding, centroid, prefilter=False,
    )


def build_neighborhood(
    x_points: Sequence[QSpacePoint],
    y_points: Sequence[QSpacePoint],
    cfg: PCConvLayerConfig,
    padding_mask=None,
    centroid=None,
    prefilter: bool = False,
) -> Neighborhood:
    """Neighborhood from flat q-space point lists.

    The input points must factor into a regular voxel grid crossed with one
    shared angular slot list (the layout every patch uses); the point index
    convention is voxel-major, slot-minor.
    """
    coords = np.array([[p.u, p.v, p.w] for p in x_points], dtype=np.float64)
    mins = coords.min(axis=0)
    shape = tuple(int(d) + 1 for d in (coords.max(axis=0) - mins))
    nvox = int(np.prod(shape))
    if len(x_points) % nvox != 0:
        raise ValueError("x_points do not fill a regular grid")
    q_in = len(x_points) // nvox
    in_set = AngularSet.from_points(x_points[:q_in], None if padding_mask is None else padding_mask[:q_in])
    # verify the voxel-major product layout
    _, ny, nz = shape
    for i, p in enumerate(x_points):
        vox, slot = divmod(i, q_in)
        u, rem = divmod(vox, ny * nz)
        v, w = divmod(rem, nz)
        if (p.u - mins[0], p.v - mins[1], p.w - mins[2]) != (u, v, w):
            raise ValueError(f"x_points[{i}] breaks the voxel-major grid layout")
        if abs(p.rho - in_set.rhos[slot]) > 0 or not np.array_equal(p.dir.unit, in_set.units[slot]):
            raise ValueError(f"x_points[{i}] breaks the shared angular slot layout")
    ycoords = np.array([[p.u, p.v, p.w] for p in y_points], dtype=np.float64)
    q_out = len(y_points) // nvox
    if len(y_points) % nvox != 0 or not np.array_equal(np.unique(ycoords, axis=0), np.unique(coords, axis=0)):
        raise ValueError("y_points must cover the same grid")
    out_set = AngularSet.from_points(y_points[:q_out])
    return grid_neighborhood(shape, in_set, out_set, cfg, centroid, prefilter)


def _init_uniform(rng: np.random.Generator, shape, k_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / k_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class HyperNet:
    """Two hidden dense layers with leaky ReLU, plus linear output heads.

    All heads share the trunk; a plain layer uses head 0, an axis-factorized
    layer owns one head per pass.
    """

    def __init__(self, in_width, hidden_width, out_dims, rng, dtype=np.float32, name="hyper"):
        self.in_width = int(in_width)
        self.hidden_width = int(hidden_width)
        self.out_dims = tuple(int(d) for d in out_dims)
        self.w1 = Parameter(_init_uniform(rng, (in_width, hidden_width), in_width, dtype), f"{name}.w1")
        self.b1 = Parameter(_init_uniform(rng, (hidden_width,), in_width, dtype), f"{name}.b1")
        self.w2 = Parameter(_init_uniform(rng, (hidden_width, hidden_width), hidden_width, dtype), f"{name}.w2")
        self.b2 = Parameter(_init_uniform(rng, (hidden_width,), hidden_width, dtype), f"{name}.b2")
        self.heads = [
            (
                Parameter(_init_uniform(rng, (hidden_width, od), hidden_width, dtype), f"{name}.head{i}.w"),
                Parameter(_init_uniform(rng, (od,), hidden_width, dtype), f"{name}.head{i}.b"),
            )
            for i, od in enumerate(self.out_dims)
        ]

    def __call__(self, emb: Tensor, head: int = 0) -> Tensor:
        if emb.data.ndim != 2 or emb.data.shape[1] != self.in_width:
            raise ValueError(f"embedding width {emb.data.shape} does not match hypernet input {self.in_width}")
        h = ad.leaky_relu(ad.add_bias(ad.matmul(emb, self.w1), self.b1), 0.1)
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, self.w2), self.b2), 0.1)
        hw, hb = self.heads[head]
        return ad.add_bias(ad.matmul(h, hw), hb)

    def forward_np(self, emb: np.ndarray, head: int = 0) -> np.ndarray:
        """Graph-free forward used by the inference weight cache."""
        h = emb @ self.w1.data + self.b1.data
        h = np.where(h > 0, h, h * 0.1)
        h = h @ self.w2.data + self.b2.data
        h = np.where(h > 0, h, h * 0.1)
        hw, hb = self.heads[head]
        return h @ hw.data + hb.data

    def parameters(self) -> list[Parameter]:
        out = [self.w1, self.b1, self.w2, self.b2]
        for hw, hb in self.heads:
            out += [hw, hb]
        return out


def sample_weights(hypernet: HyperNet, embeddings: Tensor) -> Tensor:
    """Batched kernel-weight sampling: one output row per embedding row."""
    return hypernet(embeddings, head=0)


CACHE_QUANTUM = 1e-9


class WeightCache:
    """Inference-time memo of sampled weights, keyed by quantized embeddings."""

    def __init__(self):
        self._store: dict[tuple[int, bytes], np.ndarray] = {}
        self.rows_evaluated = 0
        self.hits = 0

    def _key(self, row: np.ndarray, head: int) -> tuple[int, bytes]:
        return head, np.rint(row / CACHE_QUANTUM).astype(np.int64).tobytes()

    def rows(self, hyper: HyperNet, emb: np.ndarray, head: int = 0) -> np.ndarray:
        keys = [self._key(row, head) for row in emb]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        self.hits += len(keys) - len(missing)
        if missing:
            fresh = hyper.forward_np(emb[missing], head)
            self.rows_evaluated += len(missing)
            for i, row in zip(missing, fresh):
                self._store[keys[i]] = row
        return np.stack([self._store[k] for k in keys])


class PCConvLayer:
    """One continuous-convolution layer (joint spatial-angular kernel)."""

    def __init__(self, cfg: PCConvLayerConfig, hyper_width: int, rng, dtype=np.float32, name="pcconv"):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.name = name
        self.hyper = HyperNet(
            cfg.embedding.width, hyper_width, (cfg.hyper_out_dim,), rng, self.dtype, f"{name}.hyper"
        )
        self.w_out = None
        if cfg.weight_mode in ("per_channel", "scalar"):
            self.w_out = Parameter(
                _init_uniform(rng, (cfg.in_channels, cfg.out_channels), cfg.in_channels, self.dtype),
                f"{name}.w_out",
            )
        self.cache: WeightCache | None = None

    def enable_cache(self) -> WeightCache:
        self.cache = WeightCache()
        return self.cache

    def disable_cache(self) -> None:
        self.cache = None

    def parameters(self) -> list[Parameter]:
        out = self.hyper.parameters()
        if self.w_out is not None:
            out.append(self.w_out)
        return out

    def _sampled_pair_weights(self, nbhd: Neighborhood, head: int, inference_ok: bool) -> Tensor:
        emb = nbhd.embeddings.astype(self.dtype)
        if self.cache is not None:
            if not inference_ok:
                raise RuntimeError("weight cache is inference-only; disable it before training")
            unique = Tensor(self.cache.rows(self.hyper, emb, head))
        else:
            unique = self.hyper(Tensor(emb), head)
        return ad.gather_rows(unique, nbhd.embed_id)

    def _apply(self, features: Tensor, nbhd: Neighborhood, head: int, w_out) -> Tensor:
        cfg = self.cfg
        if features.data.shape != (nbhd.n_x, cfg.in_channels):
            raise ValueError(
                f"features shape {features.data.shape} does not match ({nbhd.n_x}, {cfg.in_channels})"
            )
        w_pairs = self._sampled_pair_weights(nbhd, head, inference_ok=not features.requires_grad)
        f_pairs = ad.gather_rows(features, nbhd.pairs_x)
        if cfg.weight_mode == "full":
            w3 = ad.reshape(w_pairs, (nbhd.n_pairs, cfg.in_channels, cfg.out_channels))
            z = ad.pair_contract(f_pairs, w3)
        else:
            z = ad.mul(f_pairs, w_pairs)
        if not nbhd.mask_is_trivial:
            z = ad.mul_const(z, nbhd.mask[:, None].astype(self.dtype))
        h = ad.segment_sum(z, nbhd.y_starts, nbhd.n_y)
        if cfg.weight_mode == "full":
            return h
        return ad.matmul(h, w_out)

    def forward(self, features: Tensor, nbhd: Neighborhood) -> Tensor:
        return self._apply(features, nbhd, head=0, w_out=self.w_out)


class AxisFactorizedLayer:
    """A 3x3x3-by-angular kernel factorized into four sequential passes.

    Three extent-3 passes (one per spatial axis, angular slot fixed) feed a
    spatially pointwise angular pass that maps onto the output point set. The
    passes share one hypernetwork trunk with a head per pass; each pass has
    its own channel projection. The first three keep the input channel width,
    the last projects to the output width.
    """

    def __init__(self, cfg: PCConvLayerConfig, hyper_width: int, rng, dtype=np.float32, name="fact"):
        if cfg.spatial_extent != (3, 3, 3):
            raise ValueError("axis factorization expects a 3x3x3 spatial extent")
        if cfg.weight_mode == "full":
            raise ValueError("axis factorization requires a channel-factorized weight mode")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.name = name
        per_pass = cfg.in_channels if cfg.weight_mode == "per_channel" else 1
        self.hyper = HyperNet(
            cfg.embedding.width, hyper_width, (per_pass,) * 4, rng, self.dtype, f"{name}.hyper"
        )
        c = cfg.in_channels
        self.w_outs = [
            Parameter(_init_uniform(rng, (c, c), c, self.dtype), f"{name}.pass{i}.w_out") for i in range(3)
        ]
        self.w_outs.append(
            Parameter(_init_uniform(rng, (c, cfg.out_channels), c, self.dtype), f"{name}.pass3.w_out")
        )
        self.cache: WeightCache | None = None

    def enable_cache(self) -> WeightCache:
        self.cache = WeightCache()
        return self.cache

    def disable_cache(self) -> None:
        self.cache = None

    def parameters(self) -> list[Parameter]:
        return self.hyper.parameters() + list(self.w_outs)

    def forward(self, features: Tensor, nbhds: Sequence[Neighborhood]) -> Tensor:
        """Apply the four passes; nbhds holds the three axis neighborhoods
        followed by the angular one."""
        if len(nbhds) != 4:
            raise ValueError(f"expected 4 neighborhoods, got {len(nbhds)}")
        h = features
        for i, nbhd in enumerate(nbhds):
            pass_layer = _PassView(self, i)
            h = pass_layer._apply(h, nbhd, head=i, w_out=self.w_outs[i])
        return h


class _PassView(PCConvLayer):
    """Adapter exposing one factorized pass through the plain-layer plumbing."""

    def __init__(self, owner: AxisFactorizedLayer, index: int):
        self.cfg = PCConvLayerConfig(
            spatial_extent=(1, 1, 1) if index == 3 else tuple(3 if a == index else 1 for a in range(3)),
            k_q=owner.cfg.k_q,
            d_max=owner.cfg.d_max,
            in_channels=owner.cfg.in_channels,
            out_channels=owner.cfg.out_channels if index == 3 else owner.cfg.in_channels,
            weight_mode=owner.cfg.weight_mode,
            embedding=owner.cfg.embedding,
        )
        self.dtype = owner.dtype
        self.name = f"{owner.name}.pass{index}"
        self.hyper = owner.hyper
        self.w_out = owner.w_outs[index]
        self.cache = owner.cache


def pcconv_forward(features: Tensor, nbhd: Neighborhood, layer: PCConvLayer) -> Tensor:
    """Apply a layer to features indexed like the neighborhood's input points."""
    return layer.forward(features, nbhd)


def axis_factorized_forward(
    features: Tensor, nbhds: Sequence[Neighborhood], layer: AxisFactorizedLayer
) -> Tensor:
    return layer.forward(features, nbhds)
