"""Synthetic multi-tensor diffusion phantoms and the training data pipeline.

The phantom is a desk-scale stand-in for an acquired dataset: per voxel, the
signal is a weighted mixture of Gaussian diffusion tensors,

    S(b, g) = S0 * sum_f w_f * exp(-b * g^T D_f g),

optionally corrupted by Rician noise (|S + n1 + i*n2| with Gaussian n). The
analytic model makes ground truth available at any direction, which is what
lets angular super-resolution be verified exactly.

Training examples follow the sampling scheme the network is trained with:
random input/output shells, q_in uniform on {6..20}, greedy farthest-point
direction subsets, zero-filled input slots up to 20, and a normalized
patch-centroid coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .geometry import Direction, QSpacePoint, Shell

PATCH_SIZE = 10
INPUT_SLOTS = 20
Q_IN_CHOICES = tuple(range(6, 21))

FORMAT_VERSION = 1


@dataclass(frozen=True)
class FiberPopulation:
    """One tensor compartment: mixing weight, principal axis, diffusivities."""

    weight: float
    direction: np.ndarray  # unit 3-vector
    axial_diffusivity: float  # mm^2/s
    radial_diffusivity: float  # mm^2/s

    def tensor(self) -> np.ndarray:
        if self.axial_diffusivity <= 0 or self.radial_diffusivity <= 0:
            raise ValueError("diffusivities must be positive")
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        lam_r = self.radial_diffusivity
        lam_a = self.axial_diffusivity
        return lam_r * np.eye(3) + (lam_a - lam_r) * np.outer(d, d)


@dataclass(frozen=True)
class PhantomRegion:
    """Spatial predicate plus the fiber populations active inside it.

    The predicate receives voxel index arrays (u, v, w) and returns a boolean
    array; the first matching region claims a voxel.
    """

    predicate: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    populations: tuple[FiberPopulation, ...]

    def __post_init__(self) -> None:
        total = sum(p.weight for p in self.populations)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"population weights must sum to 1, got {total}")


@dataclass(frozen=True)
class PhantomSpec:
    regions: tuple[PhantomRegion, ...]
    shape: tuple[int, int, int]
    s0: float = 1000.0
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class NormalizationRecord:
    """Division factor that maps the 99th percentile of |masked data| to 1."""

    scale: float


@dataclass
class VolumeSet:
    """A stack of volumes sharing one spatial grid.

    intensities is [X, Y, Z, V]; points holds the angular coordinate of each
    volume (b=0 volumes carry the fixed placeholder direction).
    """

    intensities: np.ndarray
    points: list[QSpacePoint]
    brain_mask: np.ndarray
    norm: NormalizationRecord | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.intensities.ndim != 4 or self.intensities.shape[3] != len(self.points):
            raise ValueError("intensities must be [X, Y, Z, V] with V matching points")
        if self.brain_mask.shape != self.intensities.shape[:3]:
            raise ValueError("mask shape must match the spatial shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape[:3]

    def shells(self) -> list[Shell]:
        """Group the non-b0 volumes into shells, ascending b-value."""
        by_bval: dict[float, list[Direction]] = {}
        for p in self.points:
            if p.rho > 0:
                by_bval.setdefault(p.rho, []).append(p.dir)
        return [Shell(bval=b, directions=tuple(by_bval[b])) for b in sorted(by_bval)]

    def volume_indices(self, bval: float) -> list[int]:
        return [i for i, p in enumerate(self.points) if p.rho == bval]


def default_phantom_spec(
    shape=(20, 20, 20),
    noise_sigma=0.0,
    seed=0,
    s0=1000.0,
    fiber_axial=1.7e-3,
    fiber_radial=0.3e-3,
) -> PhantomSpec:
    """Crossing-fiber slabs over an isotropic background.

    Two anisotropic slabs cross in the middle half of the volume (where both
    fiber populations mix), and everything else is mildly anisotropic with a
    seeded random orientation, so no voxel is angularly flat. The slab
    diffusivities are configurable; tightly packed axons (high axial, low
    radial) give the sharpest angular contrast.
    """
    rng = np.random.default_rng(seed)
    nx = shape[0]
    lo, hi = nx / 4.0, 3.0 * nx / 4.0
    rot = geo.random_rotation(rng)
    dir_a = rot @ np.array([1.0, 0.0, 0.0])
    dir_b = rot @ np.array([0.0, 1.0, 0.0])
    dir_bg = rot @ (np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0))
    fiber = dict(axial_diffusivity=fiber_axial, radial_diffusivity=fiber_radial)

    regions = (
        PhantomRegion(
            predicate=lambda u, v, w, lo=lo, hi=hi: (u >= lo) & (u < hi) & (v >= lo) & (v < hi),
            populations=(
                FiberPopulation(0.5, dir_a, **fiber),
                FiberPopulation(0.5, dir_b, **fiber),
            ),
        ),
        PhantomRegion(
            predicate=lambda u, v, w, lo=lo, hi=hi: (u >= lo) & (u < hi),
            populations=(FiberPopulation(1.0, dir_a, **fiber),),
        ),
        PhantomRegion(
            predicate=lambda u, v, w, lo=lo, hi=hi: (v >= lo) & (v < hi),
            populations=(FiberPopulation(1.0, dir_b, **fiber),),
        ),
        PhantomRegion(
            predicate=lambda u, v, w: np.ones_like(u, dtype=bool),
            populations=(FiberPopulation(1.0, dir_bg, axial_diffusivity=1.2e-3, radial_diffusivity=0.6e-3),),
        ),
    )
    return PhantomSpec(regions=regions, shape=shape, s0=s0, noise_sigma=noise_sigma, seed=seed)


def _region_map(spec: PhantomSpec) -> np.ndarray:
    """First-match region index per voxel; raises if any voxel is unclaimed."""
    nx, ny, nz = spec.shape
    u, v, w = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    owner = np.full(spec.shape, -1, dtype=np.int64)
    for r, region in enumerate(spec.regions):
        hit = region.predicate(u, v, w) & (owner < 0)
        owner[hit] = r
    if np.any(owner < 0):
        raise ValueError("phantom regions do not cover the volume")
    return owner


def signal_at(spec: PhantomSpec, bval: float, units: np.ndarray) -> np.ndarray:
    """Noise-free signal at arbitrary directions, [X, Y, Z, len(units)].

    This is the analytic ground-truth continuation used to verify predictions
    at directions that were never acquired.
    """
    units = np.atleast_2d(np.asarray(units, dtype=np.float64))
    owner = _region_map(spec)
    out = np.zeros(spec.shape + (units.shape[0],), dtype=np.float64)
    for r, region in enumerate(spec.regions):
        weight_sum = np.zeros(units.shape[0])
        for pop in region.populations:
            quad = np.einsum("nd,de,ne->n", units, pop.tensor(), units)
            weight_sum += pop.weight * np.exp(-bval * quad)
        out[owner == r] = spec.s0 * weight_sum
    return out


def default_brain_mask(shape: tuple[int, int, int]) -> np.ndarray:
    """Inscribed ellipsoid occupying most of the volume."""
    nx, ny, nz = shape
    u, v, w = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cu, cv, cw = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    return ((u - cu) / (0.55 * nx)) ** 2 + ((v - cv) / (0.55 * ny)) ** 2 + (
        (w - cw) / (0.55 * nz)
    ) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, shells: Sequence[Shell], mask: np.ndarray | None = None) -> VolumeSet:
    """Simulate all shell volumes plus one b=0 volume, with Rician noise."""
    rng = np.random.default_rng(spec.seed)
    points: list[QSpacePoint] = [QSpacePoint(0, 0, 0, 0.0, geo.PLACEHOLDER_DIRECTION)]
    vols = [np.full(spec.shape, spec.s0, dtype=np.float64)]
    for shell in shells:
        clean = signal_at(spec, shell.bval, shell.units)
        vols.append(clean)
        points.extend(QSpacePoint(0, 0, 0, shell.bval, d) for d in shell.directions)
    data = np.concatenate([vols[0][..., None]] + vols[1:], axis=3)
    if spec.noise_sigma > 0:
        sigma = spec.noise_sigma * spec.s0
        n1 = rng.normal(0.0, sigma, size=data.shape)
        n2 = rng.normal(0.0, sigma, size=data.shape)
        data = np.sqrt((data + n1) ** 2 + n2**2)
    if mask is None:
        mask = default_brain_mask(spec.shape)
    return VolumeSet(intensities=data, points=points, brain_mask=mask, seed=spec.seed)


def normalize_99(vols: VolumeSet) -> tuple[VolumeSet, NormalizationRecord]:
    """Divide by the 99th percentile (linear interpolation) of |masked data|."""
    if not vols.brain_mask.any():
        raise ValueError("normalization requires a non-empty mask")
    masked = np.abs(vols.intensities[vols.brain_mask])
    scale = float(np.percentile(masked, 99.0))
    if scale == 0.0:
        raise ValueError("cannot normalize all-zero data")
    record = NormalizationRecord(scale=scale)
    out = VolumeSet(
        intensities=vols.intensities / scale,
        points=vols.points,
        brain_mask=vols.brain_mask,
        norm=record,
        seed=vols.seed,
    )
    return out, record


def denormalize(vols: VolumeSet) -> VolumeSet:
    if vols.norm is None:
        raise ValueError("volume set carries no normalization record")
    return VolumeSet(
        intensities=vols.intensities * vols.norm.scale,
        points=vols.points,
        brain_mask=vols.brain_mask,
        norm=None,
        seed=vols.seed,
    )


@dataclass(frozen=True)
class PatchDescriptor:
    origin: tuple[int, int, int]
    centroid: tuple[float, float, float]


def _mask_bbox(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argwhere(mask)
    return idx.min(axis=0), idx.max(axis=0)


def extract_patches(vols: VolumeSet, size: int = PATCH_SIZE, stride: int | None = None) -> list[PatchDescriptor]:
    """Grid of patch origins covering the brain mask.

    The centroid is the patch-center voxel coordinate normalized per axis by
    the brain-mask bounding box, clipped to [0, 1]. Patches that miss the
    mask entirely are dropped.
    """
    if stride is None:
        stride = size
    shape = vols.shape
    if any(s < size for s in shape):
        raise ValueError(f"volume {shape} is smaller than the patch size {size}")
    lo, hi = _mask_bbox(vols.brain_mask)
    extents = np.maximum(hi - lo, 1)
    axes = []
    for dim in shape:
        origins = list(range(0, dim - size + 1, stride))
        if origins[-1] != dim - size:
            origins.append(dim - size)
        axes.append(origins)
    out = []
    for ou in axes[0]:
        for ov in axes[1]:
            for ow in axes[2]:
                if not vols.brain_mask[ou : ou + size, ov : ov + size, ow : ow + size].any():
                    continue
                center = np.array([ou, ov, ow], dtype=np.float64) + (size - 1) / 2.0
                centroid = np.clip((center - lo) / extents, 0.0, 1.0)
                out.append(PatchDescriptor(origin=(ou, ov, ow), centroid=tuple(centroid)))
    return out


@dataclass
class PatchPair:
    """One training example: zero-filled input patch and its target patch."""

    x_in: np.ndarray  # [size, size, size, INPUT_SLOTS]
    in_points: list[QSpacePoint]
    padding_mask: np.ndarray  # bool [INPUT_SLOTS]
    x_out: np.ndarray  # [size, size, size, q_out]
    out_points: list[QSpacePoint]
    centroid: tuple[float, float, float]
    valid_mask: np.ndarray  # bool [size, size, size]
    q_in: int
    b_in: float
    b_out: float


def sample_training_example(
    vols: VolumeSet,
    seed: int | np.random.Generator,
    q_out: int = 10,
    size: int = PATCH_SIZE,
    patches: list[PatchDescriptor] | None = None,
) -> PatchPair:
    """Draw one training example, fully determined by the seed.

    Input and output shells are uniform over the available shells; q_in is
    uniform over {6..20}; input directions are a greedy farthest-point subset
    from a random start, and output directions continue the same greedy
    sequence on the output shell (never reusing an input direction when the
    shells coincide).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shells = vols.shells()
    if not shells:
        raise ValueError("volume set has no diffusion shells")
    shell_in = shells[int(rng.integers(len(shells)))]
    shell_out = shells[int(rng.integers(len(shells)))]
    same_shell = shell_out.bval == shell_in.bval
    if not same_shell and len(shell_out) < q_out:
        raise ValueError(f"shell b={shell_out.bval} has fewer than q_out={q_out} directions")
    # cap only bites on small desk-scale shells; with >= 20 + q_out directions
    # the draw stays uniform over the full range
    q_hi = min(Q_IN_CHOICES[-1], len(shell_in) - (q_out if same_shell else 0))
    if q_hi < Q_IN_CHOICES[0]:
        raise ValueError(f"shell b={shell_in.bval} is too small for the sampling scheme")
    q_in = int(rng.integers(Q_IN_CHOICES[0], q_hi + 1))
    q0 = int(rng.integers(len(shell_in)))
    in_idx = geo.farthest_point_subset(shell_in, q0, q_in)
    exclude = in_idx if same_shell else ()
    out_idx = geo.greedy_continuation(shell_in.units[in_idx], shell_out.units, q_out, exclude=exclude)

    if patches is None:
        patches = extract_patches(vols, size=size)
    desc = patches[int(rng.integers(len(patches)))]
    ou, ov, ow = desc.origin
    block = vols.intensities[ou : ou + size, ov : ov + size, ow : ow + size]

    in_vols = vols.volume_indices(shell_in.bval)
    out_vols = vols.volume_indices(shell_out.bval)
    x_in = np.zeros((size, size, size, INPUT_SLOTS), dtype=vols.intensities.dtype)
    for slot, i in enumerate(in_idx):
        x_in[..., slot] = block[..., in_vols[i]]
    x_out = np.stack([block[..., out_vols[i]] for i in out_idx], axis=3)

    in_points = [QSpacePoint(0, 0, 0, shell_in.bval, shell_in.directions[i]) for i in in_idx]
    in_points += [QSpacePoint(0, 0, 0, 0.0, geo.PLACEHOLDER_DIRECTION)] * (INPUT_SLOTS - q_in)
    padding_mask = np.array([False] * q_in + [True] * (INPUT_SLOTS - q_in))
    out_points = [QSpacePoint(0, 0, 0, shell_out.bval, shell_out.directions[i]) for i in out_idx]
    valid = vols.brain_mask[ou : ou + size, ov : ov + size, ow : ow + size]
    return PatchPair(
        x_in=x_in,
        in_points=in_points,
        padding_mask=padding_mask,
        x_out=x_out,
        out_points=out_points,
        centroid=desc.centroid,
        valid_mask=valid,
        q_in=q_in,
        b_in=shell_in.bval,
        b_out=shell_out.bval,
    )


def save_dataset(vols: VolumeSet, path) -> None:
    """Serialize to a directory: header.json + intensities.f32 + mask.u8."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "shape": list(vols.intensities.shape),
        "dtype": "float32",
        "seed": vols.seed,
        "norm_scale": None if vols.norm is None else vols.norm.scale,
        "points": [[*map(float, p.dir.unit), float(p.rho)] for p in vols.points],
        "shells": [{"bval": s.bval, "n_dirs": len(s)} for s in vols.shells()],
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    vols.intensities.astype("<f4").tofile(path / "intensities.f32")
    vols.brain_mask.astype(np.uint8).tofile(path / "mask.u8")
    units = np.array([p.dir.unit for p in vols.points])
    bvals = np.array([p.rho for p in vols.points])
    geo.save_bvecs(path / "bvecs.txt", units, bvals)


def load_dataset(path) -> VolumeSet:
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    shape = tuple(header["shape"])
    data = np.fromfile(path / "intensities.f32", dtype="<f4").reshape(shape).astype(np.float64)
    mask = np.fromfile(path / "mask.u8", dtype=np.uint8).reshape(shape[:3]).astype(bool)
    points = []
    for x, y, z, b in header["points"]:
        if b == 0:
            points.append(QSpacePoint(0, 0, 0, 0.0, geo.PLACEHOLDER_DIRECTION))
        else:
            # header floats round-trip exactly; from_unit keeps the stored bits
            points.append(QSpacePoint(0, 0, 0, float(b), Direction.from_unit([x, y, z])))
    norm = None if header["norm_scale"] is None else NormalizationRecord(scale=header["norm_scale"])
    return VolumeSet(intensities=data, points=points, brain_mask=mask, norm=norm, seed=header["seed"])
