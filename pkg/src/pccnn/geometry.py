"""Spherical geometry of q-space sampling schemes.

Directions are stored as canonical unit vectors. The (theta, phi) angles use
an elevation convention (theta measured from the xy-plane, phi the azimuth
in the xy-plane), under which the trigonometric similarity

    sin(theta_a)sin(theta_b) + cos(theta_a)cos(theta_b)cos(phi_a - phi_b)

is exactly the dot product of the two unit vectors. All distance logic works
on unit vectors, so no convention bug can leak into neighbor selection.

Angular distance is arccos of the (clamped) dot product; neighbor selection,
radius masking, and farthest-point subsampling all use it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNIT_NORM_TOL = 1e-9


def _as_unit(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(3).copy()
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"expected a unit vector, got norm {norm!r}")
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class Direction:
    """A point on the unit sphere: canonical unit vector plus derived angles.

    theta is the elevation (radians, in [-pi/2, pi/2]) and phi the azimuth
    (radians, in (-pi, pi]). Both are derived from ``unit`` on construction.
    """

    unit: np.ndarray
    theta: float
    phi: float

    @classmethod
    def from_unit(cls, vec) -> "Direction":
        """Build from a unit 3-vector; raises if the norm is off by > 1e-9."""
        u = _as_unit(vec)
        theta = math.asin(max(-1.0, min(1.0, float(u[2]))))
        phi = math.atan2(float(u[1]), float(u[0]))
        return cls(unit=u, theta=theta, phi=phi)

    @classmethod
    def from_vector(cls, vec) -> "Direction":
        """Build from any nonzero 3-vector, normalizing first."""
        v = np.asarray(vec, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls.from_unit(v / norm)

    @classmethod
    def from_angles(cls, theta: float, phi: float) -> "Direction":
        """Build from elevation/azimuth angles in radians."""
        u = np.array(
            [
                math.cos(theta) * math.cos(phi),
                math.cos(theta) * math.sin(phi),
                math.sin(theta),
            ]
        )
        return cls.from_unit(u / np.linalg.norm(u))


# Fixed stand-in direction for b=0 volumes and zero-fill slots.
PLACEHOLDER_DIRECTION = Direction.from_unit(np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True, eq=False)
class QSpacePoint:
    """A joint spatial-angular coordinate: voxel indices, b-value, direction."""

    u: float
    v: float
    w: float
    rho: float
    dir: Direction

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError(f"b-value must be non-negative, got {self.rho}")


@dataclass(frozen=True, eq=False)
class Shell:
    """All directions acquired at one b-value, in a stable order."""

    bval: float
    directions: tuple[Direction, ...]

    def __len__(self) -> int:
        return len(self.directions)

    @property
    def units(self) -> np.ndarray:
        return units_of(self.directions)


def units_of(directions: Sequence[Direction]) -> np.ndarray:
    """Stack directions into an [n, 3] float64 array of unit vectors."""
    return np.array([d.unit for d in directions], dtype=np.float64)


def d_cos(a: Direction, b: Direction) -> float:
    """Cosine similarity of two directions, clamped to [-1, 1].

    Computed as the dot product of the canonical unit vectors, which equals
    the elevation-convention trigonometric expression on theta/phi.
    """
    dot = float(np.dot(_as_unit(a.unit), _as_unit(b.unit)))
    return max(-1.0, min(1.0, dot))


def d_ang(a: Direction, b: Direction) -> float:
    """Angular distance in radians, arccos of the clamped cosine similarity."""
    return math.acos(d_cos(a, b))


def dcos_matrix(units_a: np.ndarray, units_b: np.ndarray) -> np.ndarray:
    """Pairwise clamped dot products, [n_a, n_b]."""
    return np.clip(np.asarray(units_a) @ np.asarray(units_b).T, -1.0, 1.0)


def dang_matrix(units_a: np.ndarray, units_b: np.ndarray) -> np.ndarray:
    """Pairwise angular distances in radians, [n_a, n_b]."""
    return np.arccos(dcos_matrix(units_a, units_b))


def k_nearest_angular(
    center: Direction,
    candidates: Sequence[Direction],
    k: int,
    d_max: float,
) -> list[int]:
    """Indices of the k angularly nearest candidates within radius d_max.

    Sorted ascending by angular distance, ties broken by ascending index.
    Returns fewer than k indices when fewer candidates lie within d_max.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(candidates) == 0:
        raise ValueError("candidate list is empty")
    dists = dang_matrix(center.unit[None, :], units_of(candidates))[0]
    order = np.lexsort((np.arange(len(candidates)), dists))
    qualifying = order[dists[order] <= d_max]
    return [int(i) for i in qualifying[:k]]


def radius_mask(
    center: Direction, candidates: Sequence[Direction], d_max: float
) -> list[bool]:
    """Per-candidate flag: angular distance to center is at most d_max."""
    dists = dang_matrix(center.unit[None, :], units_of(candidates))[0]
    return [bool(d <= d_max) for d in dists]


def farthest_point_indices(units: np.ndarray, q0: int, n: int) -> list[int]:
    """Greedy farthest-point ordering over unit vectors, starting at q0.

    Each step picks the candidate maximizing the minimum angular distance to
    everything already selected; ties resolve to the smallest index.
    """
    units = np.asarray(units, dtype=np.float64)
    total = units.shape[0]
    if not 0 <= q0 < total:
        raise ValueError(f"q0 {q0} out of range for {total} directions")
    if not 1 <= n <= total:
        raise ValueError(f"n must be in [1, {total}], got {n}")
    chosen = [q0]
    min_dist = dang_matrix(units, units[q0][None, :])[:, 0]
    min_dist[q0] = -1.0
    while len(chosen) < n:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        np.minimum(min_dist, dang_matrix(units, units[nxt][None, :])[:, 0], out=min_dist)
        min_dist[nxt] = -1.0
    return chosen


def farthest_point_subset(shell: Shell, q0: int, n: int) -> list[int]:
    """Greedy farthest-point subset of a shell's directions. See
    :func:`farthest_point_indices` for the selection rule."""
    return farthest_point_indices(shell.units, q0, n)


def greedy_continuation(
    selected_units: np.ndarray,
    candidate_units: np.ndarray,
    n: int,
    exclude: Sequence[int] = (),
) -> list[int]:
    """Continue a farthest-point sequence over a new candidate set.

    The minimum-distance bookkeeping is seeded with ``selected_units`` (for
    example, directions picked on a different shell); ``exclude`` marks
    candidate indices that must never be chosen (already-used directions of
    the same shell). Returns n candidate indices.
    """
    cand = np.asarray(candidate_units, dtype=np.float64)
    avail = cand.shape[0] - len(exclude)
    if n > avail:
        raise ValueError(f"cannot pick {n} of {avail} available candidates")
    if len(selected_units) == 0:
        raise ValueError("continuation requires a non-empty selected set")
    min_dist = dang_matrix(cand, np.asarray(selected_units)).min(axis=1)
    min_dist[list(exclude)] = -1.0
    out: list[int] = []
    while len(out) < n:
        nxt = int(np.argmax(min_dist))
        out.append(nxt)
        np.minimum(min_dist, dang_matrix(cand, cand[nxt][None, :])[:, 0], out=min_dist)
        min_dist[nxt] = -1.0
    return out


def fibonacci_directions(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors on the sphere via the golden-angle spiral."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * i / golden
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """Golden-angle spiral restricted to one hemisphere.

    Diffusion acquisition tables sample half the sphere: the magnitude signal
    is antipodally even, so a measurement at -g duplicates the one at g.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    z = (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * i / golden
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random 3x3 rotation matrix (QR sign-fixed)."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_shell(bval: float, n_dirs: int, seed: int = 0) -> Shell:
    """Acquisition-style shell: seeded random rotation of a hemisphere lattice.

    The hemisphere keeps antipodal (information-duplicate) direction pairs out
    of the table, matching how gradient schemes are designed; the rotation
    makes shells with different seeds carry distinct direction sets while
    keeping the ordering reproducible.
    """
    rot = random_rotation(np.random.default_rng(seed))
    units = fibonacci_hemisphere(n_dirs) @ rot.T
    units /= np.linalg.norm(units, axis=1, keepdims=True)
    return Shell(bval=float(bval), directions=tuple(Direction.from_unit(u) for u in units))


def save_bvecs(path, units: np.ndarray, bvals: np.ndarray) -> None:
    """Write one ``x y z b`` line per volume; b=0 rows get a zero vector."""
    units = np.asarray(units, dtype=np.float64)
    bvals = np.asarray(bvals, dtype=np.float64)
    if units.shape != (len(bvals), 3):
        raise ValueError(f"units shape {units.shape} does not match {len(bvals)} bvals")
    with open(path, "w", encoding="ascii") as fh:
        for u, b in zip(units, bvals):
            row = np.zeros(3) if b == 0 else u
            fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g} {b:.17g}\n")


def load_bvecs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a b-vector table; returns (units [n,3], bvals [n]).

    Rows with b > 0 must carry unit-norm xyz; b=0 rows may be zero vectors
    (they are returned unchanged and callers substitute a placeholder).
    """
    units = []
    bvals = []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 'x y z b', got {line!r}")
            x, y, z, b = (float(p) for p in parts)
            if b > 0 and abs(math.sqrt(x * x + y * y + z * z) - 1.0) > 1e-6:
                raise ValueError(f"{path}:{line_no}: non-unit b-vector for b={b}")
            units.append([x, y, z])
            bvals.append(b)
    return np.asarray(units, dtype=np.float64), np.asarray(bvals, dtype=np.float64)
