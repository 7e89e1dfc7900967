"""Atom density model and voxelization of complexes onto cubic grids.

Density of a single atom of van der Waals radius r at distance d, with a
cutoff multiplier m (default 1.5):

    exp(-2 d^2 / r^2)                      for 0 <= d < r
    a d^2 + b d + c                        for r <= d < m r
    0                                      for d >= m r

where (a, b, c) define the unique quadratic matching the Gaussian's value
and first derivative at d = r and vanishing at d = m r. For m = 1.5 this is
(4 / (e^2 r^2), -12 / (e^2 r), 9 / e^2). For m > 1.5 that quadratic dips
slightly below zero before its root at m r; density is floored at zero so
grids stay nonnegative. m = 1 has no quadratic segment at all: the Gaussian
truncates at r.

A grid holds one cube of side `dimension` per channel, sampled every
`resolution` angstroms, centered on a caller-supplied point. Atoms
accumulate additively per channel ("gaussian" occupancy) or as a hard
indicator of d < r ("boolean" occupancy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .moldata import SMINA34, AtomTypeScheme, Molecule

SUPPORTED_RESOLUTIONS = (0.25, 0.5, 0.75, 1.0, 1.5)
SUPPORTED_MULTIPLIERS = (1.0, 1.25, 1.5, 1.75, 2.0)
OCCUPANCY_MODES = ("gaussian", "boolean")


def quadratic_coefficients(r: float, multiplier: float) -> tuple[float, float, float]:
    """Coefficients (a, b, c) of the density tail on [r, multiplier * r].

    Solves for value and slope continuity with the Gaussian at d = r plus a
    zero at d = multiplier * r. Undefined at multiplier = 1 (the segment is
    empty there).
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    if multiplier <= 1:
        raise ValueError("quadratic segment requires multiplier > 1")
    m = multiplier
    e2 = float(np.exp(-2.0))
    span2 = (m - 1.0) ** 2
    a = e2 * (4.0 * (m - 1.0) - 1.0) / (r * r * span2)
    b = -(e2 / r) * (4.0 + 2.0 * (4.0 * m - 5.0) / span2)
    c = e2 * (5.0 + (4.0 * m - 5.0) / span2)
    return a, b, c


def atom_density(d, r: float, multiplier: float = 1.5):
    """Density contribution at distance(s) `d` from an atom of radius `r`.

    Accepts a scalar or array of nonnegative distances; returns float64 of
    the same shape. Nonincreasing in d, continuous everywhere, continuously
    differentiable at d = r.
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    if multiplier < 1:
        raise ValueError(f"multiplier must be >= 1, got {multiplier}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    gauss = np.exp(-2.0 * (d * d) / (r * r))
    if multiplier == 1.0:
        out = np.where(d < r, gauss, 0.0)
    else:
        a, b, c = quadratic_coefficients(r, multiplier)
        quad = (a * (d * d) + b * d) + c
        out = np.where(d < r, gauss, np.where(d < multiplier * r, quad, 0.0))
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class GridConfig:
    """Geometry and mode of one voxelization.

    `dimension` is the cube side in angstroms; `dimension / resolution`
    must come out to a whole number of points per side.
    """

    dimension: float = 24.0
    resolution: float = 0.5
    radius_multiplier: float = 1.5
    occupancy: str = "gaussian"
    scheme: AtomTypeScheme = field(default=SMINA34)

    def __post_init__(self):
        if not self.dimension > 0:
            raise ValueError(f"dimension must be positive, got {self.dimension}")
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ValueError(
                f"resolution {self.resolution} not in {SUPPORTED_RESOLUTIONS}"
            )
        if self.radius_multiplier not in SUPPORTED_MULTIPLIERS:
            raise ValueError(
                f"radius_multiplier {self.radius_multiplier} not in {SUPPORTED_MULTIPLIERS}"
            )
        if self.occupancy not in OCCUPANCY_MODES:
            raise ValueError(f"occupancy {self.occupancy!r} not in {OCCUPANCY_MODES}")
        ratio = self.dimension / self.resolution
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                f"dimension {self.dimension} is not a multiple of resolution {self.resolution}"
            )

    @property
    def points_per_side(self) -> int:
        return int(round(self.dimension / self.resolution))

    @property
    def channel_count(self) -> int:
        return self.scheme.channel_count

    def grid_axes(self, center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Point coordinates along each axis for a grid centered on `center`."""
        center = _check_center(center)
        n = self.points_per_side
        offsets = (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * self.resolution
        return (center[0] + offsets, center[1] + offsets, center[2] + offsets)


def _check_center(center) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (3,):
        raise ValueError(f"center must have shape (3,), got {center.shape}")
    if not np.all(np.isfinite(center)):
        raise ValueError("center must be finite")
    return center


@dataclass(frozen=True)
class Transform:
    """A rigid-body pose perturbation: rotate about the grid center, then
    translate. The quaternion is (w, x, y, z) and must be unit length."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {t.shape}")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {norm} is not 1 within 1e-9")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Transform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.quaternion
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, points, center) -> np.ndarray:
        """Transform points (shape (3,) or (n, 3)) about `center`."""
        center = _check_center(center)
        pts = np.asarray(points, dtype=np.float64)
        rot = self.rotation_matrix()
        return (pts - center) @ rot.T + center + self.translation


def sample_transform(rng: np.random.Generator, max_translate: float = 0.0,
                     rotate: bool = True) -> Transform:
    """Draw a uniform random rotation and a translation inside a ball.

    The quaternion is a normalized 4-vector of standard normals (uniform on
    the rotation group); the translation is rejection-sampled from the cube
    into the ball of radius `max_translate`.
    """
    if max_translate < 0:
        raise ValueError(f"max_translate must be >= 0, got {max_translate}")
    if rotate:
        while True:
            q = rng.standard_normal(4)
            norm = float(np.linalg.norm(q))
            if norm > 1e-8:
                q = q / norm
                break
    else:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    if max_translate > 0:
        while True:
            t = rng.uniform(-max_translate, max_translate, size=3)
            if float(np.linalg.norm(t)) <= max_translate:
                break
    else:
        t = np.zeros(3)
    return Transform(q, t)


@dataclass(frozen=True)
class DensityGrid:
    """The output of one voxelization: (channels, n, n, n) float64 values
    plus the geometry that produced them."""

    values: np.ndarray
    center: np.ndarray
    config: GridConfig
    transform: Transform

    def __post_init__(self):
        n = self.config.points_per_side
        expected = (self.config.channel_count, n, n, n)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains non-finite values")
        if self.values.size and float(self.values.min()) < 0:
            raise ValueError("grid contains negative values")
        object.__setattr__(self, "center", _check_center(self.center))


def _require_typed(mol: Molecule, scheme: AtomTypeScheme, expected_role: str):
    if mol.role != expected_role:
        raise ValueError(f"expected a {expected_role} molecule, got role {mol.role!r}")
    if mol.atoms and mol.scheme != scheme.name:
        raise ValueError(
            f"molecule typed under {mol.scheme!r}; grid scheme is {scheme.name!r}"
        )


def add_molecule_density(values: np.ndarray, mol: Molecule, center, config: GridConfig,
                         transform: Transform | None = None) -> None:
    """Accumulate one molecule's channel densities into `values` in place.

    Atoms are processed in input order; channel-less atoms contribute
    nothing. `values` must be (channels, n, n, n) float64.
    """
    if transform is None:
        transform = Transform.identity()
    center = _check_center(center)
    axes = config.grid_axes(center)
    mult = config.radius_multiplier
    boolean = config.occupancy == "boolean"
    for atom in mol.atoms:
        if atom.channel is None:
            continue
        pos = transform.apply(atom.position.astype(np.float64), center)
        r = atom.vdw_radius
        cutoff = r * mult
        slices = []
        deltas = []
        empty = False
        for axis_idx in range(3):
            axis = axes[axis_idx]
            lo = int(np.searchsorted(axis, pos[axis_idx] - cutoff, side="left"))
            hi = int(np.searchsorted(axis, pos[axis_idx] + cutoff, side="right"))
            if hi <= lo:
                empty = True
                break
            slices.append(slice(lo, hi))
            deltas.append(axis[lo:hi] - pos[axis_idx])
        if empty:
            continue
        dx, dy, dz = deltas
        d2 = (dx * dx)[:, None, None] + (dy * dy)[None, :, None] + (dz * dz)[None, None, :]
        d = np.sqrt(d2)
        region = values[atom.channel, slices[0], slices[1], slices[2]]
        if boolean:
            np.maximum(region, (d < r).astype(np.float64), out=region)
        else:
            region += atom_density(d, r, mult)


def molecule_density(mol: Molecule, center, config: GridConfig,
                     transform: Transform | None = None) -> np.ndarray:
    """One molecule's density over a fresh zero grid."""
    n = config.points_per_side
    values = np.zeros((config.channel_count, n, n, n), dtype=np.float64)
    add_molecule_density(values, mol, center, config, transform)
    return values


def voxelize(receptor: Molecule, ligand: Molecule, center, config: GridConfig,
             transform: Transform | None = None) -> DensityGrid:
    """Voxelize a complex: receptor atoms first, then ligand atoms.

    Both molecules must already be typed under the grid's scheme. The same
    rigid transform is applied to every atom of both molecules.
    """
    if transform is None:
        transform = Transform.identity()
    scheme = config.scheme
    _require_typed(receptor, scheme, "receptor")
    _require_typed(ligand, scheme, "ligand")
    center = _check_center(center)
    n = config.points_per_side
    values = np.zeros((config.channel_count, n, n, n), dtype=np.float64)
    add_molecule_density(values, receptor, center, config, transform)
    add_molecule_density(values, ligand, center, config, transform)
    return DensityGrid(values=values, center=center, config=config, transform=transform)


GRID_MAGIC = b"VXGR"


def write_grid_dump(values: np.ndarray, resolution: float) -> bytes:
    """Serialize grid values: magic, points per side, channels, resolution,
    then float32 little-endian values in channel-major order."""
    values = np.asarray(values)
    if not (values.ndim == 4 and values.shape[1] == values.shape[2] == values.shape[3]):
        raise ValueError(f"expected (channels, n, n, n) values, got {values.shape}")
    channels, n = values.shape[0], values.shape[1]
    header = GRID_MAGIC + np.array([n, channels], dtype="<i4").tobytes()
    header += np.array([resolution], dtype="<f8").tobytes()
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def read_grid_dump(data: bytes) -> tuple[np.ndarray, float]:
    """Inverse of write_grid_dump: (float32 values, resolution)."""
    head = 4 + 8 + 8
    if len(data) < head:
        raise FormatError("grid dump too short for its header")
    if data[:4] != GRID_MAGIC:
        raise FormatError(f"bad grid magic {data[:4]!r}")
    n, channels = (int(v) for v in np.frombuffer(data[4:12], dtype="<i4"))
    resolution = float(np.frombuffer(data[12:20], dtype="<f8")[0])
    if n <= 0 or channels <= 0:
        raise FormatError(f"bad grid dimensions n={n} channels={channels}")
    expected = channels * n * n * n * 4
    body = data[head:]
    if len(body) != expected:
        raise FormatError(f"grid dump payload {len(body)} bytes, expected {expected}")
    values = np.frombuffer(body, dtype="<f4").reshape(channels, n, n, n)
    return values.copy(), resolution
