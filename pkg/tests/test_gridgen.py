import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from voxscore.errors import FormatError
from voxscore.gridgen import (
    GridConfig,
    SUPPORTED_MULTIPLIERS,
    Transform,
    atom_density,
    molecule_density,
    quadratic_coefficients,
    read_grid_dump,
    sample_transform,
    voxelize,
    write_grid_dump,
)
from voxscore.moldata import BINARY2, SMINA34, assign_types, parse_structure

radii = st.floats(min_value=0.5, max_value=2.5)


def typed(text, scheme=BINARY2):
    mol, _ = assign_types(parse_structure(text), scheme)
    return mol


def small_complex(scheme=BINARY2):
    rec = typed("C 1.0 0.5 -0.75 receptor R1\nN -1.5 2.0 0.25 receptor R2", scheme)
    lig = typed("O 0.5 -1.0 1.5 ligand - h_acceptor\nC 2.0 1.0 0.0 ligand", scheme)
    return rec, lig


# ------------------------------------------------------------- density shape

def test_quadratic_coefficients_default_multiplier():
    # closed forms at multiplier 1.5: 4/(e^2 r^2), -12/(e^2 r), 9/e^2
    for r in (0.7, 1.0, 1.9, 2.2):
        a, b, c = quadratic_coefficients(r, 1.5)
        e2 = math.exp(2.0)
        assert abs(a - 4.0 / (e2 * r * r)) < 1e-12
        assert abs(b - (-12.0 / (e2 * r))) < 1e-12
        assert abs(c - 9.0 / e2) < 1e-12


def test_quadratic_coefficients_generalize():
    # the tail is linear at multiplier 1.25 and must vanish at multiplier*r
    a, _, _ = quadratic_coefficients(1.9, 1.25)
    assert abs(a) < 1e-15
    for m in (1.25, 1.5, 1.75, 2.0):
        a, b, c = quadratic_coefficients(1.9, m)
        end = m * 1.9
        assert abs(a * end * end + b * end + c) < 1e-12


def test_quadratic_coefficients_validation():
    with pytest.raises(ValueError):
        quadratic_coefficients(0.0, 1.5)
    with pytest.raises(ValueError):
        quadratic_coefficients(1.9, 1.0)


def test_density_values_at_landmarks():
    assert atom_density(0.0, 1.9) == 1.0
    assert abs(atom_density(1.9, 1.9) - math.exp(-2.0)) < 1e-12
    assert atom_density(1.9 * 1.5, 1.9) == 0.0
    assert atom_density(100.0, 1.9) == 0.0


@pytest.mark.parametrize("r", [0.7, 1.0, 1.9])
@pytest.mark.parametrize("multiplier", [1.25, 1.5, 1.75, 2.0])
def test_density_continuity(r, multiplier):
    eps = 1e-7
    for knot in (r, multiplier * r):
        left = float(atom_density(knot - eps, r, multiplier))
        right = float(atom_density(knot + eps, r, multiplier))
        assert abs(left - right) < 1e-6


def test_density_smooth_at_radius():
    # one-sided difference quotients agree at d = r for the default multiplier
    r, eps = 1.9, 1e-7
    f = lambda d: float(atom_density(d, r))
    left = (f(r) - f(r - eps)) / eps
    right = (f(r + eps) - f(r)) / eps
    assert abs(left - right) < 1e-6
    assert abs(left - (-4.0 / r) * math.exp(-2.0)) < 1e-5


def test_density_truncated_gaussian_at_multiplier_one():
    # no tail segment: the value drops from e^-2 to 0 at d = r
    r = 1.9
    assert abs(float(atom_density(r - 1e-12, r, 1.0)) - math.exp(-2.0)) < 1e-9
    assert float(atom_density(r, r, 1.0)) == 0.0


@given(r=radii, multiplier=st.sampled_from(SUPPORTED_MULTIPLIERS),
       ds=st.lists(st.floats(min_value=0.0, max_value=6.0), min_size=2, max_size=40))
def test_density_nonnegative_and_bounded(r, multiplier, ds):
    out = atom_density(np.array(ds), r, multiplier)
    assert out.dtype == np.float64
    assert np.all(out >= 0.0)
    assert np.all(out <= 1.0)


@given(r=radii, multiplier=st.sampled_from((1.0, 1.25, 1.5)),
       ds=st.lists(st.floats(min_value=0.0, max_value=6.0), min_size=2, max_size=40))
def test_density_nonincreasing_up_to_default_multiplier(r, multiplier, ds):
    d = np.sort(np.array(ds))
    out = atom_density(d, r, multiplier)
    assert np.all(np.diff(out) <= 1e-15)


def test_density_scalar_array_agreement():
    d = np.linspace(0.0, 4.0, 57)
    vec = atom_density(d, 1.8)
    scalars = np.array([float(atom_density(x, 1.8)) for x in d])
    assert_array_equal(vec, scalars)


def test_density_validation():
    with pytest.raises(ValueError, match="radius"):
        atom_density(1.0, 0.0)
    with pytest.raises(ValueError, match="multiplier"):
        atom_density(1.0, 1.9, 0.9)
    with pytest.raises(ValueError, match="nonnegative"):
        atom_density(-0.1, 1.9)


# ---------------------------------------------------------------- grid setup

def test_grid_config_defaults():
    cfg = GridConfig()
    assert cfg.dimension == 24.0
    assert cfg.resolution == 0.5
    assert cfg.points_per_side == 48
    assert cfg.channel_count == 34


def test_grid_config_validation():
    with pytest.raises(ValueError, match="resolution"):
        GridConfig(resolution=0.3)
    with pytest.raises(ValueError, match="radius_multiplier"):
        GridConfig(radius_multiplier=1.6)
    with pytest.raises(ValueError, match="occupancy"):
        GridConfig(occupancy="fuzzy")
    with pytest.raises(ValueError, match="multiple"):
        GridConfig(dimension=10.2, resolution=0.5)
    with pytest.raises(ValueError, match="dimension"):
        GridConfig(dimension=-8.0)


def test_grid_axes_geometry():
    cfg = GridConfig(dimension=16.0, resolution=1.0, scheme=BINARY2)
    ax, ay, az = cfg.grid_axes((1.0, -2.0, 3.0))
    for axis, c in ((ax, 1.0), (ay, -2.0), (az, 3.0)):
        assert len(axis) == 16
        assert_allclose(np.diff(axis), 1.0)
        # points straddle the center symmetrically
        assert abs((axis[0] + axis[-1]) / 2.0 - c) < 1e-12


# ---------------------------------------------------------------- transforms

def test_transform_identity_is_noop():
    pts = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]])
    out = Transform.identity().apply(pts, np.zeros(3))
    assert_array_equal(out, pts)


def test_transform_validation():
    with pytest.raises(ValueError, match="norm"):
        Transform(np.array([1.0, 1.0, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(ValueError, match="shape"):
        Transform(np.array([1.0, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(ValueError, match="shape"):
        Transform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(2))


def test_transform_rotates_about_center_then_translates():
    h = math.sqrt(0.5)
    t = Transform(np.array([h, 0.0, 0.0, h]), np.array([1.0, 0.0, 0.0]))
    center = np.array([5.0, 5.0, 5.0])
    out = t.apply(np.array([6.0, 5.0, 5.0]), center)
    # +90 about z about the center maps the +x offset onto +y, then shift
    assert_allclose(out, [6.0, 6.0, 5.0], atol=1e-12)


@given(st.integers(min_value=0, max_value=10_000))
def test_sampled_rotations_are_orthonormal(seed):
    t = sample_transform(np.random.default_rng(seed), max_translate=2.0)
    rot = t.rotation_matrix()
    assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(rot) - 1.0) < 1e-12
    assert np.linalg.norm(t.translation) <= 2.0


def test_sample_transform_flags():
    rng = np.random.default_rng(0)
    fixed = sample_transform(rng, max_translate=0.0, rotate=False)
    assert_array_equal(fixed.quaternion, [1.0, 0.0, 0.0, 0.0])
    assert_array_equal(fixed.translation, np.zeros(3))
    with pytest.raises(ValueError, match="max_translate"):
        sample_transform(rng, max_translate=-1.0)


def test_transform_preserves_distances():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(6, 3))
    t = sample_transform(rng, max_translate=1.5)
    out = t.apply(pts, np.array([0.3, -0.2, 0.9]))
    d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
    assert_allclose(d1, d0, atol=1e-9)


# -------------------------------------------------------------- voxelization

def naive_reference(receptor, ligand, center, config, transform=None):
    """Triple-loop voxelization mirroring the production arithmetic."""
    if transform is None:
        transform = Transform.identity()
    n = config.points_per_side
    values = np.zeros((config.channel_count, n, n, n), dtype=np.float64)
    ax, ay, az = config.grid_axes(center)
    mult = config.radius_multiplier
    boolean = config.occupancy == "boolean"
    for mol in (receptor, ligand):
        for atom in mol.atoms:
            if atom.channel is None:
                continue
            pos = transform.apply(atom.position.astype(np.float64), center)
            r = atom.vdw_radius
            if not boolean and mult > 1.0:
                a, b, c = quadratic_coefficients(r, mult)
            for i in range(n):
                dx = ax[i] - pos[0]
                for j in range(n):
                    dy = ay[j] - pos[1]
                    for k in range(n):
                        dz = az[k] - pos[2]
                        d = np.sqrt((dx * dx + dy * dy) + dz * dz)
                        if boolean:
                            if d < r:
                                values[atom.channel, i, j, k] = 1.0
                        elif d < r:
                            values[atom.channel, i, j, k] += np.exp(-2.0 * (d * d) / (r * r))
                        elif mult > 1.0 and d < mult * r:
                            values[atom.channel, i, j, k] += (a * (d * d) + b * d) + c
    return values


def test_voxelize_matches_naive_reference_bitwise():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    center = np.array([0.25, -0.5, 0.75])
    got = voxelize(rec, lig, center, cfg).values
    assert_array_equal(got, naive_reference(rec, lig, center, cfg))


def test_voxelize_matches_naive_reference_under_transform():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    center = np.zeros(3)
    t = sample_transform(np.random.default_rng(7), max_translate=1.0)
    got = voxelize(rec, lig, center, cfg, t).values
    assert_array_equal(got, naive_reference(rec, lig, center, cfg, t))


def test_boolean_occupancy_matches_naive_reference():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2, occupancy="boolean")
    center = np.zeros(3)
    got = voxelize(rec, lig, center, cfg).values
    assert_array_equal(got, naive_reference(rec, lig, center, cfg))
    assert set(np.unique(got)) <= {0.0, 1.0}


def test_ninety_degree_rotation_permutes_axes():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=16.0, resolution=1.0, scheme=BINARY2)
    center = np.array([0.25, -0.5, 0.75])
    base = voxelize(rec, lig, center, cfg).values
    h = math.sqrt(0.5)
    cases = [
        (np.array([h, 0.0, 0.0, h]), 1, (1, 2)),  # about z
        (np.array([h, h, 0.0, 0.0]), 1, (2, 3)),  # about x
        (np.array([h, 0.0, h, 0.0]), 3, (1, 3)),  # about y
    ]
    for quat, k, axes in cases:
        rot = voxelize(rec, lig, center, cfg, Transform(quat, np.zeros(3))).values
        assert_allclose(rot, np.rot90(base, k, axes=axes), atol=1e-6)


def test_channel_locality():
    rec, lig = small_complex(scheme=SMINA34)
    cfg = GridConfig(dimension=8.0, resolution=0.5)
    grid = voxelize(rec, lig, np.zeros(3), cfg).values
    ligand_mass = grid[:18].sum(axis=(1, 2, 3))
    receptor_mass = grid[18:].sum(axis=(1, 2, 3))
    assert ligand_mass.sum() > 0
    assert receptor_mass.sum() > 0
    rec_only = molecule_density(rec, np.zeros(3), cfg)
    assert rec_only[:18].sum() == 0.0
    lig_only = molecule_density(lig, np.zeros(3), cfg)
    assert lig_only[18:].sum() == 0.0


def test_coincident_atoms_sum():
    lig = typed("C 0 0 0 ligand\nC 0 0 0 ligand")
    one = typed("C 0 0 0 ligand")
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    two_grid = molecule_density(lig, np.zeros(3), cfg)
    one_grid = molecule_density(one, np.zeros(3), cfg)
    assert_allclose(two_grid, 2.0 * one_grid, atol=1e-15)


def test_boolean_occupancy_saturates():
    lig = typed("C 0 0 0 ligand\nC 0 0 0 ligand")
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2, occupancy="boolean")
    grid = molecule_density(lig, np.zeros(3), cfg)
    assert grid.max() == 1.0


def test_far_atom_contributes_nothing():
    # an atom beyond multiplier * r of every grid point leaves the grid zero
    lig = typed("C 100.0 100.0 100.0 ligand")
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    assert molecule_density(lig, np.zeros(3), cfg).sum() == 0.0


def test_voxelize_rejects_untyped_and_mismatched():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=8.0, resolution=0.5)  # smina34, not binary2
    with pytest.raises(ValueError, match="scheme"):
        voxelize(rec, lig, np.zeros(3), cfg)
    raw = parse_structure("C 0 0 0 ligand")
    cfg2 = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    with pytest.raises(ValueError, match="typed"):
        voxelize(rec, raw, np.zeros(3), cfg2)


def test_voxelize_deterministic():
    rec, lig = small_complex()
    cfg = GridConfig(dimension=8.0, resolution=0.5, scheme=BINARY2)
    a = voxelize(rec, lig, np.zeros(3), cfg).values
    b = voxelize(rec, lig, np.zeros(3), cfg).values
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------- grid dump

@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=2 ** 31), st.integers(min_value=1, max_value=3),
       st.integers(min_value=2, max_value=6))
def test_grid_dump_round_trip(seed, channels, n):
    rng = np.random.default_rng(seed)
    values = rng.random((channels, n, n, n)).astype(np.float32)
    out, res = read_grid_dump(write_grid_dump(values, 0.5))
    assert res == 0.5
    assert out.dtype == np.float32
    assert_array_equal(out, values)


def test_grid_dump_errors():
    with pytest.raises(FormatError, match="magic"):
        read_grid_dump(b"NOPE" + bytes(16))
    with pytest.raises(FormatError, match="short"):
        read_grid_dump(b"VX")
    good = write_grid_dump(np.zeros((1, 2, 2, 2), dtype=np.float32), 0.5)
    with pytest.raises(FormatError, match="payload"):
        read_grid_dump(good[:-4])
    with pytest.raises(ValueError, match="expected"):
        write_grid_dump(np.zeros((2, 2, 2)), 0.5)
