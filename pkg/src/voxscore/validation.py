"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .gridgen import GridConfig
from .moldata import AtomTypeScheme, Molecule, assign_types, get_scheme


def as_rng(random_state) -> np.random.Generator:
    """None, an int seed, or a Generator -> a Generator."""
    if random_state is None:
        return np.random.default_rng()
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(int(random_state))
    raise TypeError(f"random_state must be None, an int, or a Generator, "
                    f"got {type(random_state).__name__}")


def as_scheme(scheme) -> AtomTypeScheme:
    if isinstance(scheme, AtomTypeScheme):
        return scheme
    if isinstance(scheme, str):
        return get_scheme(scheme)
    raise TypeError(f"scheme must be a name or AtomTypeScheme, got {type(scheme).__name__}")


def ensure_typed(mol: Molecule, scheme: AtomTypeScheme) -> Molecule:
    """Type `mol` under `scheme` unless it already is."""
    if mol.scheme == scheme.name:
        return mol
    typed, _ = assign_types(mol, scheme)
    return typed


def check_complex(item, scheme: AtomTypeScheme):
    """Normalize one (receptor, ligand[, center]) item to typed molecules
    plus an explicit center."""
    if not isinstance(item, (tuple, list)) or len(item) not in (2, 3):
        raise ValueError(
            "each sample must be (receptor, ligand) or (receptor, ligand, center)"
        )
    receptor, ligand = item[0], item[1]
    if not isinstance(receptor, Molecule) or not isinstance(ligand, Molecule):
        raise TypeError("receptor and ligand must be Molecule instances")
    if receptor.role != "receptor" or ligand.role != "ligand":
        raise ValueError(
            f"expected roles (receptor, ligand), got ({receptor.role}, {ligand.role})"
        )
    receptor = ensure_typed(receptor, scheme)
    ligand = ensure_typed(ligand, scheme)
    center = np.asarray(item[2], dtype=np.float64) if len(item) == 3 \
        else ligand.typed_centroid()
    if center.shape != (3,) or not np.all(np.isfinite(center)):
        raise ValueError("center must be three finite coordinates")
    return receptor, ligand, center


def check_complexes(X, scheme: AtomTypeScheme) -> list:
    items = list(X)
    if not items:
        raise ValueError("no samples")
    return [check_complex(item, scheme) for item in items]


def check_grid_batch(X, config: GridConfig) -> np.ndarray:
    """Validate a pre-voxelized (n, channels, side, side, side) batch."""
    X = np.asarray(X)
    n = config.points_per_side
    expected = (config.channel_count, n, n, n)
    if X.ndim != 5 or X.shape[1:] != expected:
        raise ValueError(f"grid batch shape {X.shape} does not match {('n',) + expected}")
    if not np.all(np.isfinite(X)):
        raise ValueError("grid batch contains non-finite values")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} samples")
    values = np.unique(y)
    if not np.isin(values, [0, 1]).all():
        raise ValueError(f"labels must be 0 or 1, got values {values}")
    if values.size < 2:
        raise ValueError("training needs both classes present")
    return y.astype(np.intp)
