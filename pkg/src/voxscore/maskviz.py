"""Attribution of a pose score to atoms, fragments, and residues.

Every attribution is an occlusion delta: rescore the complex with a piece
removed and subtract. Removing piece X from a complex scored S gives
delta(X) = S - S_without_X, so positive deltas mark pieces the network
relies on for its positive-class score.

Ligand atoms get two flavors: an individual delta (remove just the atom)
and a fragment delta (remove each annotated fragment containing the atom,
normalize by fragment size, average over those fragments). The reported
per-atom score is the mean of the two when both exist. Receptor residues
get plain unnormalized deltas.

Scoring is always deterministic (test mode, identity transform), and
removals all start from the original complex, so results do not depend on
evaluation order or thread count. Receptor and ligand channels are
disjoint, which lets the receptor's density block be computed once and
shared across all ligand-side removals without changing any bits.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensornet
from .errors import FormatError
from .gridgen import GridConfig, molecule_density
from .moldata import Molecule, remove_atoms


def _positive_probability(spec, weights, values) -> float:
    probs = tensornet.forward(spec, weights, values, mode="test")
    return float(probs[1])


def score_complex(spec: tensornet.NetworkSpec, weights: tensornet.WeightSet,
                  receptor: Molecule, ligand: Molecule, grid_config: GridConfig,
                  center=None) -> float:
    """Positive-class probability of the complex, voxelized at `center`
    (ligand centroid by default)."""
    if center is None:
        center = ligand.typed_centroid()
    # Receptor and ligand channels are disjoint, so adding the two blocks is
    # exactly the combined voxelization in either occupancy mode.
    values = molecule_density(receptor, center, grid_config)
    values += molecule_density(ligand, center, grid_config)
    return _positive_probability(spec, weights, values)


def fragments_from_molecule(ligand: Molecule) -> dict[str, list[int]]:
    """Fragment membership from the per-atom fragment_ids annotations."""
    out: dict[str, list[int]] = {}
    for i, atom in enumerate(ligand.atoms):
        for frag in atom.fragment_ids:
            out.setdefault(frag, []).append(i)
    return out


def parse_fragments(text: str, n_atoms: int) -> dict[str, list[int]]:
    """Parse a fragment annotation file: `fragment_id index index ...` per
    line, indices 0-based into the ligand's atom list."""
    out: dict[str, list[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 2:
            raise FormatError(f"line {lineno}: fragment needs at least one atom index")
        frag = fields[0]
        if frag in out:
            raise FormatError(f"line {lineno}: duplicate fragment id {frag!r}")
        try:
            members = [int(f) for f in fields[1:]]
        except ValueError:
            raise FormatError(f"line {lineno}: bad atom index") from None
        for m in members:
            if not 0 <= m < n_atoms:
                raise FormatError(
                    f"line {lineno}: atom index {m} out of range for {n_atoms} atoms"
                )
        if len(set(members)) != len(members):
            raise FormatError(f"line {lineno}: repeated atom index")
        out[frag] = members
    return out


def fragments_from_bond_cuts(n_atoms: int, bonds, cuts) -> dict[str, list[int]]:
    """Fragments as the connected components left after cutting bonds.

    `bonds` is an iterable of (i, j) atom-index pairs; `cuts` is the subset
    of pairs to sever (order within a pair does not matter). Components are
    named f0, f1, ... by their smallest atom index.
    """
    cut_set = {frozenset(c) for c in cuts}
    for c in cut_set:
        if len(c) != 2:
            raise ValueError(f"cut {sorted(c)} is not a pair")
    parent = list(range(n_atoms))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in bonds:
        if not (0 <= i < n_atoms and 0 <= j < n_atoms):
            raise ValueError(f"bond ({i}, {j}) out of range for {n_atoms} atoms")
        if frozenset((i, j)) in cut_set:
            continue
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    components: dict[int, list[int]] = {}
    for a in range(n_atoms):
        components.setdefault(find(a), []).append(a)
    ordered = sorted(components.values(), key=lambda members: members[0])
    return {f"f{k}": members for k, members in enumerate(ordered)}


@dataclass(frozen=True)
class AtomMaskScore:
    index: int
    element: str
    individual: float
    fragment: float | None

    @property
    def final(self) -> float:
        if self.fragment is None:
            return self.individual
        return (self.individual + self.fragment) / 2.0


@dataclass
class MaskReport:
    original_score: float
    atoms: list[AtomMaskScore]
    fragments: dict[str, float]
    residues: dict[str, float]

    def atom_values(self) -> list[float]:
        return [a.final for a in self.atoms]

    def residue_values(self, receptor: Molecule) -> list[float]:
        return [self.residues.get(a.residue_id, 0.0) for a in receptor.atoms]


def _validate_fragments(fragments, n_atoms):
    for frag, members in fragments.items():
        if not members:
            raise ValueError(f"fragment {frag!r} is empty")
        for m in members:
            if not 0 <= m < n_atoms:
                raise ValueError(
                    f"fragment {frag!r}: atom index {m} out of range for {n_atoms} atoms"
                )
        if len(set(members)) != len(members):
            raise ValueError(f"fragment {frag!r} repeats an atom index")


def mask_report(spec: tensornet.NetworkSpec, weights: tensornet.WeightSet,
                receptor: Molecule, ligand: Molecule, grid_config: GridConfig,
                *, fragments: dict[str, list[int]] | None = None,
                include_residues: bool = True, threads: int = 1,
                center=None) -> MaskReport:
    """Full occlusion attribution for one complex.

    `fragments` defaults to the ligand's own fragment annotations. The grid
    center is fixed once from the original ligand, so removals never shift
    the grid under the network.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    if not ligand.atoms:
        raise ValueError("cannot attribute an empty ligand")
    if fragments is None:
        fragments = fragments_from_molecule(ligand)
    _validate_fragments(fragments, len(ligand.atoms))

    if center is None:
        center = ligand.typed_centroid()
    receptor_block = molecule_density(receptor, center, grid_config)
    ligand_block = molecule_density(ligand, center, grid_config)

    def score_ligand_subset(removed) -> float:
        values = receptor_block + molecule_density(
            remove_atoms(ligand, removed), center, grid_config
        )
        return _positive_probability(spec, weights, values)

    def score_receptor_subset(removed) -> float:
        values = molecule_density(
            remove_atoms(receptor, removed), center, grid_config
        ) + ligand_block
        return _positive_probability(spec, weights, values)

    original = _positive_probability(spec, weights, receptor_block + ligand_block)

    residue_ids: list[str] = []
    residue_members: dict[str, list[int]] = {}
    if include_residues:
        for i, atom in enumerate(receptor.atoms):
            rid = atom.residue_id if atom.residue_id is not None else "UNK"
            if rid not in residue_members:
                residue_ids.append(rid)
                residue_members[rid] = []
            residue_members[rid].append(i)

    frag_ids = list(fragments)
    tasks = (
        [("atom", i, [i]) for i in range(len(ligand.atoms))]
        + [("fragment", frag, fragments[frag]) for frag in frag_ids]
        + [("residue", rid, residue_members[rid]) for rid in residue_ids]
    )

    def run(task):
        kind, _, removed = task
        if kind == "residue":
            return score_receptor_subset(removed)
        return score_ligand_subset(removed)

    if threads == 1:
        results = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))

    scores = dict(zip((t[:2] for t in tasks), results))

    fragment_deltas = {
        frag: (original - scores[("fragment", frag)]) / len(fragments[frag])
        for frag in frag_ids
    }
    atoms: list[AtomMaskScore] = []
    for i, atom in enumerate(ligand.atoms):
        individual = original - scores[("atom", i)]
        containing = [f for f in frag_ids if i in fragments[f]]
        frag_score = None
        if containing:
            frag_score = float(np.mean([fragment_deltas[f] for f in containing]))
        atoms.append(
            AtomMaskScore(index=i, element=atom.element,
                          individual=individual, fragment=frag_score)
        )
    residues = {rid: original - scores[("residue", rid)] for rid in residue_ids}
    return MaskReport(original_score=original, atoms=atoms,
                      fragments=fragment_deltas, residues=residues)


B_FACTOR_LIMIT = 99.99


def write_colored_structure(mol: Molecule, values) -> str:
    """Render atoms as fixed-column ATOM records with `values` in the
    temperature factor field (clamped to +/-99.99 to fit the format)."""
    values = list(values)
    if len(values) != len(mol.atoms):
        raise ValueError(f"{len(values)} values for {len(mol.atoms)} atoms")
    clamped = 0
    residue_seq: dict[str, int] = {}
    lines = []
    for i, (atom, value) in enumerate(zip(mol.atoms, values)):
        b = float(value)
        if abs(b) > B_FACTOR_LIMIT:
            b = B_FACTOR_LIMIT if b > 0 else -B_FACTOR_LIMIT
            clamped += 1
        if atom.role == "ligand":
            resname, rid = "LIG", "LIG"
        else:
            rid = atom.residue_id if atom.residue_id is not None else "UNK"
            resname = "".join(ch for ch in rid if ch.isalnum()).upper()[:3] or "RES"
        seq = residue_seq.setdefault(rid, len(residue_seq) + 1)
        x, y, z = (float(v) for v in atom.position)
        name = f" {atom.element:<3s}"
        lines.append(
            f"ATOM  {i + 1:>5d} {name} {resname:>3s} A{seq:>4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{b:6.2f}          {atom.element:>2s}"
        )
    if clamped:
        warnings.warn(f"{clamped} temperature factors clamped to +/-{B_FACTOR_LIMIT}",
                      RuntimeWarning)
    return "\n".join(lines) + "\n"


def parse_temperature_factors(text: str) -> list[float]:
    """Temperature factors back out of fixed-column ATOM records."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith(("ATOM  ", "HETATM")):
            continue
        if len(line) < 66:
            raise FormatError(f"line {lineno}: ATOM record too short")
        try:
            out.append(float(line[60:66]))
        except ValueError:
            raise FormatError(f"line {lineno}: bad temperature factor") from None
    return out


def format_mask_report(report: MaskReport) -> str:
    lines = [f"original_score\t{report.original_score:.17g}"]
    for a in report.atoms:
        lines.append(
            "\t".join(
                [
                    "atom",
                    str(a.index),
                    a.element,
                    f"{a.individual:.17g}",
                    "-" if a.fragment is None else f"{a.fragment:.17g}",
                    f"{a.final:.17g}",
                ]
            )
        )
    for frag, delta in report.fragments.items():
        lines.append(f"fragment\t{frag}\t{delta:.17g}")
    for rid, delta in report.residues.items():
        lines.append(f"residue\t{rid}\t{delta:.17g}")
    return "\n".join(lines) + "\n"
