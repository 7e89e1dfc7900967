"""Occlusion attribution: deltas, fragment averaging, coloring output."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from voxscore.errors import FormatError
from voxscore.gridgen import GridConfig, molecule_density, voxelize
from voxscore.maskviz import (
    AtomMaskScore,
    MaskReport,
    fragments_from_bond_cuts,
    fragments_from_molecule,
    format_mask_report,
    mask_report,
    parse_fragments,
    parse_temperature_factors,
    score_complex,
    write_colored_structure,
)
from voxscore.moldata import Molecule, assign_types, get_scheme, remove_atoms
from voxscore.tensornet import FullyConnected, NetworkSpec, Softmax, forward, init_weights

from tests import synth

SCHEME = get_scheme("binary2")
GRID = GridConfig(dimension=8.0, resolution=1.0, scheme=SCHEME)


def typed(mol):
    out, _ = assign_types(mol, SCHEME)
    return out


@pytest.fixture(scope="module")
def model():
    spec = NetworkSpec(2, 8, [FullyConnected(outputs=2), Softmax()])
    weights = init_weights(spec, np.random.default_rng(7))
    return spec, weights


@pytest.fixture(scope="module")
def complex_pair():
    rng = np.random.default_rng(3)
    receptor = typed(synth.make_receptor(rng))
    ligand = typed(synth.make_ligand(rng, np.array([2.5, 0.0, 0.0])))
    return receptor, ligand


def rescore(model, receptor, ligand, center):
    """Independent path to a pose score: plain voxelize, then forward."""
    spec, weights = model
    values = voxelize(receptor, ligand, center, GRID).values
    return float(forward(spec, weights, values, mode="test")[1])


# ---------------------------------------------------------------- scoring


def test_score_complex_matches_voxelize_path(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    got = score_complex(spec, weights, receptor, ligand, GRID)
    assert got == rescore(model, receptor, ligand, ligand.typed_centroid())
    assert 0.0 <= got <= 1.0


def test_score_complex_center_override(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    shifted = score_complex(spec, weights, receptor, ligand, GRID,
                            center=np.array([0.0, 0.0, 0.0]))
    assert shifted == rescore(model, receptor, ligand, np.zeros(3))


# ---------------------------------------------------------------- report


def test_atom_deltas_match_direct_rescoring(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    center = ligand.typed_centroid()
    report = mask_report(spec, weights, receptor, ligand, GRID)

    assert report.original_score == rescore(model, receptor, ligand, center)
    for i, atom in enumerate(ligand.atoms):
        reduced = remove_atoms(ligand, [i])
        expected = report.original_score - rescore(model, receptor, reduced, center)
        assert report.atoms[i].individual == expected
        assert report.atoms[i].element == atom.element


def test_fragment_averaging_hand_example(model, complex_pair):
    # Fragments f0 = {0,1,2} and f1 = {2,3} overlap on atom 2; atom 4 is in
    # neither. Per-fragment delta is the removal delta over fragment size;
    # an atom's fragment score averages the deltas of fragments holding it,
    # and its final score averages individual with fragment when one exists.
    receptor, ligand = complex_pair
    spec, weights = model
    center = ligand.typed_centroid()
    frags = {"f0": [0, 1, 2], "f1": [2, 3]}
    report = mask_report(spec, weights, receptor, ligand, GRID, fragments=frags)

    s = report.original_score
    d_f0 = (s - rescore(model, receptor, remove_atoms(ligand, [0, 1, 2]), center)) / 3
    d_f1 = (s - rescore(model, receptor, remove_atoms(ligand, [2, 3]), center)) / 2
    assert report.fragments == {"f0": d_f0, "f1": d_f1}

    a = report.atoms
    assert a[0].fragment == d_f0
    assert a[1].fragment == d_f0
    assert a[2].fragment == (d_f0 + d_f1) / 2.0
    assert a[3].fragment == d_f1
    assert a[4].fragment is None
    assert a[0].final == (a[0].individual + d_f0) / 2.0
    assert a[4].final == a[4].individual


def test_fragments_default_to_ligand_annotations(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    report = mask_report(spec, weights, receptor, ligand, GRID)
    assert set(report.fragments) == set(synth.LIGAND_FRAGMENTS)


def test_residue_deltas_are_not_normalized(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    center = ligand.typed_centroid()
    report = mask_report(spec, weights, receptor, ligand, GRID)

    members = {}
    for i, atom in enumerate(receptor.atoms):
        members.setdefault(atom.residue_id, []).append(i)
    assert set(report.residues) == set(members)
    for rid, idxs in members.items():
        reduced = remove_atoms(receptor, idxs)
        expected = report.original_score - rescore(model, reduced, ligand, center)
        assert report.residues[rid] == expected


def test_residues_can_be_skipped(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    report = mask_report(spec, weights, receptor, ligand, GRID,
                         include_residues=False)
    assert report.residues == {}


def test_out_of_grid_removals_are_exactly_zero(model):
    spec, weights = model
    near = np.array([0.5, 0.0, 0.0])
    ligand = typed(Molecule(
        atoms=(
            synth._atom("C", frozenset(), "ligand", near),
            synth._atom("N", frozenset({"h_donor"}), "ligand", -near),
            synth._atom("O", frozenset({"h_acceptor"}), "ligand", [20.0, 0.0, 0.0]),
        ),
        role="ligand",
    ))
    receptor = typed(Molecule(
        atoms=(
            synth._atom("C", frozenset(), "receptor", [2.0, 0.0, 0.0], residue="A1"),
            synth._atom("N", frozenset(), "receptor", [0.0, 2.0, 0.0], residue="A1"),
            synth._atom("C", frozenset(), "receptor", [25.0, 0.0, 0.0], residue="R9"),
            synth._atom("N", frozenset(), "receptor", [25.0, 2.0, 0.0], residue="R9"),
        ),
        role="receptor",
    ))
    # Fix the center on the in-grid cluster; the far atoms are well past the
    # 4 A half-width plus any density reach.
    report = mask_report(spec, weights, receptor, ligand, GRID,
                         fragments={}, center=np.zeros(3))
    assert report.atoms[2].individual == 0.0
    assert report.atoms[2].final == 0.0
    assert report.residues["R9"] == 0.0
    assert report.atoms[0].individual != 0.0
    assert report.residues["A1"] != 0.0


def test_report_invariant_to_threads_and_fragment_order(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    frags = {"f0": [0, 1, 2], "f1": [2, 3]}
    flipped = {"f1": [2, 3], "f0": [0, 1, 2]}
    base = mask_report(spec, weights, receptor, ligand, GRID, fragments=frags)
    text = format_mask_report(base)
    for threads in (2, 4):
        again = mask_report(spec, weights, receptor, ligand, GRID,
                            fragments=frags, threads=threads)
        assert format_mask_report(again) == text
    reordered = mask_report(spec, weights, receptor, ligand, GRID, fragments=flipped)
    assert reordered.fragments == base.fragments
    assert reordered.atoms == base.atoms
    assert reordered.residues == base.residues


def test_mask_report_validation(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    with pytest.raises(ValueError, match="threads"):
        mask_report(spec, weights, receptor, ligand, GRID, threads=0)
    with pytest.raises(ValueError, match="empty ligand"):
        mask_report(spec, weights, receptor, Molecule(atoms=(), role="ligand"), GRID)
    for bad, msg in [
        ({"f0": []}, "empty"),
        ({"f0": [0, 9]}, "out of range"),
        ({"f0": [1, 1]}, "repeats"),
    ]:
        with pytest.raises(ValueError, match=msg):
            mask_report(spec, weights, receptor, ligand, GRID, fragments=bad)


def test_report_atom_and_residue_value_views(model, complex_pair):
    receptor, ligand = complex_pair
    spec, weights = model
    report = mask_report(spec, weights, receptor, ligand, GRID)
    assert report.atom_values() == [a.final for a in report.atoms]
    per_atom = report.residue_values(receptor)
    assert len(per_atom) == len(receptor.atoms)
    for atom, value in zip(receptor.atoms, per_atom):
        assert value == report.residues[atom.residue_id]


# ---------------------------------------------------------------- fragments


def test_fragments_from_molecule(complex_pair):
    _, ligand = complex_pair
    assert fragments_from_molecule(ligand) == {"f0": [0, 1, 2], "f1": [2, 3]}


def test_parse_fragments():
    text = "# comment\nf0 0 1 2\nf1 2 3  # trailing\n"
    assert parse_fragments(text, 5) == {"f0": [0, 1, 2], "f1": [2, 3]}


@pytest.mark.parametrize(
    "text,msg",
    [
        ("f0\n", "at least one atom index"),
        ("f0 0\nf0 1\n", "duplicate fragment id"),
        ("f0 x\n", "bad atom index"),
        ("f0 5\n", "out of range"),
        ("f0 1 1\n", "repeated atom index"),
    ],
)
def test_parse_fragments_errors(text, msg):
    with pytest.raises(FormatError, match=msg):
        parse_fragments(text, 5)


def test_fragments_from_bond_cuts_chain():
    bonds = [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert fragments_from_bond_cuts(5, bonds, [(1, 2)]) == {
        "f0": [0, 1],
        "f1": [2, 3, 4],
    }
    # Pair order inside a cut does not matter.
    assert fragments_from_bond_cuts(5, bonds, [(2, 1)]) == {
        "f0": [0, 1],
        "f1": [2, 3, 4],
    }
    assert fragments_from_bond_cuts(5, bonds, []) == {"f0": [0, 1, 2, 3, 4]}


def test_fragments_from_bond_cuts_components_named_by_lowest_member():
    # Isolated atom 0 plus a 3-ring: components keyed in member order.
    bonds = [(1, 2), (2, 3), (3, 1)]
    assert fragments_from_bond_cuts(4, bonds, []) == {"f0": [0], "f1": [1, 2, 3]}


def test_fragments_from_bond_cuts_validation():
    with pytest.raises(ValueError, match="out of range"):
        fragments_from_bond_cuts(3, [(0, 5)], [])
    with pytest.raises(ValueError, match="not a pair"):
        fragments_from_bond_cuts(3, [(0, 1)], [(0, 1, 2)])


# ---------------------------------------------------------------- coloring


def test_temperature_factor_round_trip(complex_pair):
    receptor, _ = complex_pair
    rng = np.random.default_rng(0)
    values = rng.uniform(-40.0, 40.0, len(receptor.atoms))
    text = write_colored_structure(receptor, values)
    back = parse_temperature_factors(text)
    assert len(back) == len(values)
    np.testing.assert_allclose(back, values, rtol=0, atol=0.005)


def test_temperature_factor_clamp_warns(complex_pair):
    _, ligand = complex_pair
    values = [150.0, -3000.0, 1.0, 0.0, -2.5]
    with pytest.warns(RuntimeWarning, match="clamped"):
        text = write_colored_structure(ligand, values)
    back = parse_temperature_factors(text)
    assert back[0] == 99.99 and back[1] == -99.99
    assert back[2:] == [1.0, 0.0, -2.5]


def test_write_colored_structure_validation(complex_pair):
    _, ligand = complex_pair
    with pytest.raises(ValueError, match="values for"):
        write_colored_structure(ligand, [1.0])


def test_colored_structure_shape(complex_pair):
    receptor, _ = complex_pair
    text = write_colored_structure(receptor, np.zeros(len(receptor.atoms)))
    lines = text.splitlines()
    assert len(lines) == len(receptor.atoms)
    for line in lines:
        assert line.startswith("ATOM  ")
        assert len(line) >= 78
    # Residue sequence numbers follow first appearance: R1, R1, R1, R2, R2, R3.
    assert [line[22:26].strip() for line in lines] == ["1", "1", "1", "2", "2", "3"]


def test_parse_temperature_factors_skips_other_lines():
    text = "HEADER junk\nATOM      1  C   LIG A   1    " + \
        f"{1.0:8.3f}{2.0:8.3f}{3.0:8.3f}{1.0:6.2f}{7.25:6.2f}          " + " C"
    assert parse_temperature_factors(text) == [7.25]


def test_parse_temperature_factors_errors():
    with pytest.raises(FormatError, match="too short"):
        parse_temperature_factors("ATOM  1  C\n")
    bad = "ATOM  " + "x" * 72
    with pytest.raises(FormatError, match="bad temperature factor"):
        parse_temperature_factors(bad)


# ---------------------------------------------------------------- reporting


def test_format_mask_report_layout():
    report = MaskReport(
        original_score=0.75,
        atoms=[
            AtomMaskScore(index=0, element="C", individual=0.5, fragment=0.25),
            AtomMaskScore(index=1, element="N", individual=-0.125, fragment=None),
        ],
        fragments={"f0": 0.25},
        residues={"A1": 0.0625},
    )
    lines = format_mask_report(report).splitlines()
    assert lines[0] == "original_score\t0.75"
    assert lines[1] == "atom\t0\tC\t0.5\t0.25\t0.375"
    assert lines[2] == "atom\t1\tN\t-0.125\t-\t-0.125"
    assert lines[3] == "fragment\tf0\t0.25"
    assert lines[4] == "residue\tA1\t0.0625"
