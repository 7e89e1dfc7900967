"""Molecular structures, atom typing, and structure file formats.

A structure is a flat list of atoms, each carrying a position, an element,
chemistry flags, and a role (receptor or ligand). Atom *typing* maps those
annotations onto the channel layout of a named scheme; the channel index is
what the voxelizer consumes. Hydrogens are kept in the structure but never
receive a channel under any scheme.

Two file formats are supported: a whitespace-delimited text form for human
authorship, and the binary gninatypes form (16-byte records of three
little-endian float32 coordinates plus an int32 channel index under the
34-channel scheme).
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .configio import parse_key_values, strip_comment
from .errors import FormatError

FLAG_NAMES = frozenset({"aromatic", "h_donor", "h_acceptor", "hydrophobe"})

ROLES = ("receptor", "ligand")

# Channel-bearing type names, in fixed table order. The ligand and receptor
# lists below are what define the 34-channel layout: ligand channels first
# (0..17), then receptor channels (18..33).
_TYPE_ROWS: tuple[tuple[str, bool, bool], ...] = (
    # (type name, valid for ligand, valid for receptor)
    ("AliphaticCarbonXSHydrophobe", True, True),
    ("AliphaticCarbonXSNonHydrophobe", True, True),
    ("AromaticCarbonXSHydrophobe", True, True),
    ("AromaticCarbonXSNonHydrophobe", True, True),
    ("Bromine", True, False),
    ("Calcium", False, True),
    ("Chlorine", True, False),
    ("Fluorine", True, False),
    ("Iodine", True, False),
    ("Iron", False, True),
    ("Magnesium", False, True),
    ("Nitrogen", True, True),
    ("NitrogenXSAcceptor", True, True),
    ("NitrogenXSDonor", True, True),
    ("NitrogenXSDonorAcceptor", True, True),
    ("Oxygen", True, False),
    ("OxygenXSAcceptor", True, True),
    ("OxygenXSDonorAcceptor", True, True),
    ("Phosphorus", True, True),
    ("Sulfur", True, True),
    ("SulfurAcceptor", True, False),
    ("Zinc", False, True),
)

LIGAND_TYPE_NAMES: tuple[str, ...] = tuple(n for n, lig, _ in _TYPE_ROWS if lig)
RECEPTOR_TYPE_NAMES: tuple[str, ...] = tuple(n for n, _, rec in _TYPE_ROWS if rec)

_NAME_TO_ELEMENT = {
    "AliphaticCarbonXSHydrophobe": "C",
    "AliphaticCarbonXSNonHydrophobe": "C",
    "AromaticCarbonXSHydrophobe": "C",
    "AromaticCarbonXSNonHydrophobe": "C",
    "Bromine": "Br",
    "Calcium": "Ca",
    "Chlorine": "Cl",
    "Fluorine": "F",
    "Iodine": "I",
    "Iron": "Fe",
    "Magnesium": "Mg",
    "Nitrogen": "N",
    "NitrogenXSAcceptor": "N",
    "NitrogenXSDonor": "N",
    "NitrogenXSDonorAcceptor": "N",
    "Oxygen": "O",
    "OxygenXSAcceptor": "O",
    "OxygenXSDonorAcceptor": "O",
    "Phosphorus": "P",
    "Sulfur": "S",
    "SulfurAcceptor": "S",
    "Zinc": "Zn",
}

_NAME_TO_FLAGS = {
    "AliphaticCarbonXSHydrophobe": frozenset({"hydrophobe"}),
    "AliphaticCarbonXSNonHydrophobe": frozenset(),
    "AromaticCarbonXSHydrophobe": frozenset({"aromatic", "hydrophobe"}),
    "AromaticCarbonXSNonHydrophobe": frozenset({"aromatic"}),
    "Bromine": frozenset(),
    "Calcium": frozenset(),
    "Chlorine": frozenset(),
    "Fluorine": frozenset(),
    "Iodine": frozenset(),
    "Iron": frozenset(),
    "Magnesium": frozenset(),
    "Nitrogen": frozenset(),
    "NitrogenXSAcceptor": frozenset({"h_acceptor"}),
    "NitrogenXSDonor": frozenset({"h_donor"}),
    "NitrogenXSDonorAcceptor": frozenset({"h_donor", "h_acceptor"}),
    "Oxygen": frozenset(),
    "OxygenXSAcceptor": frozenset({"h_acceptor"}),
    "OxygenXSDonorAcceptor": frozenset({"h_donor", "h_acceptor"}),
    "Phosphorus": frozenset(),
    "Sulfur": frozenset(),
    "SulfurAcceptor": frozenset({"h_acceptor"}),
    "Zinc": frozenset(),
}

# Flag-resolution candidates per element, most specific first. An atom gets
# the first name whose flag requirements it satisfies; flags a name does not
# require are simply ignored (a donor-only oxygen falls through to plain
# Oxygen because no donor-only oxygen type exists).
_ELEMENT_CANDIDATES = {
    "N": ("NitrogenXSDonorAcceptor", "NitrogenXSDonor", "NitrogenXSAcceptor", "Nitrogen"),
    "O": ("OxygenXSDonorAcceptor", "OxygenXSAcceptor", "Oxygen"),
    "S": ("SulfurAcceptor", "Sulfur"),
    "P": ("Phosphorus",),
    "F": ("Fluorine",),
    "Cl": ("Chlorine",),
    "Br": ("Bromine",),
    "I": ("Iodine",),
    "Ca": ("Calcium",),
    "Fe": ("Iron",),
    "Mg": ("Magnesium",),
    "Zn": ("Zinc",),
}

KNOWN_ELEMENTS = frozenset(_ELEMENT_CANDIDATES) | {"C", "H"}

# Per-type van der Waals radii in angstroms, editable via a key=value table.
# Values follow the XS radii used by smina-family docking codes; Hydrogen is
# listed so every atom carries a radius, although hydrogens are never
# voxelized.
DEFAULT_RADII: dict[str, float] = {
    "AliphaticCarbonXSHydrophobe": 1.9,
    "AliphaticCarbonXSNonHydrophobe": 1.9,
    "AromaticCarbonXSHydrophobe": 1.9,
    "AromaticCarbonXSNonHydrophobe": 1.9,
    "Bromine": 2.0,
    "Calcium": 1.2,
    "Chlorine": 1.8,
    "Fluorine": 1.5,
    "Iodine": 2.2,
    "Iron": 1.2,
    "Magnesium": 1.2,
    "Nitrogen": 1.8,
    "NitrogenXSAcceptor": 1.8,
    "NitrogenXSDonor": 1.8,
    "NitrogenXSDonorAcceptor": 1.8,
    "Oxygen": 1.7,
    "OxygenXSAcceptor": 1.7,
    "OxygenXSDonorAcceptor": 1.7,
    "Phosphorus": 2.1,
    "Sulfur": 2.0,
    "SulfurAcceptor": 2.0,
    "Zinc": 1.2,
    "Hydrogen": 1.0,
}


def type_name_for(element: str, flags: frozenset[str]) -> str | None:
    """Resolve an (element, flags) pair to a channel-bearing type name.

    Returns None for hydrogen. Raises FormatError for unknown elements.
    """
    if element == "H":
        return None
    if element == "C":
        ring = "Aromatic" if "aromatic" in flags else "Aliphatic"
        phobe = "XSHydrophobe" if "hydrophobe" in flags else "XSNonHydrophobe"
        return f"{ring}Carbon{phobe}"
    try:
        candidates = _ELEMENT_CANDIDATES[element]
    except KeyError:
        raise FormatError(f"unknown element {element!r}") from None
    for name in candidates:
        if _NAME_TO_FLAGS[name] <= flags:
            return name
    # Unreachable: every candidate list ends in a no-requirement name.
    raise AssertionError(element)


def radius_for(type_name: str | None, radii: dict[str, float] | None = None) -> float:
    table = DEFAULT_RADII if radii is None else radii
    key = "Hydrogen" if type_name is None else type_name
    try:
        return table[key]
    except KeyError:
        raise FormatError(f"no radius for type {key!r}") from None


@dataclass(frozen=True)
class TypedAtom:
    """One atom: position, annotations, and (after typing) a channel index.

    Positions are stored as float32 so that gninatypes round trips are
    bit-exact. `channel` is None for atoms no scheme channel applies to
    (hydrogens always; other atoms depending on role and scheme).
    """

    position: np.ndarray
    element: str
    vdw_radius: float
    role: str
    flags: frozenset[str] = frozenset()
    residue_id: str | None = None
    fragment_ids: tuple[str, ...] = ()
    channel: int | None = None
    type_name: str | None = None

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float32)
        if pos.shape != (3,):
            raise ValueError(f"position must have shape (3,), got {pos.shape}")
        object.__setattr__(self, "position", pos)
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.vdw_radius > 0:
            raise ValueError(f"vdw_radius must be positive, got {self.vdw_radius}")
        if not self.flags <= FLAG_NAMES:
            raise ValueError(f"unknown flags {sorted(self.flags - FLAG_NAMES)}")
        if self.element not in KNOWN_ELEMENTS:
            raise FormatError(f"unknown element {self.element!r}")


@dataclass(frozen=True)
class Molecule:
    """An immutable bag of atoms sharing one role.

    `scheme` names the typing scheme the channels were assigned under, or is
    None for a structure that has not been typed yet.
    """

    atoms: tuple[TypedAtom, ...]
    role: str
    name: str = ""
    scheme: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for atom in self.atoms:
            if atom.role != self.role:
                raise ValueError(
                    f"atom role {atom.role!r} does not match molecule role {self.role!r}"
                )

    def __len__(self) -> int:
        return len(self.atoms)

    def positions(self) -> np.ndarray:
        """All atom positions as an (n, 3) float32 array."""
        if not self.atoms:
            return np.zeros((0, 3), dtype=np.float32)
        return np.stack([a.position for a in self.atoms])

    def typed_centroid(self) -> np.ndarray:
        """Mean position of channel-assigned atoms (all atoms if none typed)."""
        pts = [a.position for a in self.atoms if a.channel is not None]
        if not pts:
            pts = [a.position for a in self.atoms]
        if not pts:
            raise ValueError("cannot take the centroid of an empty molecule")
        return np.mean(np.stack(pts).astype(np.float64), axis=0)


def remove_atoms(mol: Molecule, indices) -> Molecule:
    """A copy of `mol` without the atoms at the given indices."""
    drop = set(int(i) for i in indices)
    for i in drop:
        if not 0 <= i < len(mol.atoms):
            raise IndexError(f"atom index {i} out of range for {len(mol.atoms)} atoms")
    kept = tuple(a for i, a in enumerate(mol.atoms) if i not in drop)
    return replace(mol, atoms=kept)


def strip_untyped(mol: Molecule) -> Molecule:
    """A copy of `mol` keeping only channel-assigned atoms."""
    return replace(mol, atoms=tuple(a for a in mol.atoms if a.channel is not None))


class AtomTypeScheme:
    """A named channel layout plus the rule assigning atoms to channels.

    Ligand channels always come first. `assign` returns a channel index, or
    None when the scheme has no channel for the atom (the atom is dropped
    from grids but kept in the structure).
    """

    def __init__(self, name: str, ligand_channels: int, receptor_channels: int,
                 channel_names: tuple[str, ...]):
        self.name = name
        self.ligand_channels = ligand_channels
        self.receptor_channels = receptor_channels
        self.channel_count = ligand_channels + receptor_channels
        self.channel_names = channel_names
        assert len(channel_names) == self.channel_count

    def __repr__(self):
        return f"AtomTypeScheme({self.name!r}, channels={self.channel_count})"

    def assign(self, element: str, flags: frozenset[str], role: str) -> int | None:
        raise NotImplementedError


class _Smina34(AtomTypeScheme):
    def __init__(self):
        names = tuple(f"ligand_{n}" for n in LIGAND_TYPE_NAMES) + tuple(
            f"receptor_{n}" for n in RECEPTOR_TYPE_NAMES
        )
        super().__init__("smina34", len(LIGAND_TYPE_NAMES), len(RECEPTOR_TYPE_NAMES), names)
        self._ligand_index = {n: i for i, n in enumerate(LIGAND_TYPE_NAMES)}
        self._receptor_index = {
            n: self.ligand_channels + i for i, n in enumerate(RECEPTOR_TYPE_NAMES)
        }

    def assign(self, element, flags, role):
        name = type_name_for(element, flags)
        if name is None:
            return None
        table = self._ligand_index if role == "ligand" else self._receptor_index
        return table.get(name)


_ELEMENT18_LIGAND = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I")
_ELEMENT18_RECEPTOR = ("C", "N", "O", "S", "P", "Ca", "Fe", "Mg", "Zn")


class _Element18(AtomTypeScheme):
    def __init__(self):
        names = tuple(f"ligand_{e}" for e in _ELEMENT18_LIGAND) + tuple(
            f"receptor_{e}" for e in _ELEMENT18_RECEPTOR
        )
        super().__init__("element18", len(_ELEMENT18_LIGAND), len(_ELEMENT18_RECEPTOR), names)
        self._ligand_index = {e: i for i, e in enumerate(_ELEMENT18_LIGAND)}
        self._receptor_index = {
            e: self.ligand_channels + i for i, e in enumerate(_ELEMENT18_RECEPTOR)
        }

    def assign(self, element, flags, role):
        if element == "H":
            return None
        table = self._ligand_index if role == "ligand" else self._receptor_index
        return table.get(element)


class _Binary2(AtomTypeScheme):
    def __init__(self):
        super().__init__("binary2", 1, 1, ("ligand_any", "receptor_any"))

    def assign(self, element, flags, role):
        if element == "H":
            return None
        return 0 if role == "ligand" else 1


SMINA34 = _Smina34()
ELEMENT18 = _Element18()
BINARY2 = _Binary2()

_SCHEMES = {s.name: s for s in (SMINA34, ELEMENT18, BINARY2)}


def get_scheme(name: str) -> AtomTypeScheme:
    try:
        return _SCHEMES[name]
    except KeyError:
        raise ValueError(
            f"unknown scheme {name!r}; available: {sorted(_SCHEMES)}"
        ) from None


@dataclass(frozen=True)
class TypingStats:
    """Summary of one assign_types pass."""

    n_atoms: int
    n_typed: int
    n_hydrogens: int
    dropped: Counter = field(default_factory=Counter)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def assign_types(mol: Molecule, scheme: AtomTypeScheme) -> tuple[Molecule, TypingStats]:
    """Assign scheme channels to every atom of `mol`.

    Atoms with no channel under the scheme (hydrogens, or role/type
    combinations the scheme does not cover) get channel None; non-hydrogen
    drops are tallied in the returned stats rather than raised.
    """
    atoms = []
    dropped: Counter = Counter()
    n_typed = 0
    n_h = 0
    for atom in mol.atoms:
        channel = scheme.assign(atom.element, atom.flags, atom.role)
        t_name = type_name_for(atom.element, atom.flags)
        if channel is None:
            if atom.element == "H":
                n_h += 1
            else:
                dropped[(atom.role, t_name)] += 1
        else:
            n_typed += 1
        atoms.append(replace(atom, channel=channel, type_name=t_name))
    typed = replace(mol, atoms=tuple(atoms), scheme=scheme.name)
    stats = TypingStats(len(atoms), n_typed, n_h, dropped)
    return typed, stats


def _parse_text(text: str, name: str, radii: dict[str, float] | None) -> Molecule:
    atoms: list[TypedAtom] = []
    role: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = strip_comment(raw)
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 5:
            raise FormatError(f"line {lineno}: expected at least 5 fields, got {len(tokens)}")
        element = tokens[0]
        if element not in KNOWN_ELEMENTS:
            raise FormatError(f"line {lineno}: unknown element {element!r}")
        try:
            pos = np.array([float(t) for t in tokens[1:4]], dtype=np.float32)
        except ValueError:
            raise FormatError(f"line {lineno}: bad coordinate in {tokens[1:4]}") from None
        atom_role = tokens[4]
        if atom_role not in ROLES:
            raise FormatError(f"line {lineno}: unknown role {atom_role!r}")
        if role is None:
            role = atom_role
        elif atom_role != role:
            raise FormatError(
                f"line {lineno}: mixed roles in one structure ({atom_role!r} after {role!r})"
            )
        rest = tokens[5:]
        residue_id = None
        fragment_ids: tuple[str, ...] = ()
        if atom_role == "receptor":
            if not rest:
                raise FormatError(f"line {lineno}: receptor atom missing residue id")
            residue_id, rest = rest[0], rest[1:]
        else:
            # The fragment token is optional; a leading token that is a known
            # flag name means no fragment field was written at all.
            if rest and rest[0] not in FLAG_NAMES:
                frag_token, rest = rest[0], rest[1:]
                if frag_token != "-":
                    fragment_ids = tuple(frag_token.split(","))
        bad = [t for t in rest if t not in FLAG_NAMES]
        if bad:
            raise FormatError(f"line {lineno}: unknown flags {bad}")
        flags = frozenset(rest)
        t_name = type_name_for(element, flags)
        atoms.append(
            TypedAtom(
                position=pos,
                element=element,
                vdw_radius=radius_for(t_name, radii),
                role=atom_role,
                flags=flags,
                residue_id=residue_id,
                fragment_ids=fragment_ids,
            )
        )
    if not atoms:
        raise FormatError("structure contains no atoms")
    assert role is not None
    return Molecule(atoms=tuple(atoms), role=role, name=name)


_GNINATYPES_RECORD = struct.Struct("<fffi")


def _parse_gninatypes(data: bytes, name: str, radii: dict[str, float] | None) -> Molecule:
    if len(data) == 0:
        raise FormatError("empty gninatypes data")
    if len(data) % _GNINATYPES_RECORD.size != 0:
        raise FormatError(
            f"gninatypes length {len(data)} is not a multiple of {_GNINATYPES_RECORD.size}"
        )
    atoms: list[TypedAtom] = []
    role: str | None = None
    for offset, (x, y, z, channel) in enumerate(_GNINATYPES_RECORD.iter_unpack(data)):
        if not 0 <= channel < SMINA34.channel_count:
            raise FormatError(f"record {offset}: channel index {channel} out of range")
        if channel < SMINA34.ligand_channels:
            atom_role = "ligand"
            t_name = LIGAND_TYPE_NAMES[channel]
        else:
            atom_role = "receptor"
            t_name = RECEPTOR_TYPE_NAMES[channel - SMINA34.ligand_channels]
        if role is None:
            role = atom_role
        elif atom_role != role:
            raise FormatError(
                f"record {offset}: mixed roles in one gninatypes structure"
            )
        atoms.append(
            TypedAtom(
                position=np.array([x, y, z], dtype=np.float32),
                element=_NAME_TO_ELEMENT[t_name],
                vdw_radius=radius_for(t_name, radii),
                role=atom_role,
                flags=_NAME_TO_FLAGS[t_name],
                residue_id="UNK" if atom_role == "receptor" else None,
                channel=channel,
                type_name=t_name,
            )
        )
    assert role is not None
    return Molecule(atoms=tuple(atoms), role=role, name=name, scheme=SMINA34.name)


def parse_structure(data: bytes | str, fmt: str = "text", *, name: str = "",
                    radii: dict[str, float] | None = None) -> Molecule:
    """Parse structure `data` in the named format ("text" or "gninatypes").

    Text input yields an untyped molecule (run assign_types before
    voxelizing); gninatypes input is typed under smina34 by construction.
    """
    if fmt == "text":
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return _parse_text(data, name, radii)
    if fmt == "gninatypes":
        if isinstance(data, str):
            raise TypeError("gninatypes data must be bytes")
        return _parse_gninatypes(data, name, radii)
    raise ValueError(f"unknown format {fmt!r}")


def write_gninatypes(mol: Molecule) -> bytes:
    """Serialize a molecule typed under smina34 to gninatypes bytes."""
    if mol.scheme != SMINA34.name:
        raise ValueError(
            f"molecule is typed under {mol.scheme!r}, gninatypes requires 'smina34'"
        )
    chunks = []
    for i, atom in enumerate(mol.atoms):
        if atom.channel is None:
            raise ValueError(
                f"atom {i} ({atom.element}) has no smina34 channel; "
                "strip untyped atoms before writing gninatypes"
            )
        x, y, z = (float(v) for v in atom.position)
        chunks.append(_GNINATYPES_RECORD.pack(x, y, z, atom.channel))
    if not chunks:
        raise ValueError("refusing to write an empty gninatypes structure")
    return b"".join(chunks)


def format_structure(mol: Molecule) -> str:
    """Serialize a molecule to the text structure format."""
    lines = []
    for atom in mol.atoms:
        fields = [atom.element] + [f"{float(v):.6f}" for v in atom.position] + [atom.role]
        if atom.role == "receptor":
            fields.append(atom.residue_id if atom.residue_id is not None else "UNK")
        else:
            fields.append(",".join(atom.fragment_ids) if atom.fragment_ids else "-")
        fields.extend(sorted(atom.flags))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def load_radius_table(text: str) -> dict[str, float]:
    """Parse a key=value radius table; unknown type names are an error."""
    table = dict(DEFAULT_RADII)
    for key, value in parse_key_values(text).items():
        if key not in DEFAULT_RADII:
            raise FormatError(f"unknown type name {key!r} in radius table")
        try:
            radius = float(value)
        except ValueError:
            raise FormatError(f"{key}: bad radius {value!r}") from None
        if not radius > 0:
            raise FormatError(f"{key}: radius must be positive, got {radius}")
        table[key] = radius
    return table


def format_radius_table(table: dict[str, float]) -> str:
    lines = [f"{name} = {table[name]}" for name in sorted(table)]
    return "\n".join(lines) + "\n"
