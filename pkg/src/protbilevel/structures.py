"""Protein chain domain model, PDB ingestion, chain JSON and synthetic chains."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)


class AminoAcidType(IntEnum):
    ALA = 0
    ARG = 1
    ASN = 2
    ASP = 3
    CYS = 4
    GLN = 5
    GLU = 6
    GLY = 7
    HIS = 8
    ILE = 9
    LEU = 10
    LYS = 11
    MET = 12
    PHE = 13
    PRO = 14
    SER = 15
    THR = 16
    TRP = 17
    TYR = 18
    VAL = 19
    UNK = 20
    MASK = 21

    @property
    def is_standard(self) -> bool:
        return self < 20


STANDARD_AMINO_ACIDS = tuple(AminoAcidType(i) for i in range(20))
N_STANDARD = 20

# Atom-name vocabulary for node typing; order follows the common 37-slot layout.
ATOM_NAMES = (
    "N", "CA", "C", "CB", "O", "CG", "CG1", "CG2", "OG", "OG1", "SG", "CD",
    "CD1", "CD2", "ND1", "ND2", "OD1", "OD2", "SD", "CE", "CE1", "CE2", "CE3",
    "NE", "NE1", "NE2", "OE1", "OE2", "CH2", "NH1", "NH2", "OH", "CZ", "CZ2",
    "CZ3", "NZ", "OXT",
)
ATOM_NAME_INDEX = {name: i for i, name in enumerate(ATOM_NAMES)}
BACKBONE_ATOMS = ("N", "CA", "C", "O")


class StructureError(ValueError):
    """Invalid structure data or arguments."""


class PdbParseError(StructureError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyResultError(StructureError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    atom_name: str
    position: tuple[float, float, float]
    residue_index: int
    sasa_label: float | None = None
    label: int | None = None  # optional per-node class label for fine-tuning


@dataclass(frozen=True)
class Residue:
    amino_acid: AminoAcidType
    seq_position: int
    atom_indices: tuple[int, ...]
    ca_index: int
    insertion_code: str = ""


@dataclass(frozen=True)
class ProteinChain:
    chain_id: str
    residues: tuple[Residue, ...]
    atoms: tuple[Atom, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    @cached_property
    def coords(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 3))
        out = np.array([a.position for a in self.atoms], dtype=np.float64)
        out.setflags(write=False)
        return out

    @property
    def n_residues(self) -> int:
        return len(self.residues)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def atom_residue_index(self) -> np.ndarray:
        return np.array([a.residue_index for a in self.atoms], dtype=np.int64)

    @cached_property
    def ca_indices(self) -> np.ndarray:
        return np.array([r.ca_index for r in self.residues], dtype=np.int64)

    def atom_lookup(self, residue_index: int) -> dict[str, int]:
        """Map atom name -> atom index for one residue."""
        return {self.atoms[i].atom_name: i for i in self.residues[residue_index].atom_indices}

    def with_coords(self, coords: np.ndarray) -> "ProteinChain":
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (self.n_atoms, 3):
            raise StructureError(f"coordinate array shape {coords.shape} != ({self.n_atoms}, 3)")
        # direct construction; dataclasses.replace is slow on this hot path
        atoms = tuple(
            Atom(a.element, a.atom_name, (x, y, z), a.residue_index, a.sasa_label, a.label)
            for a, (x, y, z) in zip(self.atoms, coords.tolist())
        )
        return replace(self, atoms=atoms, metadata=dict(self.metadata))

    def with_sasa(self, per_atom: Sequence[float]) -> "ProteinChain":
        if len(per_atom) != self.n_atoms:
            raise StructureError("one SASA value per atom required")
        atoms = tuple(replace(a, sasa_label=float(s)) for a, s in zip(self.atoms, per_atom))
        return replace(self, atoms=atoms, metadata=dict(self.metadata))

    def with_labels(self, labels: Sequence[int]) -> "ProteinChain":
        if len(labels) != self.n_atoms:
            raise StructureError("one label per atom required")
        atoms = tuple(replace(a, label=int(v)) for a, v in zip(self.atoms, labels))
        return replace(self, atoms=atoms, metadata=dict(self.metadata))


def build_chain(chain_id: str, residue_specs: Iterable[tuple], metadata: dict | None = None) -> ProteinChain:
    """Assemble a chain from ``(aa, seq, icode, [(name, element, xyz, sasa, label), ...])``.

    Residues without a CA are dropped and counted in ``metadata['dropped_no_ca']``.
    """
    residues: list[Residue] = []
    atoms: list[Atom] = []
    dropped = 0
    for aa, seq, icode, atom_specs in residue_specs:
        names = [spec[0] for spec in atom_specs]
        if "CA" not in names:
            dropped += 1
            continue
        r_index = len(residues)
        indices = []
        ca_index = -1
        seen = set()
        for name, element, xyz, sasa, label in atom_specs:
            if name in seen:
                continue
            seen.add(name)
            idx = len(atoms)
            atoms.append(Atom(element, name, tuple(float(v) for v in xyz), r_index, sasa, label))
            indices.append(idx)
            if name == "CA":
                ca_index = idx
        residues.append(Residue(AminoAcidType(aa), int(seq), tuple(indices), ca_index, icode))
    meta = dict(metadata or {})
    meta["dropped_no_ca"] = meta.get("dropped_no_ca", 0) + dropped
    return ProteinChain(chain_id, tuple(residues), tuple(atoms), meta)


def validate_chain(chain: ProteinChain) -> None:
    """Raise :class:`StructureError` if any chain invariant is violated."""
    problems = []
    keys = [(r.seq_position, r.insertion_code) for r in chain.residues]
    if keys != sorted(keys):
        problems.append("residues not ordered by sequence position")
    seen_atoms: set[int] = set()
    for ri, res in enumerate(chain.residues):
        if res.ca_index not in res.atom_indices:
            problems.append(f"residue {ri}: CA index not a member")
        names = set()
        for ai in res.atom_indices:
            if not 0 <= ai < chain.n_atoms:
                problems.append(f"residue {ri}: atom index {ai} out of range")
                continue
            atom = chain.atoms[ai]
            if atom.residue_index != ri:
                problems.append(f"atom {ai}: residue_index {atom.residue_index} != {ri}")
            if atom.atom_name in names:
                problems.append(f"residue {ri}: duplicate atom name {atom.atom_name}")
            names.add(atom.atom_name)
            seen_atoms.add(ai)
        if not (0 <= res.ca_index < chain.n_atoms and chain.atoms[res.ca_index].atom_name == "CA"):
            problems.append(f"residue {ri}: ca_index does not point at a CA atom")
    if len(seen_atoms) != chain.n_atoms:
        problems.append("atoms not owned by exactly one residue")
    if chain.n_atoms and not np.all(np.isfinite(chain.coords)):
        problems.append("non-finite coordinates")
    for a in chain.atoms:
        if a.sasa_label is not None and a.sasa_label < 0:
            problems.append(f"negative SASA label on {a.atom_name}")
            break
    if problems:
        raise StructureError("; ".join(problems))


# ---------------------------------------------------------------------------
# PDB ingestion


def _element_from_name(atom_name: str) -> str:
    letters = "".join(ch for ch in atom_name.strip() if ch.isalpha())
    return letters[:1].upper() if letters else ""


def parse_pdb(text: str, chain_filter: str | None = None) -> list[ProteinChain]:
    """Parse ATOM records from fixed-column PDB text.

    Only the first model is read. Hydrogens, HETATM records, non-standard residue
    names and alternate locations other than blank/``A`` are skipped. Residues
    without an alpha carbon are dropped and counted in each chain's
    ``metadata['dropped_no_ca']``.
    """
    per_chain: dict[str, dict[tuple[int, str], dict]] = {}
    order: list[str] = []
    saw_atom = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if not record.startswith("ATOM  ") and record.rstrip() != "ATOM":
            continue
        saw_atom = True
        altloc = line[16:17]
        if altloc not in ("", " ", "A"):
            continue
        chain_id = line[21:22].strip() or " "
        if chain_filter is not None and chain_id != chain_filter:
            continue
        atom_name = line[12:16].strip()
        res_name = line[17:20].strip()
        try:
            x, y, z = float(line[30:38]), float(line[38:46]), float(line[46:54])
        except ValueError:
            raise PdbParseError(lineno, f"malformed coordinates {line[30:54]!r}") from None
        if not all(math.isfinite(v) for v in (x, y, z)):
            raise PdbParseError(lineno, "non-finite coordinate")
        try:
            seq = int(line[22:26])
        except ValueError:
            raise PdbParseError(lineno, f"malformed residue number {line[22:26]!r}") from None
        icode = line[26:27].strip()
        element = line[76:78].strip().upper() or _element_from_name(atom_name)
        if element in ("H", "D"):
            continue
        if res_name in AminoAcidType.__members__ and res_name != "MASK":
            aa = AminoAcidType[res_name]
        else:
            continue
        if chain_id not in per_chain:
            per_chain[chain_id] = {}
            order.append(chain_id)
        residues = per_chain[chain_id]
        key = (seq, icode)
        res = residues.setdefault(key, {"aa": aa, "atoms": []})
        res["atoms"].append((atom_name, element, (x, y, z), None, None))
    if not saw_atom:
        return []
    chains = []
    for chain_id in order:
        residues = per_chain[chain_id]
        specs = [
            (residues[key]["aa"], key[0], key[1], residues[key]["atoms"])
            for key in sorted(residues)
        ]
        chain = build_chain(chain_id, specs)
        if chain.metadata["dropped_no_ca"]:
            logger.warning("chain %s: dropped %d residues without CA", chain_id, chain.metadata["dropped_no_ca"])
        if chain.n_residues:
            chains.append(chain)
    if not chains:
        raise EmptyResultError("no chains parsed" + (f" for chain {chain_filter!r}" if chain_filter else ""))
    return chains


def format_pdb(chain: ProteinChain) -> str:
    lines = []
    for serial, atom in enumerate(chain.atoms, start=1):
        res = chain.residues[atom.residue_index]
        name = atom.atom_name
        name_field = f" {name:<3s}" if len(name) < 4 else name
        x, y, z = atom.position
        lines.append(
            f"ATOM  {serial:5d} {name_field}{' '}{res.amino_acid.name:>3s} {chain.chain_id[:1]}"
            f"{res.seq_position:4d}{(res.insertion_code or ' ')[:1]}   "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {atom.element:>2s}"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Canonical chain JSON


def chain_to_dict(chain: ProteinChain) -> dict:
    residues = []
    for res in chain.residues:
        atoms = []
        for ai in res.atom_indices:
            a = chain.atoms[ai]
            entry = {"name": a.atom_name, "element": a.element, "xyz": list(a.position)}
            if a.sasa_label is not None:
                entry["sasa"] = a.sasa_label
            if a.label is not None:
                entry["label"] = a.label
            atoms.append(entry)
        entry = {"aa": res.amino_acid.name, "seq": res.seq_position, "atoms": atoms}
        if res.insertion_code:
            entry["icode"] = res.insertion_code
        residues.append(entry)
    return {"chain_id": chain.chain_id, "residues": residues}


def chain_from_dict(data: dict) -> ProteinChain:
    try:
        specs = [
            (
                AminoAcidType[r["aa"]],
                int(r["seq"]),
                r.get("icode", ""),
                [(a["name"], a["element"], a["xyz"], a.get("sasa"), a.get("label")) for a in r["atoms"]],
            )
            for r in data["residues"]
        ]
    except (KeyError, TypeError) as exc:
        raise StructureError(f"malformed chain JSON: {exc}") from exc
    chain = build_chain(str(data.get("chain_id", "A")), specs)
    validate_chain(chain)
    return chain


def save_chain(chain: ProteinChain, path: str | Path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain)))


def load_chain(path: str | Path) -> ProteinChain:
    return chain_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Rigid motions


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def center_and_rotate(
    chain: ProteinChain, rotation: np.ndarray | None = None, seed: int | np.random.Generator | None = None
) -> ProteinChain:
    """Center all atoms on the origin, then apply a proper rotation.

    With ``rotation=None`` a uniformly random rotation is drawn from ``seed``.
    """
    if rotation is None:
        if seed is None:
            raise StructureError("either rotation or seed is required")
        rotation = random_rotation(np.random.default_rng(seed))
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise StructureError("rotation must be 3x3")
    if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rotation) - 1.0) > 1e-6:
        raise StructureError("rotation is not a proper orthonormal matrix")
    coords = chain.coords
    centered = coords - coords.mean(axis=0)
    return chain.with_coords(centered @ rotation.T)


# ---------------------------------------------------------------------------
# Synthetic chains

# Ideal backbone geometry (bond lengths in Angstrom, angles in degrees).
_N_CA, _CA_C, _C_N, _C_O = 1.458, 1.525, 1.329, 1.231
_ANG_N_CA_C, _ANG_CA_C_N, _ANG_C_N_CA, _ANG_CA_C_O = 111.2, 116.2, 121.7, 120.5

# Per-type backbone (phi, psi) centers in degrees, spread over allowed regions so the
# residue type leaves a trace in the alpha-carbon geometry.
_PHI_PSI = {
    AminoAcidType.ALA: (-62, -42), AminoAcidType.ARG: (-75, -28), AminoAcidType.ASN: (-95, 5),
    AminoAcidType.ASP: (-85, -12), AminoAcidType.CYS: (-120, 125), AminoAcidType.GLN: (-68, -35),
    AminoAcidType.GLU: (-58, -48), AminoAcidType.GLY: (75, 25), AminoAcidType.HIS: (-105, 140),
    AminoAcidType.ILE: (-125, 132), AminoAcidType.LEU: (-65, -40), AminoAcidType.LYS: (-72, -20),
    AminoAcidType.MET: (-100, -30), AminoAcidType.PHE: (-135, 150), AminoAcidType.PRO: (-65, 145),
    AminoAcidType.SER: (-80, 160), AminoAcidType.THR: (-115, 155), AminoAcidType.TRP: (-140, 120),
    AminoAcidType.TYR: (-150, 160), AminoAcidType.VAL: (-128, 115),
}

_BOND = {"C": 1.52, "N": 1.47, "O": 1.43, "S": 1.81}

# Side-chain pseudo-atoms after CB: (name, element, torsion-reference atoms, chi slot, offset deg).
_SIDE_CHAINS: dict[AminoAcidType, list[tuple[str, str, tuple[str, str, str], int, float]]] = {
    AminoAcidType.ALA: [],
    AminoAcidType.SER: [("OG", "O", ("N", "CA", "CB"), 0, 0.0)],
    AminoAcidType.CYS: [("SG", "S", ("N", "CA", "CB"), 0, 0.0)],
    AminoAcidType.VAL: [("CG1", "C", ("N", "CA", "CB"), 0, 0.0), ("CG2", "C", ("N", "CA", "CB"), 0, 120.0)],
    AminoAcidType.THR: [("OG1", "O", ("N", "CA", "CB"), 0, 0.0), ("CG2", "C", ("N", "CA", "CB"), 0, -120.0)],
    AminoAcidType.PRO: [("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD", "C", ("CA", "CB", "CG"), 1, 0.0)],
    AminoAcidType.LEU: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD1", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("CD2", "C", ("CA", "CB", "CG"), 1, 120.0),
    ],
    AminoAcidType.ILE: [
        ("CG1", "C", ("N", "CA", "CB"), 0, 0.0), ("CG2", "C", ("N", "CA", "CB"), 0, -120.0),
        ("CD1", "C", ("CA", "CB", "CG1"), 1, 0.0),
    ],
    AminoAcidType.ASN: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("OD1", "O", ("CA", "CB", "CG"), 1, 0.0),
        ("ND2", "N", ("CA", "CB", "CG"), 1, 180.0),
    ],
    AminoAcidType.ASP: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("OD1", "O", ("CA", "CB", "CG"), 1, 0.0),
        ("OD2", "O", ("CA", "CB", "CG"), 1, 180.0),
    ],
    AminoAcidType.MET: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("SD", "S", ("CA", "CB", "CG"), 1, 0.0),
        ("CE", "C", ("CB", "CG", "SD"), 2, 0.0),
    ],
    AminoAcidType.GLN: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("OE1", "O", ("CB", "CG", "CD"), 2, 0.0),
    ],
    AminoAcidType.GLU: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("OE1", "O", ("CB", "CG", "CD"), 2, 0.0),
    ],
    AminoAcidType.LYS: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("CE", "C", ("CB", "CG", "CD"), 2, 0.0),
    ],
    AminoAcidType.ARG: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("NE", "N", ("CB", "CG", "CD"), 2, 0.0),
    ],
    AminoAcidType.HIS: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("ND1", "N", ("CA", "CB", "CG"), 1, 0.0),
        ("CD2", "C", ("CA", "CB", "CG"), 1, 180.0),
    ],
    AminoAcidType.PHE: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD1", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("CD2", "C", ("CA", "CB", "CG"), 1, 180.0),
    ],
    AminoAcidType.TYR: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD1", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("CD2", "C", ("CA", "CB", "CG"), 1, 180.0),
    ],
    AminoAcidType.TRP: [
        ("CG", "C", ("N", "CA", "CB"), 0, 0.0), ("CD1", "C", ("CA", "CB", "CG"), 1, 0.0),
        ("CD2", "C", ("CA", "CB", "CG"), 1, 180.0),
    ],
}

# One preferred rotamer (chi1, chi2, chi3) per type, degrees.
_ROTAMERS = {aa: (-60.0 + 120.0 * (aa % 3), 180.0 - 60.0 * (aa % 4), 60.0 + 90.0 * (aa % 2)) for aa in STANDARD_AMINO_ACIDS}


def place_atom(a: np.ndarray, b: np.ndarray, c: np.ndarray, bond: float, angle: float, torsion: float) -> np.ndarray:
    """Position d with |cd| = bond, angle(b, c, d) = angle and dihedral(a, b, c, d) = torsion (radians)."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * math.cos(angle), bond * math.sin(angle) * math.cos(torsion), bond * math.sin(angle) * math.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def ideal_cb(n: np.ndarray, ca: np.ndarray, c: np.ndarray) -> np.ndarray:
    b = ca - n
    cc = c - ca
    a = np.cross(b, cc)
    return -0.58273431 * a + 0.56802827 * b - 0.54067466 * cc + ca


def generate_synthetic_chain(n_residues: int, seed: int, chain_id: str = "A") -> ProteinChain:
    """Deterministic self-avoiding chain with ideal backbone geometry and pseudo side chains.

    Backbone torsions are drawn around a per-type center, so consecutive CA-CA
    distances follow the ideal trans peptide (about 3.80 Angstrom).
    """
    if n_residues < 2:
        raise StructureError("n_residues must be >= 2")
    rng = np.random.default_rng(int(seed) % 2**64)
    types = rng.integers(0, N_STANDARD, size=n_residues)
    rad = math.radians
    for _attempt in range(200):
        backbone = _grow_backbone(types, rng)
        if backbone is not None:
            break
    else:  # pragma: no cover - vanishingly rare
        raise StructureError("failed to grow a self-avoiding chain")
    n_xyz, ca_xyz, c_xyz, psi = backbone
    # O and CB are fixed by the backbone, so place them all before any side chain.
    o_xyz = np.stack([
        place_atom(n_xyz[i], ca_xyz[i], c_xyz[i], _C_O, rad(_ANG_CA_C_O), psi[i] + math.pi)
        for i in range(n_residues)
    ])
    cb_xyz = np.stack([ideal_cb(n_xyz[i], ca_xyz[i], c_xyz[i]) for i in range(n_residues)])
    has_cb = types != AminoAcidType.GLY
    owner = np.concatenate([np.arange(n_residues)] * 4 + [np.flatnonzero(has_cb)])
    occupied = np.concatenate([n_xyz, ca_xyz, c_xyz, o_xyz, cb_xyz[has_cb]])
    specs = []
    for i in range(n_residues):
        aa = AminoAcidType(int(types[i]))
        # O sits in the peptide plane, opposite the next N.
        pos = {"N": n_xyz[i], "CA": ca_xyz[i], "C": c_xyz[i], "O": o_xyz[i]}
        atoms = [(name, name[0], pos[name], None, None) for name in BACKBONE_ATOMS]
        if aa != AminoAcidType.GLY:
            pos["CB"] = cb_xyz[i]
            atoms.append(("CB", "C", pos["CB"], None, None))
            others = occupied[owner != i]
            best, best_gap = {}, -1.0
            for attempt in range(16):
                spread = 8.0 if attempt == 0 else 60.0
                chis = [rad(v + rng.normal(0.0, spread)) for v in _ROTAMERS[aa]]
                side = {}
                for name, element, (ra, rb, rc), slot, offset in _SIDE_CHAINS[aa]:
                    ref = {**pos, **side}
                    side[name] = place_atom(ref[ra], ref[rb], ref[rc], _BOND[element], rad(111.0), chis[slot] + rad(offset))
                if not side:
                    best = side
                    break
                xyz = np.stack(list(side.values()))
                gap = np.linalg.norm(xyz[:, None, :] - others[None, :, :], axis=-1).min()
                if gap > best_gap:
                    best, best_gap = side, gap
                if gap >= 2.5:
                    break
            side = best
            for name, element, *_rest in _SIDE_CHAINS[aa]:
                atoms.append((name, element, side[name], None, None))
            if side:
                occupied = np.concatenate([occupied, np.stack(list(side.values()))])
                owner = np.concatenate([owner, np.full(len(side), i)])
        specs.append((aa, i + 1, "", atoms))
    return build_chain(chain_id, specs, {"synthetic_seed": int(seed)})


def _grow_backbone(types: np.ndarray, rng: np.random.Generator):
    """NeRF growth with clash rejection; backtracks a few residues when stuck."""
    rad = math.radians
    n = len(types)
    phi_c = np.array([rad(_PHI_PSI[AminoAcidType(int(t))][0]) for t in types])
    psi_c = np.array([rad(_PHI_PSI[AminoAcidType(int(t))][1]) for t in types])
    phi = phi_c + rng.normal(0.0, rad(8.0), n)
    psi = psi_c + rng.normal(0.0, rad(8.0), n)
    n_xyz = np.zeros((n, 3))
    ca_xyz = np.zeros((n, 3))
    c_xyz = np.zeros((n, 3))
    ca_xyz[0] = (_N_CA, 0.0, 0.0)
    ang = rad(180.0 - _ANG_N_CA_C)
    c_xyz[0] = ca_xyz[0] + _CA_C * np.array([math.cos(ang), math.sin(ang), 0.0])
    i = 1
    budget = 40 * n
    while i < n:
        placed = False
        for retry in range(30):
            omega = math.pi + rng.normal(0.0, rad(3.0))
            n_xyz[i] = place_atom(n_xyz[i - 1], ca_xyz[i - 1], c_xyz[i - 1], _C_N, rad(_ANG_CA_C_N), psi[i - 1])
            ca_xyz[i] = place_atom(ca_xyz[i - 1], c_xyz[i - 1], n_xyz[i], _N_CA, rad(_ANG_C_N_CA), omega)
            c_xyz[i] = place_atom(c_xyz[i - 1], n_xyz[i], ca_xyz[i], _CA_C, rad(_ANG_N_CA_C), phi[i])
            if i < 3:
                placed = True
                break
            old = np.concatenate([n_xyz[: i - 2], ca_xyz[: i - 2], c_xyz[: i - 2]])
            new = np.stack([n_xyz[i], ca_xyz[i], c_xyz[i]])
            ca_gap = np.linalg.norm(ca_xyz[: i - 2] - ca_xyz[i], axis=1).min()
            bb_gap = np.linalg.norm(new[:, None] - old[None], axis=-1).min()
            if ca_gap >= 4.2 and bb_gap >= 3.0:
                placed = True
                break
            width = rad(60.0 if retry < 15 else 180.0)
            psi[i - 1] = psi_c[i - 1] + rng.uniform(-width, width)
        budget -= 1
        if budget <= 0:
            return None
        if placed:
            i += 1
        else:
            back = min(i - 1, int(rng.integers(2, 7)))
            i -= back
            for j in range(i - 1, i + back):
                psi[j] = psi_c[j] + rng.normal(0.0, rad(30.0))
                phi[j] = phi_c[j] + rng.normal(0.0, rad(8.0))
            i = max(i, 1)
    return n_xyz, ca_xyz, c_xyz, psi
