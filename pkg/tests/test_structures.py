import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protbilevel.structures import (
    AminoAcidType,
    EmptyResultError,
    PdbParseError,
    StructureError,
    center_and_rotate,
    chain_from_dict,
    chain_to_dict,
    format_pdb,
    generate_synthetic_chain,
    load_chain,
    parse_pdb,
    save_chain,
    validate_chain,
)

MET_N = "ATOM      1  N   MET A   1      38.198  19.582  28.998  1.00 53.99           N"


def _pdb_line(serial, name, res, chain, seq, xyz, element, record="ATOM  "):
    name_field = f" {name:<3s}" if len(name) < 4 else name
    x, y, z = xyz
    return (f"{record}{serial:5d} {name_field} {res:>3s} {chain}{seq:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2s}")


def _three_residue_pdb(with_het=True):
    lines = []
    serial = 1
    for seq, res in enumerate(("GLY", "ALA", "SER"), start=1):
        for j, (name, el) in enumerate((("N", "N"), ("CA", "C"), ("C", "C"), ("O", "O"))):
            lines.append(_pdb_line(serial, name, res, "A", seq, (3.8 * seq, j * 1.1, 0.0), el))
            serial += 1
    if with_het:
        lines.append(_pdb_line(serial, "O", "HOH", "A", 100, (0.0, 0.0, 9.0), "O", record="HETATM"))
    return "\n".join(lines) + "\nEND\n"


def test_empty_text_gives_no_chains():
    assert parse_pdb("") == []


def test_single_atom_fixed_columns():
    # a lone N has no CA, so the residue is dropped; add a CA to keep it
    text = MET_N + "\n" + MET_N.replace(" N   MET", " CA  MET").replace("    1  ", "    2  ", 1)
    chain = parse_pdb(text)[0]
    atom = chain.atoms[0]
    assert (atom.atom_name, atom.element) == ("N", "N")
    assert atom.position == (38.198, 19.582, 28.998)
    assert chain.residues[0].amino_acid == AminoAcidType.MET


def test_residue_without_ca_is_dropped_and_counted():
    with pytest.raises(EmptyResultError):
        parse_pdb(MET_N)
    text = _three_residue_pdb(False)
    text = "\n".join(line for line in text.splitlines() if not (" CA " in line and "ALA" in line))
    chain = parse_pdb(text)[0]
    assert chain.n_residues == 2
    assert chain.metadata["dropped_no_ca"] == 1


def test_hetatm_is_ignored():
    chain = parse_pdb(_three_residue_pdb())[0]
    assert chain.n_residues == 3
    assert chain.n_atoms == 12
    validate_chain(chain)


def test_malformed_coordinates_report_line():
    bad = MET_N[:30] + "   xx.xx" + MET_N[38:]
    with pytest.raises(PdbParseError, match="line 1"):
        parse_pdb(bad)


def test_chain_filter_and_hydrogens():
    text = _three_residue_pdb(False)
    text += _pdb_line(99, "H", "GLY", "A", 1, (0, 0, 1), "H") + "\n"
    text += _pdb_line(100, "CA", "GLY", "B", 1, (5, 5, 5), "C") + "\n"
    chains = parse_pdb(text)
    assert [c.chain_id for c in chains] == ["A", "B"]
    assert all(a.element != "H" for a in chains[0].atoms)
    only_b = parse_pdb(text, "B")
    assert len(only_b) == 1 and only_b[0].n_atoms == 1


def test_pdb_and_json_round_trip(tmp_path):
    chain = generate_synthetic_chain(12, 3)
    again = parse_pdb(format_pdb(chain))[0]
    assert [r.amino_acid for r in again.residues] == [r.amino_acid for r in chain.residues]
    assert [a.atom_name for a in again.atoms] == [a.atom_name for a in chain.atoms]
    assert np.abs(again.coords - chain.coords).max() <= 5e-4  # 3 decimals in PDB columns
    save_chain(again, tmp_path / "c.json")
    assert load_chain(tmp_path / "c.json") == again
    assert chain_from_dict(chain_to_dict(chain)) == chain


def test_malformed_json_raises():
    with pytest.raises(StructureError):
        chain_from_dict({"residues": [{"aa": "ALA"}]})


def test_synthetic_minimal_and_deterministic():
    two = generate_synthetic_chain(2, 0)
    assert two.n_residues == 2
    assert all(two.atoms[r.ca_index].atom_name == "CA" for r in two.residues)
    assert generate_synthetic_chain(50, 7) == generate_synthetic_chain(50, 7)
    assert generate_synthetic_chain(50, 7) != generate_synthetic_chain(50, 8)


def test_synthetic_ca_spacing():
    chain = generate_synthetic_chain(50, 7)
    ca = chain.coords[chain.ca_indices]
    gaps = np.sqrt(((ca[1:] - ca[:-1]) ** 2).sum(axis=1))
    assert gaps.min() >= 3.7 and gaps.max() <= 3.9
    validate_chain(chain)


def test_synthetic_has_no_clashes():
    chain = generate_synthetic_chain(60, 11)
    xyz = chain.coords
    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1.0


def test_center_and_rotate_identity_on_centered_chain():
    chain = generate_synthetic_chain(10, 1)
    centered = chain.with_coords(chain.coords - chain.coords.mean(axis=0))
    out = center_and_rotate(centered, np.eye(3))
    assert np.allclose(out.coords, centered.coords, atol=1e-12)


def test_quarter_turn_about_z():
    chain = generate_synthetic_chain(3, 0)
    coords = np.zeros((chain.n_atoms, 3))
    coords[0] = (1, 0, 0)
    coords[1] = (-1, 0, 0)
    chain = chain.with_coords(coords)
    rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    out = center_and_rotate(chain, rz)
    assert np.allclose(out.coords[0], (0, 1, 0), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_any_rotation_centers_and_preserves_distances(seed):
    chain = generate_synthetic_chain(6, 5)
    out = center_and_rotate(chain, seed=seed)
    assert np.allclose(out.coords.mean(axis=0), 0, atol=1e-10)
    d0 = np.linalg.norm(chain.coords[:, None] - chain.coords[None], axis=-1)
    d1 = np.linalg.norm(out.coords[:, None] - out.coords[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-9)


def test_improper_rotation_rejected():
    chain = generate_synthetic_chain(3, 0)
    with pytest.raises(StructureError):
        center_and_rotate(chain, np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(StructureError):
        center_and_rotate(chain)


def test_with_coords_shape_checked():
    chain = generate_synthetic_chain(3, 0)
    with pytest.raises(StructureError):
        chain.with_coords(np.zeros((1, 3)))
    assert math.isclose(chain.with_sasa([1.0] * chain.n_atoms).atoms[0].sasa_label, 1.0)
