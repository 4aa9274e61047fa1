"""Residue frames, dihedrals and torsion labels, Shrake-Rupley SASA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .structures import AminoAcidType, ProteinChain

A = AminoAcidType


class DegenerateGeometryError(ValueError):
    pass


class UnknownElementError(KeyError):
    def __init__(self, symbols):
        self.symbols = sorted(set(symbols))
        super().__init__(f"no van der Waals radius for element(s): {', '.join(self.symbols)}")


@dataclass(frozen=True)
class LocalFrame:
    rotation: np.ndarray  # columns u, v, w
    origin: np.ndarray

    def to_local(self, g: np.ndarray) -> np.ndarray:
        return self.rotation.T @ g


def local_frame(r_n, r_ca, r_c) -> LocalFrame:
    r_n, r_ca, r_c = (np.asarray(x, dtype=np.float64) for x in (r_n, r_ca, r_c))
    v_n = r_n - r_ca
    v_c = r_c - r_ca
    diff = v_n - v_c
    cross = np.cross(v_n, v_c)
    if np.linalg.norm(cross) < 1e-8 or np.linalg.norm(diff) < 1e-8:
        raise DegenerateGeometryError("N, CA and C are collinear or coincident")
    u = diff / np.linalg.norm(diff)
    v = cross / np.linalg.norm(cross)
    w = np.cross(u, v)
    return LocalFrame(np.column_stack([u, v, w]), r_ca.copy())


def local_frames(r_n: np.ndarray, r_ca: np.ndarray, r_c: np.ndarray):
    """Vectorised :func:`local_frame` over rows; returns ``(rotations, valid)``.

    Degenerate rows get the identity rotation and ``valid=False``.
    """
    v_n = r_n - r_ca
    v_c = r_c - r_ca
    diff = v_n - v_c
    cross = np.cross(v_n, v_c)
    dn = np.linalg.norm(diff, axis=-1)
    cn = np.linalg.norm(cross, axis=-1)
    valid = (dn >= 1e-8) & (cn >= 1e-8) & np.all(np.isfinite(r_n) & np.isfinite(r_c), axis=-1)
    u = diff / np.where(valid, dn, 1.0)[:, None]
    v = cross / np.where(valid, cn, 1.0)[:, None]
    w = np.cross(u, v)
    rot = np.stack([u, v, w], axis=-1)
    rot[~valid] = np.eye(3)
    return rot, valid


# ---------------------------------------------------------------------------
# Dihedrals


def dihedral(p1, p2, p3, p4) -> float:
    """Signed dihedral about the p2-p3 axis in (-pi, pi] (IUPAC sign)."""
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    if nb2 < 1e-12 or np.linalg.norm(n1) < 1e-12 or np.linalg.norm(n2) < 1e-12:
        raise DegenerateGeometryError("dihedral undefined for collinear points")
    y = nb2 * np.dot(b1, n2)
    x = np.dot(n1, n2)
    angle = math.atan2(y, x)
    if angle <= -math.pi:
        angle += 2 * math.pi
    return angle


TORSION_NAMES = ("phi", "psi", "omega", "chi1", "chi2", "chi3", "chi4")

CHI_ATOMS: dict[AminoAcidType, list[tuple[str, str, str, str]]] = {
    A.ALA: [],
    A.ARG: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "NE"), ("CG", "CD", "NE", "CZ")],
    A.ASN: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")],
    A.ASP: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")],
    A.CYS: [("N", "CA", "CB", "SG")],
    A.GLN: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")],
    A.GLU: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")],
    A.GLY: [],
    A.HIS: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "ND1")],
    A.ILE: [("N", "CA", "CB", "CG1"), ("CA", "CB", "CG1", "CD1")],
    A.LEU: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    A.LYS: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "CE"), ("CG", "CD", "CE", "NZ")],
    A.MET: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "SD"), ("CB", "CG", "SD", "CE")],
    A.PHE: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    A.PRO: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD")],
    A.SER: [("N", "CA", "CB", "OG")],
    A.THR: [("N", "CA", "CB", "OG1")],
    A.TRP: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    A.TYR: [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    A.VAL: [("N", "CA", "CB", "CG1")],
}

PEPTIDE_BOND_MAX = 2.0  # Angstrom; longer C-N gaps are chain breaks


@dataclass(frozen=True)
class TorsionSet:
    angles: np.ndarray  # (7,) radians
    valid: np.ndarray  # (7,) bool


def compute_torsions(chain: ProteinChain) -> list[TorsionSet]:
    """Seven torsions per residue: phi, psi, omega, chi1..chi4.

    Backbone angles spanning a chain break (C-N > 2 A) are marked invalid.
    """
    coords = chain.coords
    lookups = [chain.atom_lookup(i) for i in range(chain.n_residues)]

    def linked(i: int) -> bool:
        a, b = lookups[i], lookups[i + 1]
        if "C" not in a or "N" not in b:
            return False
        return np.linalg.norm(coords[a["C"]] - coords[b["N"]]) <= PEPTIDE_BOND_MAX

    out = []
    for i, res in enumerate(chain.residues):
        here = lookups[i]
        quads: list[list[int] | None] = [None] * 7
        if i > 0 and linked(i - 1) and all(k in here for k in ("N", "CA", "C")):
            quads[0] = [lookups[i - 1]["C"], here["N"], here["CA"], here["C"]]
        if i + 1 < chain.n_residues and linked(i):
            nxt = lookups[i + 1]
            if all(k in here for k in ("N", "CA", "C")):
                quads[1] = [here["N"], here["CA"], here["C"], nxt["N"]]
            if "CA" in nxt and "C" in here:
                quads[2] = [here["CA"], here["C"], nxt["N"], nxt["CA"]]
        for k, names in enumerate(CHI_ATOMS.get(res.amino_acid, [])):
            if all(n in here for n in names):
                quads[3 + k] = [here[n] for n in names]
        angles = np.zeros(7)
        valid = np.zeros(7, dtype=bool)
        for k, q in enumerate(quads):
            if q is None:
                continue
            try:
                angles[k] = dihedral(*coords[q])
                valid[k] = True
            except DegenerateGeometryError:
                pass
        out.append(TorsionSet(angles, valid))
    return out


# ---------------------------------------------------------------------------
# Solvent accessible surface area

VDW_RADII = {"C": 1.7, "N": 1.55, "O": 1.52, "S": 1.8}
# Recognised elements without a specific entry share the fallback radius.
_OTHER_ELEMENTS = {
    "P", "SE", "FE", "ZN", "MG", "MN", "CA", "NA", "K", "CL", "BR", "I", "F", "CU", "CO", "NI", "CD", "HG",
}
DEFAULT_RADIUS = 1.8


@dataclass(frozen=True)
class SasaResult:
    per_atom: np.ndarray
    probe_radius: float
    n_points: int


def vdw_radius(element: str) -> float:
    el = element.strip().upper()
    if el in VDW_RADII:
        return VDW_RADII[el]
    if el in _OTHER_ELEMENTS:
        return DEFAULT_RADIUS
    raise UnknownElementError([element])


def sphere_points(n_points: int) -> np.ndarray:
    """Antipodally symmetric Fibonacci lattice on the unit sphere.

    The upper hemisphere is sampled with the golden-angle spiral and mirrored
    through the center, so every point has its antipode in the set.
    """
    if n_points < 16 or n_points % 2:
        raise ValueError("n_points must be an even integer >= 16")
    half = n_points // 2
    i = np.arange(half)
    z = 1.0 - (2 * i + 1) / n_points
    r = np.sqrt(1.0 - z * z)
    theta = i * math.pi * (3.0 - math.sqrt(5.0))
    upper = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    return np.concatenate([upper, -upper])


def shrake_rupley(
    chain: ProteinChain | None = None,
    probe_radius: float = 1.4,
    n_points: int = 960,
    *,
    coords: np.ndarray | None = None,
    radii: np.ndarray | None = None,
) -> SasaResult:
    """Per-atom solvent accessible area (Angstrom^2) by sphere-point sampling.

    Radii come from the element table unless ``radii`` is given; ``coords`` and
    ``radii`` together allow bare point sets without a chain.
    """
    if coords is None:
        if chain is None:
            raise ValueError("chain or coords required")
        coords = chain.coords
    coords = np.asarray(coords, dtype=np.float64)
    if radii is None:
        if chain is None:
            raise ValueError("radii required without a chain")
        unknown = [a.element for a in chain.atoms if a.element.strip().upper() not in VDW_RADII
                   and a.element.strip().upper() not in _OTHER_ELEMENTS]
        if unknown:
            raise UnknownElementError(unknown)
        radii = np.array([vdw_radius(a.element) for a in chain.atoms])
    radii = np.asarray(radii, dtype=np.float64)
    unit = sphere_points(n_points)
    n = len(coords)
    out = np.zeros(n)
    if n == 0:
        return SasaResult(out, probe_radius, n_points)
    expanded = radii + probe_radius
    tree = cKDTree(coords)
    cutoff = 2.0 * (expanded.max())
    for i in range(n):
        cand = tree.query_ball_point(coords[i], cutoff)
        cand = np.array([j for j in cand if j != i], dtype=np.int64)
        if len(cand):
            d = np.linalg.norm(coords[cand] - coords[i], axis=1)
            cand = cand[d < expanded[i] + expanded[cand]]
        pts = coords[i] + expanded[i] * unit
        if len(cand):
            d2 = ((pts[:, None, :] - coords[cand][None, :, :]) ** 2).sum(-1)
            buried = (d2 < expanded[cand][None, :] ** 2).any(axis=1)
            n_free = n_points - int(buried.sum())
        else:
            n_free = n_points
        out[i] = n_free / n_points * 4.0 * math.pi * expanded[i] ** 2
    return SasaResult(out, probe_radius, n_points)


def attach_sasa(chain: ProteinChain, probe_radius: float = 1.4, n_points: int = 960) -> ProteinChain:
    return chain.with_sasa(shrake_rupley(chain, probe_radius, n_points).per_atom)
