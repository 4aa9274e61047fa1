"""Bilevel KNN graph: atom track, residue (CA) track and a virtual origin node."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .structures import ProteinChain


class GraphError(ValueError):
    pass


_SHELLS: dict[tuple[int, int, int], np.ndarray] = {}
_BLOCK = 5  # queries are processed in blocks of BLOCK^3 cells


def _shell_offsets(lo: int, hi: int, block: int) -> np.ndarray:
    """Cell offsets (from a block's low corner) whose Chebyshev gap to the block is in [lo, hi]."""
    key = (lo, hi, block)
    if key not in _SHELLS:
        ax = np.arange(-hi, block + hi)
        grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        gap = np.maximum(np.maximum(-grid, grid - (block - 1)), 0).max(axis=1)
        _SHELLS[key] = grid[(gap >= lo) & (gap <= hi)]
    return _SHELLS[key]


def _expand_ranges(starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    lengths = stops - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return offsets + np.arange(total)


def knn(points: np.ndarray, k: int, cell_size: float | None = None) -> np.ndarray:
    """Exact k nearest neighbours of every point (self excluded).

    Returns an ``(n, min(k, n - 1))`` index array ordered by distance, ties
    broken by lower index. A uniform grid limits the candidates examined; the
    search ring grows until the k-th distance is provably final.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    kk = min(k, n - 1)
    if kk <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    if cell_size is None or not np.isfinite(cell_size) or cell_size <= 0:
        extent = np.ptp(points, axis=0).max()
        cell_size = max(extent / max(round(n ** (1 / 3)), 1), 1e-6)
    cells = np.floor((points - points.min(axis=0)) / cell_size).astype(np.int64)
    dims = cells.max(axis=0) + 1
    lin = np.ravel_multi_index(cells.T, dims)
    order = np.argsort(lin, kind="stable")
    keys, first, counts = np.unique(lin[order], return_index=True, return_counts=True)
    max_ring = int(dims.max())
    # first ring whose box is expected to hold about twice k points
    occupancy = n / len(keys)
    r_start = int(np.clip(np.ceil(((2 * kk / occupancy) ** (1 / 3) - _BLOCK) / 2), 1, max_ring))
    blocks = cells // _BLOCK
    block_lin = np.ravel_multi_index(blocks.T, blocks.max(axis=0) + 1)
    block_order = np.argsort(block_lin, kind="stable")
    _, block_first, block_counts = np.unique(block_lin[block_order], return_index=True, return_counts=True)
    out = np.empty((n, kk), dtype=np.int64)
    for b in range(len(block_first)):
        members = block_order[block_first[b] : block_first[b] + block_counts[b]]
        q = points[members]
        corner = blocks[members[0]] * _BLOCK
        cand_parts, d2_parts = [], []
        n_cand = 0
        lo, r = 0, r_start
        while True:
            ring = corner + _shell_offsets(lo, r, _BLOCK)
            ring = ring[np.all((ring >= 0) & (ring < dims), axis=1)]
            if len(ring):
                ids = np.ravel_multi_index(ring.T, dims)
                pos = np.searchsorted(keys, ids)
                inside = pos < len(keys)
                pos, ids = pos[inside], ids[inside]
                pos = pos[keys[pos] == ids]
                new = order[_expand_ranges(first[pos], first[pos] + counts[pos])]
                if len(new):
                    diff = q[:, None, :] - points[new][None, :, :]
                    d2_new = (diff * diff).sum(-1)
                    d2_new[members[:, None] == new[None, :]] = np.inf
                    cand_parts.append(new)
                    d2_parts.append(d2_new)
                    n_cand += len(new)
            done = r >= max_ring
            if n_cand > kk:
                d2 = np.concatenate(d2_parts, axis=1) if len(d2_parts) > 1 else d2_parts[0]
                kth = np.partition(d2, kk - 1, axis=1)[:, kk - 1]
                # every unvisited point lies at least r cells away from the block
                done = done or bool(np.all(np.sqrt(kth) < r * cell_size * (1.0 - 1e-12)))
            if done:
                break
            lo, r = r + 1, r + 1
        cand = np.concatenate(cand_parts)
        # drop columns no query needs, then put candidates in index order so a
        # stable sort breaks distance ties by index
        keep = np.flatnonzero((d2 <= kth[:, None]).any(axis=0))
        keep = keep[np.argsort(cand[keep])]
        cand, d2 = cand[keep], d2[:, keep]
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        out[members] = cand[nearest]
    return out


@dataclass(frozen=True)
class BilevelGraph:
    coords: np.ndarray  # (n_nodes, 3); the origin node, if any, is last
    n_atoms: int
    ca_of_residue: np.ndarray  # node index of each residue's CA
    atom_residue: np.ndarray  # residue index per node, -1 for the origin
    atom_src: np.ndarray
    atom_dst: np.ndarray
    res_src: np.ndarray
    res_dst: np.ndarray
    origin: int | None

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def res_nodes(self) -> np.ndarray:
        """Node ids taking part in the residue track (CA nodes, then origin)."""
        if self.origin is None:
            return self.ca_of_residue
        return np.append(self.ca_of_residue, self.origin)

    def to_json(self) -> str:
        return json.dumps({
            "coords": self.coords.tolist(),
            "n_atoms": self.n_atoms,
            "origin": self.origin,
            "ca_of_residue": self.ca_of_residue.tolist(),
            "atom_residue": self.atom_residue.tolist(),
            "atom_edges": np.stack([self.atom_src, self.atom_dst], axis=1).tolist(),
            "res_edges": np.stack([self.res_src, self.res_dst], axis=1).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "BilevelGraph":
        d = json.loads(text)
        ae = np.asarray(d["atom_edges"], dtype=np.int64).reshape(-1, 2)
        re = np.asarray(d["res_edges"], dtype=np.int64).reshape(-1, 2)
        return cls(
            np.asarray(d["coords"], dtype=np.float64).reshape(-1, 3), d["n_atoms"],
            np.asarray(d["ca_of_residue"], dtype=np.int64), np.asarray(d["atom_residue"], dtype=np.int64),
            ae[:, 0], ae[:, 1], re[:, 0], re[:, 1], d["origin"],
        )


def _knn_edges(points: np.ndarray, k: int, node_ids: np.ndarray, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    nb = knn(points, k, cell_size)
    dst = np.repeat(node_ids, nb.shape[1])
    src = node_ids[nb.reshape(-1)]
    return src, dst


def build_bilevel_graph(chain: ProteinChain, k_atom: int = 30, k_res: int = 30, use_origin: bool = True) -> BilevelGraph:
    """Directed neighbour->center KNN edges for both tracks plus origin edges.

    The origin sits at the mean of all atom coordinates and is connected in
    both directions to every atom (atom track) and every CA (residue track).
    """
    if chain.n_atoms == 0:
        raise GraphError("cannot build a graph from a chain with zero atoms")
    if k_atom < 1 or k_res < 1:
        raise GraphError("k_atom and k_res must be >= 1")
    atom_xyz = np.asarray(chain.coords, dtype=np.float64)
    n = chain.n_atoms
    ca = chain.ca_indices
    if len(ca) >= 2:
        cell = float(np.median(np.linalg.norm(np.diff(atom_xyz[ca], axis=0), axis=1)))
    else:
        cell = 3.8
    if not cell > 0:
        cell = 3.8
    atom_src, atom_dst = _knn_edges(atom_xyz, k_atom, np.arange(n), cell)
    res_src, res_dst = _knn_edges(atom_xyz[ca], k_res, ca, cell)
    residue_of = chain.atom_residue_index
    if use_origin:
        origin = n
        coords = np.vstack([atom_xyz, atom_xyz.mean(axis=0)])
        everyone = np.arange(n)
        o_all = np.full(n, origin)
        atom_src = np.concatenate([atom_src, o_all, everyone])
        atom_dst = np.concatenate([atom_dst, everyone, o_all])
        o_ca = np.full(len(ca), origin)
        res_src = np.concatenate([res_src, o_ca, ca])
        res_dst = np.concatenate([res_dst, ca, o_ca])
        residue_of = np.append(residue_of, -1)
    else:
        origin = None
        coords = atom_xyz.copy()
    return BilevelGraph(coords, n, ca.copy(), residue_of, atom_src, atom_dst, res_src, res_dst, origin)
