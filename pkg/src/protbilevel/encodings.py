"""Input featurisation: node tokens, Gaussian distance kernels, dual-frame directions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import local_frames
from .graph import BilevelGraph
from .structures import ATOM_NAME_INDEX, ATOM_NAMES, AminoAcidType, ProteinChain

UNK_ATOM = len(ATOM_NAMES)
ORIGIN_ATOM = UNK_ATOM + 1
N_ATOM_TYPES = ORIGIN_ATOM + 1
ORIGIN_RESIDUE = len(AminoAcidType)
N_RESIDUE_TYPES = ORIGIN_RESIDUE + 1
N_PAIR_TYPES = N_ATOM_TYPES * N_ATOM_TYPES


class FeaturizationError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianKernelParams:
    n_kernels: int = 16
    width: float = 16.0

    def __post_init__(self):
        if self.n_kernels < 1 or self.width <= 0:
            raise ValueError("need n_kernels >= 1 and width > 0")

    @property
    def mu(self) -> np.ndarray:
        return self.width * np.arange(self.n_kernels) / self.n_kernels

    @property
    def sigma(self) -> float:
        return self.width / self.n_kernels


def gaussian_kernel_encode(distance, alpha=1.0, beta=0.0, params: GaussianKernelParams = GaussianKernelParams()):
    """Normal densities of ``alpha * d + beta`` under each kernel; shape ``(..., K)``."""
    z = np.asarray(alpha * np.asarray(distance, dtype=np.float64) + beta)[..., None]
    s = params.sigma
    return np.exp(-0.5 * ((z - params.mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))


def fourier_encode(theta, n_frequencies: int) -> np.ndarray:
    """``[sin(2^0 t), cos(2^0 t), ..., sin(2^(L-1) t), cos(2^(L-1) t)]`` along a new last axis."""
    if n_frequencies < 1:
        raise ValueError("n_frequencies must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty(theta.shape + (2 * n_frequencies,))
    s, c = np.sin(theta), np.cos(theta)
    for lvl in range(n_frequencies):
        if lvl:  # double-angle step
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
        out[..., 2 * lvl] = s
        out[..., 2 * lvl + 1] = c
    return out


def plane_angles(v: np.ndarray) -> np.ndarray:
    """Angles of unit vectors against the xy, yz and xz planes (in that order)."""
    return np.arcsin(np.clip(v[..., [2, 0, 1]], -1.0, 1.0))


ORIGIN = None  # sentinel accepted by relative_position_bucket
ORIGIN_BUCKET = 65


def relative_position_bucket(seq_i, seq_j, max_offset: int = 32):
    """Clip ``seq_i - seq_j`` to +-max_offset and shift to ``0..2*max_offset``.

    ``None`` (or a negative array entry) on either side marks the origin node
    and maps to the dedicated bucket ``2 * max_offset + 1``.
    """
    if seq_i is None or seq_j is None:
        return 2 * max_offset + 1
    si = np.asarray(seq_i)
    sj = np.asarray(seq_j)
    bucket = np.clip(si - sj, -max_offset, max_offset) + max_offset
    out = np.where((si < 0) | (sj < 0), 2 * max_offset + 1, bucket)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


@dataclass(frozen=True)
class FeatureConfig:
    n_kernels: int = 16
    kernel_width: float = 16.0
    n_frequencies: int = 4
    max_seq_offset: int = 32
    use_global_frame: bool = True

    @property
    def kernels(self) -> GaussianKernelParams:
        return GaussianKernelParams(self.n_kernels, self.kernel_width)

    @property
    def direction_dim(self) -> int:
        return 12 * self.n_frequencies

    @property
    def n_seq_buckets(self) -> int:
        return 2 * self.max_seq_offset + 2


@dataclass(frozen=True)
class EdgeSet:
    src: np.ndarray  # node ids
    dst: np.ndarray
    local_src: np.ndarray  # row in the track's node list
    local_dst: np.ndarray
    distance: np.ndarray
    pair_type: np.ndarray
    direction: np.ndarray  # (E, 12L)
    seq_bucket: np.ndarray
    dist_kernels: np.ndarray  # at alpha=1, beta=0

    def __len__(self) -> int:
        return len(self.src)


@dataclass(frozen=True)
class Features:
    atom_type: np.ndarray  # (n_nodes,)
    residue_type: np.ndarray
    external: np.ndarray | None  # (n_nodes, D) or None for all-zero
    atom_edges: EdgeSet
    res_edges: EdgeSet
    res_nodes: np.ndarray  # node ids of the residue track
    coords: np.ndarray
    has_origin: bool
    config: FeatureConfig

    @property
    def n_nodes(self) -> int:
        return len(self.atom_type)

    def external_embedding(self, dim: int) -> np.ndarray:
        if self.external is None:
            return np.zeros((self.n_nodes, dim))
        return self.external


def load_external_embeddings(path: str | Path) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    emb = np.asarray(data["residue_embeddings"], dtype=np.float64)
    dim = int(data["dim"])
    if emb.ndim != 2 or emb.shape[1] != dim:
        raise FeaturizationError(f"embedding rows must have length {dim}")
    return emb


def save_external_embeddings(embeddings: np.ndarray, path: str | Path) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    Path(path).write_text(json.dumps({"dim": embeddings.shape[1], "residue_embeddings": embeddings.tolist()}))


def residue_frames(chain: ProteinChain) -> tuple[np.ndarray, np.ndarray]:
    """Per-residue rotation matrices; residues lacking N or C get identity and ``False``."""
    nres = chain.n_residues
    r_n = np.full((nres, 3), np.nan)
    r_c = np.full((nres, 3), np.nan)
    coords = chain.coords
    r_ca = coords[chain.ca_indices]
    for i in range(nres):
        lookup = chain.atom_lookup(i)
        if "N" in lookup and "C" in lookup:
            r_n[i] = coords[lookup["N"]]
            r_c[i] = coords[lookup["C"]]
    present = ~np.isnan(r_n).any(axis=1)
    rot = np.repeat(np.eye(3)[None], nres, axis=0)
    valid = np.zeros(nres, dtype=bool)
    if present.any():
        rot[present], valid[present] = local_frames(r_n[present], r_ca[present], r_c[present])
    return rot, valid


def edge_direction_features(
    src: np.ndarray,
    dst: np.ndarray,
    coords: np.ndarray,
    frames: np.ndarray,
    n_frequencies: int,
    frame_valid: np.ndarray | None = None,
    use_global_frame: bool = True,
) -> np.ndarray:
    """Fourier-encoded plane angles of each edge in the global and destination frames.

    ``frames`` holds one rotation per edge (the destination residue's frame).
    Edges with an invalid frame use identity, so their local block repeats the
    global one; both blocks are zeroed when the global frame is disabled.
    """
    vec = coords[dst] - coords[src]
    norm = np.linalg.norm(vec, axis=1)
    if np.any(norm < 1e-12):
        bad = int(np.flatnonzero(norm < 1e-12)[0])
        raise FeaturizationError(f"zero-length edge {int(src[bad])}->{int(dst[bad])}")
    v_g = vec / norm[:, None]
    v_l = np.einsum("eji,ej->ei", frames, v_g)  # R^T v_g
    enc_g = fourier_encode(plane_angles(v_g), n_frequencies).reshape(len(src), -1)
    enc_l = fourier_encode(plane_angles(v_l), n_frequencies).reshape(len(src), -1)
    if not use_global_frame:
        enc_g = np.zeros_like(enc_g)
        if frame_valid is not None:
            enc_l = np.where(frame_valid[:, None], enc_l, 0.0)
    return np.concatenate([enc_g, enc_l], axis=1)


def _edge_set(graph, src, dst, node_ids, node_residue, atom_type, seq_index, frames, frame_valid, cfg) -> EdgeSet:
    local = np.full(graph.n_nodes, -1, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    distance = np.linalg.norm(graph.coords[dst] - graph.coords[src], axis=1)
    dst_res = node_residue[dst]
    edge_frames = np.where((dst_res >= 0)[:, None, None], frames[np.maximum(dst_res, 0)], np.eye(3))
    edge_valid = np.where(dst_res >= 0, frame_valid[np.maximum(dst_res, 0)], False)
    direction = edge_direction_features(
        src, dst, graph.coords, edge_frames, cfg.n_frequencies, edge_valid, cfg.use_global_frame
    )
    seq_i = np.where(dst_res >= 0, seq_index[np.maximum(dst_res, 0)], -1)
    src_res = node_residue[src]
    seq_j = np.where(src_res >= 0, seq_index[np.maximum(src_res, 0)], -1)
    return EdgeSet(
        src=src, dst=dst, local_src=local[src], local_dst=local[dst], distance=distance,
        pair_type=atom_type[dst] * N_ATOM_TYPES + atom_type[src],
        direction=direction,
        seq_bucket=relative_position_bucket(seq_i, seq_j, cfg.max_seq_offset),
        dist_kernels=gaussian_kernel_encode(distance, 1.0, 0.0, cfg.kernels),
    )


def featurize(
    graph: BilevelGraph, chain: ProteinChain, esm: np.ndarray | None = None, cfg: FeatureConfig = FeatureConfig()
) -> Features:
    """Node tokens and per-edge features for both tracks of ``graph``."""
    if graph.n_atoms != chain.n_atoms:
        raise FeaturizationError("graph and chain disagree on atom count")
    atom_type = np.array([ATOM_NAME_INDEX.get(a.atom_name, UNK_ATOM) for a in chain.atoms], dtype=np.int64)
    residue_type = np.array([int(chain.residues[a.residue_index].amino_acid) for a in chain.atoms], dtype=np.int64)
    external = None
    if esm is not None:
        esm = np.asarray(esm, dtype=np.float64)
        if esm.ndim != 2 or len(esm) != chain.n_residues:
            raise FeaturizationError(
                f"external embedding count {len(esm)} != residue count {chain.n_residues}"
            )
        external = esm[chain.atom_residue_index]
    if graph.origin is not None:
        atom_type = np.append(atom_type, ORIGIN_ATOM)
        residue_type = np.append(residue_type, ORIGIN_RESIDUE)
        if external is not None:
            external = np.vstack([external, np.zeros((1, external.shape[1]))])
    frames, frame_valid = residue_frames(chain)
    seq_index = np.arange(chain.n_residues)
    node_residue = graph.atom_residue
    common = (node_residue, atom_type, seq_index, frames, frame_valid, cfg)
    atom_edges = _edge_set(graph, graph.atom_src, graph.atom_dst, np.arange(graph.n_nodes), *common)
    res_edges = _edge_set(graph, graph.res_src, graph.res_dst, graph.res_nodes, *common)
    return Features(
        atom_type, residue_type, external, atom_edges, res_edges, graph.res_nodes,
        graph.coords, graph.origin is not None, cfg,
    )
