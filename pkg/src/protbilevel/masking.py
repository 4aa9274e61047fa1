"""Span masking of residues (SMPC) and span-wise coordinate noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .structures import AminoAcidType, BACKBONE_ATOMS, ProteinChain, Residue

Span = tuple[int, int]  # half-open residue range [start, stop)

MASK_MODES = ("smpc", "sidechain", "random")


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    mask_fraction: float = 0.30
    span_lambda: float = 6.0
    noise_fraction: float = 0.30
    noise_span_lambda: float = 6.0
    noise_sigma: float = 0.5
    seed: int = 0
    mode: str = "smpc"

    def __post_init__(self):
        for name in ("mask_fraction", "noise_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise MaskingError(f"{name} must lie in [0, 1]")
        if self.span_lambda <= 0 or self.noise_span_lambda <= 0:
            raise MaskingError("span lambdas must be positive")
        if self.noise_sigma < 0:
            raise MaskingError("noise_sigma must be non-negative")
        if self.mode not in MASK_MODES:
            raise MaskingError(f"mode must be one of {MASK_MODES}")


@dataclass(frozen=True)
class SmpcRecord:
    """Ground truth removed by masking: residue indices and their true types."""

    residue_indices: np.ndarray
    amino_acids: np.ndarray


@dataclass(frozen=True)
class NoiseRecord:
    """Per-noised-atom displacement; indices refer to the noised chain's atoms."""

    atom_indices: np.ndarray
    displacements: np.ndarray
    real_coords: np.ndarray
    noisy_coords: np.ndarray


@dataclass
class MaskPlan:
    smpc_spans: list[Span] = field(default_factory=list)
    noise_spans: list[Span] = field(default_factory=list)
    noise: NoiseRecord | None = None
    mode: str = "smpc"

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "smpc_spans": [list(s) for s in self.smpc_spans],
            "noise_spans": [list(s) for s in self.noise_spans],
        }
        if self.noise is not None:
            payload["noised_atoms"] = self.noise.atom_indices.tolist()
            payload["noise_displacements"] = self.noise.displacements.tolist()
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        data = json.loads(text)
        noise = None
        if "noised_atoms" in data:
            disp = np.asarray(data["noise_displacements"], dtype=np.float64).reshape(-1, 3)
            idx = np.asarray(data["noised_atoms"], dtype=np.int64)
            noise = NoiseRecord(idx, disp, np.zeros_like(disp), np.zeros_like(disp))
        return cls(
            [tuple(s) for s in data["smpc_spans"]],
            [tuple(s) for s in data["noise_spans"]],
            noise,
            data.get("mode", "smpc"),
        )


def _free_runs(occupied: np.ndarray) -> list[Span]:
    runs = []
    start = None
    for i, taken in enumerate(occupied):
        if not taken and start is None:
            start = i
        elif taken and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(occupied)))
    return runs


def sample_spans(n_residues: int, target_fraction: float, lam: float, rng: np.random.Generator) -> list[Span]:
    """Disjoint spans with Poisson(lam) lengths covering exactly floor(fraction * n) residues.

    Zero-length draws are redrawn; the last span is truncated to hit the target.
    If no free gap fits a drawn length, the length shrinks to the widest gap.
    """
    if n_residues < 1:
        raise MaskingError("n_residues must be >= 1")
    target = int(math.floor(target_fraction * n_residues + 1e-9))
    occupied = np.zeros(n_residues, dtype=bool)
    spans: list[Span] = []
    total = 0
    while total < target:
        length = 0
        while length < 1:
            length = int(rng.poisson(lam))
        length = min(length, target - total)
        runs = _free_runs(occupied)
        widest = max(b - a for a, b in runs)
        length = min(length, widest)
        starts = np.concatenate([np.arange(a, b - length + 1) for a, b in runs if b - a >= length])
        start = int(starts[rng.integers(len(starts))])
        occupied[start : start + length] = True
        spans.append((start, start + length))
        total += length
    return spans


def sample_random_residues(n_residues: int, fraction: float, rng: np.random.Generator) -> list[Span]:
    """Per-residue Bernoulli selection returned as singleton spans."""
    picked = np.flatnonzero(rng.random(n_residues) < fraction)
    return [(int(i), int(i) + 1) for i in picked]


def span_residues(spans: list[Span]) -> np.ndarray:
    if not spans:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate([np.arange(a, b) for a, b in spans]))


def _rebuild(chain: ProteinChain, keep: list[list[int]], new_types: dict[int, AminoAcidType]) -> ProteinChain:
    atoms = []
    residues = []
    for ri, res in enumerate(chain.residues):
        indices = []
        ca_index = -1
        for ai in keep[ri]:
            idx = len(atoms)
            atoms.append(chain.atoms[ai])
            indices.append(idx)
            if ai == res.ca_index:
                ca_index = idx
        residues.append(
            Residue(new_types.get(ri, res.amino_acid), res.seq_position, tuple(indices), ca_index, res.insertion_code)
        )
    return ProteinChain(chain.chain_id, tuple(residues), tuple(atoms), dict(chain.metadata))


def apply_smpc(chain: ProteinChain, spans: list[Span], mode: str = "smpc") -> tuple[ProteinChain, SmpcRecord]:
    """Mask residue types in ``spans`` and delete their atoms.

    ``smpc`` keeps only the alpha carbon; ``sidechain`` keeps N, CA, C, O. The
    ``random`` mode masks like ``smpc`` and differs only in how spans are drawn.
    """
    masked = span_residues(spans)
    if len(masked) and (masked.min() < 0 or masked.max() >= chain.n_residues):
        raise MaskingError("span outside chain bounds")
    if not len(masked):
        return chain, SmpcRecord(masked, np.zeros(0, dtype=np.int64))
    masked_set = set(masked.tolist())
    keep = []
    for ri, res in enumerate(chain.residues):
        if ri not in masked_set:
            keep.append(list(res.atom_indices))
            continue
        if res.ca_index not in res.atom_indices or chain.atoms[res.ca_index].atom_name != "CA":
            raise MaskingError(f"residue {ri} has no alpha carbon to retain")
        if mode == "sidechain":
            keep.append([ai for ai in res.atom_indices if chain.atoms[ai].atom_name in BACKBONE_ATOMS])
        else:
            keep.append([res.ca_index])
    types = np.array([int(chain.residues[i].amino_acid) for i in masked], dtype=np.int64)
    out = _rebuild(chain, keep, {int(i): AminoAcidType.MASK for i in masked})
    return out, SmpcRecord(masked, types)


def apply_noise(
    chain: ProteinChain, spans: list[Span], sigma: float, rng: np.random.Generator
) -> tuple[ProteinChain, NoiseRecord]:
    """Isotropic Gaussian displacement (per-component std ``sigma``) of every atom in ``spans``."""
    if sigma < 0:
        raise MaskingError("sigma must be non-negative")
    residues = span_residues(spans)
    in_span = np.isin(chain.atom_residue_index, residues) if chain.n_atoms else np.zeros(0, dtype=bool)
    idx = np.flatnonzero(in_span)
    disp = rng.normal(0.0, 1.0, size=(len(idx), 3)) * sigma
    coords = np.array(chain.coords)
    real = coords[idx].copy()
    coords[idx] += disp
    noised = chain.with_coords(coords) if len(idx) else chain
    return noised, NoiseRecord(idx, disp, real, coords[idx].copy())


@dataclass
class MaskedSample:
    chain: ProteinChain
    plan: MaskPlan
    smpc: SmpcRecord


def mask_and_noise(chain: ProteinChain, cfg: MaskConfig, rng: np.random.Generator) -> MaskedSample:
    """Draw spans per ``cfg.mode``, mask, then noise the atoms that remain."""
    n = chain.n_residues
    if cfg.mode == "random":
        smpc_spans = sample_random_residues(n, cfg.mask_fraction, rng)
    else:
        smpc_spans = sample_spans(n, cfg.mask_fraction, cfg.span_lambda, rng)
    noise_spans = sample_spans(n, cfg.noise_fraction, cfg.noise_span_lambda, rng)
    masked, record = apply_smpc(chain, smpc_spans, mode="sidechain" if cfg.mode == "sidechain" else "smpc")
    noised, noise = apply_noise(masked, noise_spans, cfg.noise_sigma, rng)
    return MaskedSample(noised, MaskPlan(smpc_spans, noise_spans, noise, cfg.mode), record)

