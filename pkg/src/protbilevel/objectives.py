"""Pre-training losses (residue type, torsion, position, distance, SASA) and the node-class loss."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TORSION_NORM_WEIGHT = 0.02
COMPONENTS = ("res_type", "torsion", "pos", "dist", "sasa")


class EmptyTargetWarning(UserWarning):
    pass


def _zero(reason: str) -> Tensor:
    warnings.warn(reason, EmptyTargetWarning, stacklevel=3)
    return Tensor(0.0)


@dataclass(frozen=True)
class PretrainTargets:
    masked_rows: np.ndarray  # node ids of SMPC-masked CAs
    masked_types: np.ndarray  # true amino acid per masked residue
    torsion_angles: np.ndarray  # (n_masked, 7)
    torsion_valid: np.ndarray  # (n_masked, 7) bool
    noised_rows: np.ndarray  # node ids in the noise set
    real_coords: np.ndarray  # (n_noised, 3) clean positions
    noisy_coords: np.ndarray
    sasa_rows: np.ndarray  # node ids of retained atoms
    sasa: np.ndarray  # clean-structure SASA per retained atom


def residue_type_loss(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        return _zero("no masked residues; residue type loss set to 0")
    return ad.cross_entropy_with_logits(logits, targets)


def torsion_loss(raw: Tensor, angles, valid, norm_weight: float = TORSION_NORM_WEIGHT) -> Tensor:
    """Unit-normalised L1 against (sin, cos) plus a small penalty on the raw norm.

    ``raw`` has shape ``(n, 7, 2)`` holding (sin, cos) predictions.
    """
    angles = np.asarray(angles, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return _zero("no valid torsion angles; torsion loss set to 0")
    if raw.shape != angles.shape + (2,):
        raise ad.ShapeError(f"torsion_loss: predictions {raw.shape} vs angles {angles.shape}")
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(raw), axis=2, keepdims=True), 1e-12))
    unit = ad.div(raw, norm)
    truth = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    l1 = ad.sum_(ad.abs_(ad.sub(unit, truth)), axis=2)
    penalty = ad.abs_(ad.sub(ad.reshape(norm, angles.shape), 1.0))
    per_angle = ad.add(l1, ad.mul(penalty, norm_weight))
    return ad.mul(ad.sum_(ad.mul(per_angle, valid.astype(np.float64))), 1.0 / count)


def position_loss(pred: Tensor, real) -> Tensor:
    """Mean Euclidean distance between predicted and true positions."""
    real = np.asarray(real, dtype=np.float64)
    if len(real) == 0:
        return _zero("empty noise set; position loss set to 0")
    return ad.mean(ad.l2_norm(ad.sub(pred, real), axis=1))


def distance_loss(pred: Tensor, real) -> Tensor:
    """``(1/n^2) sum_ij | |p_i - p_j| - |r_i - r_j| |`` over all ordered pairs (diagonal included)."""
    real = np.asarray(real, dtype=np.float64)
    n = len(real)
    if n == 0:
        return _zero("empty noise set; distance loss set to 0")
    d_real = np.linalg.norm(real[:, None, :] - real[None, :, :], axis=-1)
    diff = ad.sub(ad.reshape(pred, (n, 1, 3)), ad.reshape(pred, (1, n, 3)))
    d_pred = ad.l2_norm(diff, axis=2)
    return ad.mul(ad.sum_(ad.abs_(ad.sub(d_pred, d_real))), 1.0 / (n * n))


def sasa_loss(pred: Tensor, labels) -> Tensor:
    return ad.l1_loss(pred, np.asarray(labels, dtype=np.float64))


def node_class_loss(logits: Tensor, labels, mask=None) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if mask is not None:
        keep = np.flatnonzero(np.asarray(mask, dtype=bool))
        if len(keep) == 0:
            return _zero("node-class mask selects nothing; loss set to 0")
        logits = ad.gather(logits, keep)
        labels = labels[keep]
    return ad.bce_with_logits(logits, labels)


@dataclass(frozen=True)
class LossWeights:
    res_type: float = 1.0
    torsion: float = 1.0
    pos: float = 1.0
    dist: float = 1.0
    sasa: float = 1.0

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        return cls(*[float(v) for v in values])

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def total_pretrain_loss(components: dict[str, Tensor], weights: LossWeights = LossWeights()):
    """Weighted sum of the components plus a report of each unweighted value."""
    w = weights.as_dict()
    missing = set(COMPONENTS) - set(components)
    if missing:
        raise KeyError(f"missing loss components: {sorted(missing)}")
    total = Tensor(0.0)
    for name in COMPONENTS:
        if w[name] != 0.0:
            total = ad.add(total, ad.mul(components[name], w[name]))
    report = {name: float(components[name].data) for name in COMPONENTS}
    report["total"] = float(total.data)
    return total, report
