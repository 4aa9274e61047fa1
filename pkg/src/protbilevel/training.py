"""Optimisation: Adam with warmup, the pre-training loop, node-class fine-tuning, AUC."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .encodings import Features, featurize, load_external_embeddings
from .geometry import compute_torsions, shrake_rupley
from .graph import build_bilevel_graph
from .masking import MaskConfig, apply_noise, mask_and_noise
from .model import VabsNet, VabsNetConfig, node_class_head, residue_type_head, sasa_head, torsion_head
from .objectives import (
    COMPONENTS,
    EmptyTargetWarning,
    LossWeights,
    PretrainTargets,
    distance_loss,
    node_class_loss,
    position_loss,
    residue_type_loss,
    sasa_loss,
    torsion_loss,
    total_pretrain_loss,
)
from .structures import N_STANDARD, ProteinChain, center_and_rotate, load_chain

MIN_RESIDUES = 4


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    warmup_steps: int = 5000
    total_steps: int = 10000
    batch_size: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    finetune_noise_fraction: float = 0.2
    finetune_noise_sigma: float = 0.5
    checkpoint_every: int = 0  # 0: only the final checkpoint
    threads: int = 1

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``learning_rate`` over ``warmup_steps``, constant after."""
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.learning_rate
    return cfg.learning_rate * max(step, 0) / cfg.warmup_steps


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.asarray((1 - beta1) * g), np.asarray((1 - beta2) * g * g)
            state.m[name], state.v[name] = m, v
        else:  # moments are owned by the state, so update them in place
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
        denom = np.sqrt(v / c2) + eps
        p.data = p.data - lr * (m / c1) / denom


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --- datasets ------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainRecord:
    """A clean chain with labels derived once: SASA per atom and torsions per residue."""

    name: str
    chain: ProteinChain  # atoms carry sasa_label
    torsion_angles: np.ndarray
    torsion_valid: np.ndarray
    esm: np.ndarray | None = None


def prepare_record(chain: ProteinChain, name: str = "", esm: np.ndarray | None = None) -> ChainRecord:
    if any(a.sasa_label is None for a in chain.atoms):
        chain = chain.with_sasa(shrake_rupley(chain).per_atom)
    tors = compute_torsions(chain)
    angles = np.array([t.angles for t in tors]).reshape(-1, 7)
    valid = np.array([t.valid for t in tors]).reshape(-1, 7)
    return ChainRecord(name or chain.chain_id, chain, angles, valid, esm)


def load_dataset(
    data: str | Path | Sequence[ProteinChain | ChainRecord], esm_dir: str | Path | None = None
) -> tuple[list[ChainRecord], int]:
    """Chain records plus the number of chains skipped for having fewer than 4 residues."""
    records: list[ChainRecord] = []
    if isinstance(data, (str, Path)):
        files = sorted(Path(data).glob("*.json"))
        if not files:
            raise TrainingError(f"no chain files in {data}")
        items = []
        for f in files:
            esm = None
            if esm_dir is not None and (Path(esm_dir) / f.name).exists():
                esm = load_external_embeddings(Path(esm_dir) / f.name)
            items.append((f.stem, load_chain(f), esm))
    else:
        items = [(getattr(c, "name", ""), c, getattr(c, "esm", None)) for c in data]
    if not items:
        raise TrainingError("empty dataset")
    skipped = 0
    for name, item, esm in items:
        chain = item.chain if isinstance(item, ChainRecord) else item
        if chain.n_residues < MIN_RESIDUES:
            skipped += 1
            continue
        records.append(item if isinstance(item, ChainRecord) else prepare_record(chain, name, esm))
    if not records:
        raise TrainingError(f"all {skipped} chains are shorter than {MIN_RESIDUES} residues")
    return records, skipped


# --- pre-training ------------------------------------------------------------------------


@dataclass
class PretrainSample:
    features: Features
    targets: PretrainTargets


def make_pretrain_sample(
    record: ChainRecord, model_cfg: VabsNetConfig, mask_cfg: MaskConfig, rng: np.random.Generator,
    rotate: bool = True,
) -> PretrainSample:
    """Rotate and center, mask and noise, build the graph and features, collect targets."""
    chain = center_and_rotate(record.chain, seed=rng) if rotate else record.chain
    masked = mask_and_noise(chain, mask_cfg, rng)
    mc = masked.chain
    graph = build_bilevel_graph(mc, model_cfg.k_atom, model_cfg.k_res, model_cfg.use_virtual_origin)
    esm = record.esm if model_cfg.use_external_embeddings else None
    feats = featurize(graph, mc, esm, model_cfg.feature_config())
    res_idx = masked.smpc.residue_indices
    rows = np.array([mc.residues[i].ca_index for i in res_idx], dtype=np.int64)
    noise = masked.plan.noise
    targets = PretrainTargets(
        masked_rows=rows,
        masked_types=masked.smpc.amino_acids,
        torsion_angles=record.torsion_angles[res_idx],
        torsion_valid=record.torsion_valid[res_idx],
        noised_rows=noise.atom_indices,
        real_coords=noise.real_coords,
        noisy_coords=noise.noisy_coords,
        sasa_rows=np.arange(mc.n_atoms),
        sasa=np.array([a.sasa_label for a in mc.atoms], dtype=np.float64),
    )
    return PretrainSample(feats, targets)


def pretrain_losses(model: VabsNet, sample: PretrainSample, weights: LossWeights = LossWeights()):
    """Forward pass and every pre-training loss; returns (total, report, restype logits)."""
    f, t = sample.features, sample.targets
    out = model.forward(f)
    standard = t.masked_types < N_STANDARD
    logits = residue_type_head(out.nodes, t.masked_rows[standard], model.params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTargetWarning)
        comps = {
            "res_type": residue_type_loss(logits, t.masked_types[standard]),
            "torsion": torsion_loss(torsion_head(out.nodes, t.masked_rows, model.params),
                                    t.torsion_angles, t.torsion_valid),
            "sasa": sasa_loss(sasa_head(out.nodes, t.sasa_rows, model.params), t.sasa),
        }
        if len(t.noised_rows):
            moved = ad.gather(model.movement(out, f), t.noised_rows)
            comps["pos"] = position_loss(moved, t.real_coords)
            comps["dist"] = distance_loss(moved, t.real_coords)
        else:
            comps["pos"] = position_loss(ad.Tensor(np.zeros((0, 3))), t.real_coords)
            comps["dist"] = distance_loss(ad.Tensor(np.zeros((0, 3))), t.real_coords)
    total, report = total_pretrain_loss(comps, weights)
    return total, report, (logits, t.masked_types[standard])


def _sample_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, slot])


def _epoch_order(seed: int, n: int, index: int) -> int:
    epoch, pos = divmod(index, n)
    return int(np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)[pos])


def _accumulate_step(model, samples, loss_fn, cfg: TrainConfig):
    """Backward over each sample, average gradients, clip, return (grads, mean report)."""
    for p in model.params.values():
        p.grad = None
    reports = []
    for sample in samples:
        with ad.Tape() as tape:
            total, report, *_ = loss_fn(model, sample)
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss: {report}")
        tape.backward(total)
        reports.append(report)
    grads = {k: p.grad / len(samples) for k, p in model.params.items() if p.grad is not None}
    clip_global_norm(grads, cfg.grad_clip)
    mean_report = {k: float(np.mean([r[k] for r in reports])) for k in reports[0]}
    return grads, mean_report


@dataclass
class TrainResult:
    model: VabsNet
    log: list[dict]
    skipped: int = 0


def _write_log_line(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def pretrain(
    data,
    model_cfg: VabsNetConfig,
    train_cfg: TrainConfig,
    mask_cfg: MaskConfig = MaskConfig(),
    out_dir: str | Path | None = None,
    model: VabsNet | None = None,
    esm_dir: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``train_cfg.total_steps`` Adam steps of the pre-training objective.

    Every sample gets its own generator seeded by (seed, step, slot), so runs
    are reproducible regardless of thread count. With ``out_dir`` set, the loss
    log goes to ``losses.jsonl`` and checkpoints to ``checkpoint/`` (plus
    ``step_<n>/`` every ``checkpoint_every`` steps).
    """
    records, skipped = load_dataset(data, esm_dir)
    model = model or VabsNet(model_cfg, seed=train_cfg.seed)
    state = OptimizerState()
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "losses.jsonl", "w")
    log = []
    pool = ThreadPoolExecutor(train_cfg.threads) if train_cfg.threads > 1 else None

    def prepare(step: int, slot: int) -> PretrainSample:
        rec = records[_epoch_order(train_cfg.seed, len(records), step * train_cfg.batch_size + slot)]
        return make_pretrain_sample(rec, model_cfg, mask_cfg, _sample_rng(train_cfg.seed, step, slot))

    try:
        for step in range(train_cfg.total_steps):
            slots = range(train_cfg.batch_size)
            if pool is not None:
                samples = list(pool.map(lambda s: prepare(step, s), slots))
            else:
                samples = [prepare(step, s) for s in slots]
            grads, report = _accumulate_step(
                model, samples, lambda m, s: pretrain_losses(m, s, train_cfg.loss_weights), train_cfg
            )
            lr = lr_schedule(step + 1, train_cfg)
            adam_step(model.params, grads, state, lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
            entry = {"step": step, **{k: report[k] for k in ("total",) + COMPONENTS}}
            log.append(entry)
            _write_log_line(fh, entry)
            if callback is not None:
                callback(step, entry)
            every = train_cfg.checkpoint_every
            if out is not None and every and (step + 1) % every == 0 and step + 1 < train_cfg.total_steps:
                model.save(out / f"step_{step + 1}")
    finally:
        if fh is not None:
            fh.close()
        if pool is not None:
            pool.shutdown()
    if out is not None:
        model.save(out / "checkpoint")
    return TrainResult(model, log, skipped)


def masked_accuracy(
    model: VabsNet, data, mask_cfg: MaskConfig = MaskConfig(), seed: int = 0, rounds: int = 1
) -> float:
    """Fraction of SMPC-masked standard residues whose type is predicted correctly."""
    records, _ = load_dataset(data)
    hits = total = 0
    for r in range(rounds):
        for i, rec in enumerate(records):
            sample = make_pretrain_sample(rec, model.cfg, mask_cfg, np.random.default_rng([seed, 7, r, i]))
            out = model.forward(sample.features)
            t = sample.targets
            keep = t.masked_types < N_STANDARD
            logits = residue_type_head(out.nodes, t.masked_rows[keep], model.params).data
            hits += int((logits.argmax(axis=1) == t.masked_types[keep]).sum())
            total += int(keep.sum())
    return hits / total if total else float("nan")


# --- node-class fine-tuning -----------------------------------------------------------------


@dataclass
class NodeClassSample:
    features: Features
    rows: np.ndarray
    labels: np.ndarray


def node_labels(chain: ProteinChain, level: str) -> tuple[np.ndarray, np.ndarray]:
    """Node rows and binary labels at atom level, or at residue level via each CA's label."""
    if any(a.label is None for a in chain.atoms):
        raise TrainingError("every atom needs a binary label for node-class fine-tuning")
    labels = np.array([a.label for a in chain.atoms], dtype=np.float64)
    if level == "atom":
        return np.arange(chain.n_atoms), labels
    if level == "residue":
        return chain.ca_indices.copy(), labels[chain.ca_indices]
    raise ValueError("level must be 'atom' or 'residue'")


def make_node_class_sample(
    record: ChainRecord, model_cfg: VabsNetConfig, rng: np.random.Generator | None, cfg: TrainConfig, level: str
) -> NodeClassSample:
    """Optionally noise a random 20% of residues, then featurize (no rotation, no masking)."""
    chain = record.chain
    if rng is not None and cfg.finetune_noise_fraction > 0:
        count = int(math.floor(cfg.finetune_noise_fraction * chain.n_residues + 1e-9))
        picked = np.sort(rng.choice(chain.n_residues, size=count, replace=False))
        chain, _ = apply_noise(chain, [(int(i), int(i) + 1) for i in picked], cfg.finetune_noise_sigma, rng)
    graph = build_bilevel_graph(chain, model_cfg.k_atom, model_cfg.k_res, model_cfg.use_virtual_origin)
    esm = record.esm if model_cfg.use_external_embeddings else None
    feats = featurize(graph, chain, esm, model_cfg.feature_config())
    rows, labels = node_labels(chain, level)
    return NodeClassSample(feats, rows, labels)


def node_class_scores(model: VabsNet, sample: NodeClassSample) -> np.ndarray:
    out = model.forward(sample.features)
    return node_class_head(out.nodes, sample.rows, model.params).data


def evaluate_auc(model: VabsNet, records: Sequence[ChainRecord], level: str = "atom") -> float:
    scores, labels = [], []
    for rec in records:
        s = make_node_class_sample(rec, model.cfg, None, TrainConfig(finetune_noise_fraction=0.0), level)
        scores.append(node_class_scores(model, s))
        labels.append(s.labels)
    return auc(np.concatenate(scores), np.concatenate(labels))


def finetune_node_class(
    data,
    model: VabsNet,
    train_cfg: TrainConfig,
    level: str = "atom",
    out_dir: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Optimise BCE on per-node labels with per-step noise augmentation; logs loss and final AUC."""
    records, skipped = load_dataset(data)
    state = OptimizerState()
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "w")
    log = []

    def loss_fn(m, sample: NodeClassSample):
        logits = node_class_head(m.forward(sample.features).nodes, sample.rows, m.params)
        loss = node_class_loss(logits, sample.labels)
        return loss, {"loss": float(loss.data)}

    try:
        for step in range(train_cfg.total_steps):
            samples = []
            for slot in range(train_cfg.batch_size):
                rng = _sample_rng(train_cfg.seed, step, slot)
                rec = records[_epoch_order(train_cfg.seed, len(records), step * train_cfg.batch_size + slot)]
                samples.append(make_node_class_sample(rec, model.cfg, rng, train_cfg, level))
            grads, report = _accumulate_step(model, samples, loss_fn, train_cfg)
            adam_step(model.params, grads, state, lr_schedule(step + 1, train_cfg),
                      train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
            entry = {"step": step, "loss": report["loss"]}
            log.append(entry)
            _write_log_line(fh, entry)
            if callback is not None:
                callback(step, entry)
        final = {"step": train_cfg.total_steps, "auc": evaluate_auc(model, records, level)}
        log.append(final)
        _write_log_line(fh, final)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        model.save(out / "checkpoint")
    return TrainResult(model, log, skipped)


def halfspace_labels(chain: ProteinChain, normal=(1.0, 0.0, 0.0)) -> ProteinChain:
    """Label atoms 1 on the positive side of the plane through the centroid with ``normal``."""
    coords = chain.coords
    side = (coords - coords.mean(axis=0)) @ np.asarray(normal, dtype=np.float64)
    return chain.with_labels((side > 0).astype(int))


def with_train_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
