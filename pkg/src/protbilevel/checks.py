"""Self-checks behind ``check --suite``: each returns a :class:`CheckResult`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encodings import featurize
from .geometry import local_frames, shrake_rupley
from .graph import build_bilevel_graph, knn
from .masking import MaskConfig, apply_noise, mask_and_noise, sample_spans
from .model import AttentionTrace, VabsNet, VabsNetConfig, init_params
from .structures import AminoAcidType, generate_synthetic_chain, random_rotation
from .training import make_pretrain_sample, prepare_record, pretrain_losses


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        # numpy scalars would break json.dumps downstream
        self.passed = bool(self.passed)
        self.details = {k: v.item() if isinstance(v, np.generic) else v for k, v in self.details.items()}


def small_config(**kw) -> VabsNetConfig:
    base = dict(n_layers=2, node_dim=32, edge_dim=16, ffn_dim=32, n_heads=4, external_dim=8, torsion_hidden=16)
    base.update(kw)
    return VabsNetConfig(**base)


def perturbed_params(cfg: VabsNetConfig, seed: int, scale: float = 0.3) -> dict[str, ad.Tensor]:
    """Initial parameters plus Gaussian noise, so no gradient path starts at exactly zero."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for p in params.values():
        p.data = p.data + scale * rng.normal(size=p.shape) / math.sqrt(max(p.shape[0], 1))
    return params


def gradient_check(n_residues: int = 10, samples_per_param: int = 3, seed: int = 0) -> CheckResult:
    """Full small model plus all five pre-training losses against central differences."""
    cfg = small_config()
    model = VabsNet(cfg, perturbed_params(cfg, seed))
    record = prepare_record(generate_synthetic_chain(n_residues, seed))
    sample = make_pretrain_sample(record, cfg, MaskConfig(), np.random.default_rng(seed))
    worst, per_param = ad.grad_check_params(
        lambda: pretrain_losses(model, sample)[0], model.params, samples_per_param, rng=np.random.default_rng(seed)
    )
    return CheckResult("gradients", worst < 1e-4, {"max_relative_error": worst,
                                                 "worst_parameter": max(per_param, key=per_param.get)})


def frame_check(n: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    ca = rng.normal(size=(n, 3)) * 10
    r_n = ca + rng.normal(size=(n, 3))
    r_c = ca + rng.normal(size=(n, 3))
    rot, valid = local_frames(r_n, ca, r_c)
    ortho = np.abs(np.einsum("nji,njk->nik", rot, rot) - np.eye(3)).max(axis=(1, 2))
    det = np.linalg.det(rot)
    ok = bool(valid.all() and ortho.max() < 1e-6 and np.abs(det - 1).max() < 1e-6)
    return CheckResult("frames", ok, {"max_orthonormality_error": float(ortho.max()),
                                      "max_det_error": float(np.abs(det - 1).max())})


def _forward_nodes(model: VabsNet, chain) -> np.ndarray:
    graph = build_bilevel_graph(chain, model.cfg.k_atom, model.cfg.k_res, model.cfg.use_virtual_origin)
    feats = featurize(graph, chain, None, model.cfg.feature_config())
    return model.forward(feats).nodes.data


def rotation_check(n_motions: int = 20, n_residues: int = 30, seed: int = 0) -> CheckResult:
    """so3-invariant outputs must not move (< 1e-4); default outputs must (> 1e-2 somewhere)."""
    rng = np.random.default_rng(seed)
    chain = generate_synthetic_chain(n_residues, seed)
    base_cfg = small_config()
    inv = VabsNet(base_cfg.with_so3_invariant(), perturbed_params(base_cfg.with_so3_invariant(), seed))
    dflt = VabsNet(base_cfg, perturbed_params(base_cfg, seed))
    ref_inv = _forward_nodes(inv, chain)
    ref_dflt = _forward_nodes(dflt, chain)
    worst_inv = 0.0
    best_dflt = 0.0
    for _ in range(n_motions):
        moved = chain.with_coords(chain.coords @ random_rotation(rng).T + rng.normal(scale=5.0, size=3))
        worst_inv = max(worst_inv, float(np.abs(_forward_nodes(inv, moved) - ref_inv).max()))
        best_dflt = max(best_dflt, float(np.abs(_forward_nodes(dflt, moved) - ref_dflt).max()))
    ok = worst_inv < 1e-4 and best_dflt > 1e-2
    return CheckResult("rotation", ok, {"so3_max_abs_diff": worst_inv, "default_max_abs_diff": best_dflt})


def mask_check(n_samples: int = 1000, n_residues: int = 300, seed: int = 0) -> CheckResult:
    """Exact masked fraction, mean span length near lambda, and the noise scale."""
    rng = np.random.default_rng(seed)
    cfg = MaskConfig()
    fractions_ok = True
    lengths = []
    for _ in range(n_samples):
        spans = sample_spans(n_residues, cfg.mask_fraction, cfg.span_lambda, rng)
        covered = sum(b - a for a, b in spans)
        fractions_ok &= covered == int(math.floor(cfg.mask_fraction * n_residues + 1e-9))
        lengths.extend(b - a for a, b in spans)
    mean_len = float(np.mean(lengths))
    chain = generate_synthetic_chain(60, seed)
    disp = []
    while sum(len(d) for d in disp) < 10000:
        _, noise = apply_noise(chain, [(0, chain.n_residues)], cfg.noise_sigma, rng)
        disp.append(noise.displacements)
    std = np.concatenate(disp).std(axis=0, ddof=1)
    ok = fractions_ok and 5.2 <= mean_len <= 6.8 and bool(np.all((std >= 0.49) & (std <= 0.51)))
    return CheckResult("mask", ok, {"exact_fraction": bool(fractions_ok), "mean_span_length": mean_len,
                                    "noise_std": std.tolist(), "noised_atoms": int(sum(len(d) for d in disp))})


def leak_violations(masked_chain, record, graph, features) -> int:
    """Masked residues must own exactly one node, a CA typed MASK, present in both tracks."""
    bad = 0
    res_nodes = set(graph.res_nodes.tolist())
    atom_nodes = set(graph.atom_dst.tolist())
    for ri in record.residue_indices:
        nodes = np.flatnonzero(graph.atom_residue == ri)
        if len(nodes) != 1:
            bad += 1
            continue
        node = int(nodes[0])
        ok = (masked_chain.atoms[node].atom_name == "CA"
              and features.residue_type[node] == AminoAcidType.MASK
              and graph.ca_of_residue[ri] == node
              and node in res_nodes and node in atom_nodes)
        bad += not ok
    return bad


def leak_check(n_samples: int = 1000, n_residues: int = 30, seed: int = 0) -> CheckResult:
    """Full masking, graph and featurization pipeline; counts residues leaking more than a bare CA."""
    rng = np.random.default_rng(seed)
    cfg = small_config()
    chains = [generate_synthetic_chain(n_residues, seed + i) for i in range(10)]
    violations = 0
    masked_total = 0
    for t in range(n_samples):
        sample = mask_and_noise(chains[t % len(chains)], MaskConfig(), rng)
        graph = build_bilevel_graph(sample.chain, cfg.k_atom, cfg.k_res, cfg.use_virtual_origin)
        feats = featurize(graph, sample.chain, None, cfg.feature_config())
        violations += leak_violations(sample.chain, sample.smpc, graph, feats)
        masked_total += len(sample.smpc.residue_indices)
    return CheckResult("leak", violations == 0, {"samples": n_samples, "masked_residues": masked_total,
                                                 "violations": violations})


def brute_force_knn(points: np.ndarray, k: int) -> np.ndarray:
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    idx = np.arange(len(points))
    kk = min(k, len(points) - 1)
    return np.array([np.lexsort((idx, d2[i]))[:kk] for i in range(len(points))]).reshape(len(points), kk)


def knn_check(n_instances: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for t in range(n_instances):
        n = int(rng.integers(2, 501))
        k = (1, 5, 30)[t % 3]
        pts = rng.uniform(0, 30, size=(n, 3))
        if t % 2:
            pts = np.round(pts)  # force distance ties
        if not np.array_equal(knn(pts, k, cell_size=3.8), brute_force_knn(pts, k)):
            mismatches += 1
    return CheckResult("knn", mismatches == 0, {"instances": n_instances, "mismatches": mismatches})


def sasa_check() -> CheckResult:
    single = shrake_rupley(coords=np.zeros((1, 3)), radii=np.array([1.6])).per_atom[0]
    expected = 4 * math.pi * 3.0**2
    shell = _buried_shell()
    buried = shrake_rupley(coords=shell, radii=np.full(len(shell), 1.6)).per_atom[0]
    dimer = shrake_rupley(coords=np.array([[-1.5, 0, 0], [1.5, 0, 0]]), radii=np.array([1.7, 1.7])).per_atom
    ok = abs(single - expected) / expected < 0.01 and buried == 0.0 and abs(dimer[0] - dimer[1]) < 1e-9
    return CheckResult("sasa", ok, {"isolated": float(single), "expected": expected, "buried": float(buried),
                                    "dimer_difference": float(abs(dimer[0] - dimer[1]))})


def _buried_shell() -> np.ndarray:
    """A center atom surrounded by a dense shell of neighbours."""
    from .geometry import sphere_points

    return np.vstack([np.zeros((1, 3)), 2.2 * sphere_points(64)])


def attention_check(seed: int = 0, n_residues: int = 25) -> CheckResult:
    cfg = small_config()
    worst = 0.0
    for variant in (cfg, cfg.with_so3_invariant()):
        model = VabsNet(variant, perturbed_params(variant, seed, scale=2.0))
        chain = generate_synthetic_chain(n_residues, seed)
        sample = make_pretrain_sample(prepare_record(chain), variant, MaskConfig(), np.random.default_rng(seed))
        trace = AttentionTrace()
        out = model.forward(sample.features, trace)
        model.movement(out, sample.features, trace)
        worst = max(worst, trace.max_row_error())
    return CheckResult("attention", worst < 1e-6, {"max_row_sum_error": worst})


SUITES = {
    "gradients": gradient_check,
    "frames": frame_check,
    "rotation": rotation_check,
    "mask": mask_check,
    "leak": leak_check,
    "knn": knn_check,
    "sasa": sasa_check,
    "attention": attention_check,
}


def run_suites(names) -> list[CheckResult]:
    names = list(SUITES) if names in (None, "all") or "all" in names else names
    return [SUITES[n]() for n in names]
