"""Build a synthetic chain, mask it, featurize it and run one forward pass."""

import numpy as np

from protbilevel import MaskConfig, VabsNet, VabsNetConfig, generate_synthetic_chain
from protbilevel.encodings import featurize
from protbilevel.geometry import compute_torsions, shrake_rupley
from protbilevel.graph import build_bilevel_graph
from protbilevel.masking import mask_and_noise

chain = generate_synthetic_chain(40, seed=7)
print(f"{chain.n_residues} residues, {chain.n_atoms} atoms")

sasa = shrake_rupley(chain).per_atom
print(f"total SASA {sasa.sum():.1f} A^2, most exposed atom {chain.atoms[int(sasa.argmax())].atom_name}")

torsions = compute_torsions(chain)
print("residue 1 phi/psi/omega (deg):", np.round(np.degrees(torsions[1].angles[:3]), 1))

masked = mask_and_noise(chain, MaskConfig(seed=1), np.random.default_rng(1))
print("masked residues:", masked.smpc.residue_indices.tolist())

cfg = VabsNetConfig(n_layers=2, node_dim=32, edge_dim=32, ffn_dim=64)
graph = build_bilevel_graph(masked.chain, cfg.k_atom, cfg.k_res, cfg.use_virtual_origin)
features = featurize(graph, masked.chain, None, cfg.feature_config())
model = VabsNet(cfg)
out = model.forward(features)
moved = model.movement(out, features)
print("node states", out.nodes.shape, "predicted coordinates", moved.shape)
