import math
from dataclasses import replace

import numpy as np
import pytest

from protbilevel import autodiff as ad
from protbilevel.autodiff import Tensor
from protbilevel.checks import perturbed_params, small_config
from protbilevel.encodings import featurize
from protbilevel.graph import build_bilevel_graph
from protbilevel.model import (
    AttentionTrace,
    CheckpointError,
    ConfigurationError,
    VabsNet,
    VabsNetConfig,
    attention_weights,
    edge_biases,
    edge_representation,
    expected_shapes,
    forward,
    init_params,
    load_checkpoint,
    node_class_head,
    residue_type_head,
    sam_layer,
    sasa_head,
    torsion_head,
)
from protbilevel.structures import generate_synthetic_chain


def _features(cfg, n_res=8, seed=0, esm=None):
    chain = generate_synthetic_chain(n_res, seed)
    g = build_bilevel_graph(chain, cfg.k_atom, cfg.k_res, cfg.use_virtual_origin)
    return chain, featurize(g, chain, esm, cfg.feature_config())


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _dense_sam(x, e, src, dst, p, pre, heads):
    """Attention written as explicit loops over destination nodes and heads."""
    n, d = x.shape
    dh = d // heads
    h = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    q, k, v = h @ p[f"{pre}.sam.wq"], h @ p[f"{pre}.sam.wk"], h @ p[f"{pre}.sam.wv"]
    bias = e @ p[f"{pre}.sam.wb"]
    attn = np.zeros((n, d))
    for i in range(n):
        edges = np.flatnonzero(dst == i)
        for hh in range(heads):
            sl = slice(hh * dh, (hh + 1) * dh)
            logits = np.array([q[i, sl] @ k[src[m], sl] / math.sqrt(dh) + bias[m, hh] for m in edges])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            attn[i, sl] = sum(wm * v[src[m], sl] for wm, m in zip(w, edges))
    x = x + attn @ p[f"{pre}.sam.wo"]
    h = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    return x + _gelu(h @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]


def _toy_sam_params(d=4, e=3, f=5, heads=2, seed=0):
    rng = np.random.default_rng(seed)
    pre = "t"
    p = {f"{pre}.sam.{w}": rng.normal(size=(d, d)) for w in ("wq", "wk", "wv", "wo")}
    p[f"{pre}.sam.wb"] = rng.normal(size=(e, heads))
    p.update({f"{pre}.ln1.g": rng.normal(size=d), f"{pre}.ln1.b": rng.normal(size=d),
              f"{pre}.ln2.g": rng.normal(size=d), f"{pre}.ln2.b": rng.normal(size=d),
              f"{pre}.ffn.w1": rng.normal(size=(d, f)), f"{pre}.ffn.b1": rng.normal(size=f),
              f"{pre}.ffn.w2": rng.normal(size=(f, d)), f"{pre}.ffn.b2": rng.normal(size=d)})
    return p


def test_sam_layer_matches_dense_loops():
    rng = np.random.default_rng(1)
    p = _toy_sam_params()
    src = np.array([1, 2, 0, 2, 0])
    dst = np.array([0, 0, 1, 1, 2])
    x, e = rng.normal(size=(3, 4)), rng.normal(size=(5, 3))
    got = sam_layer(Tensor(x), Tensor(e), src, dst, {k: Tensor(v) for k, v in p.items()}, "t", 2).data
    assert np.allclose(got, _dense_sam(x, e, src, dst, p, "t", 2), atol=1e-12)


def test_single_neighbour_weight_is_one_and_uniform_when_flat():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4)))
    e = Tensor(rng.normal(size=(3, 3)))
    w = attention_weights(x, e, np.array([1, 2, 0]), np.array([0, 1, 2]),
                          Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))),
                          Tensor(rng.normal(size=(3, 2))), 2)
    assert np.array_equal(w.data, np.ones((3, 2)))
    same = Tensor(np.ones((4, 4)))
    w = attention_weights(same, Tensor(np.zeros((3, 3))), np.array([1, 2, 3]), np.array([0, 0, 0]),
                          Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))),
                          Tensor(np.zeros((3, 2))), 2)
    assert np.allclose(w.data, 1 / 3)


def test_node_without_in_edges_rejected():
    p = {k: Tensor(v) for k, v in _toy_sam_params().items()}
    with pytest.raises(ad.ContractError):
        sam_layer(Tensor(np.ones((3, 4))), Tensor(np.ones((1, 3))), np.array([0]), np.array([1]), p, "t", 2)


def test_zeroed_residual_branches_give_identity():
    cfg = small_config()
    params = perturbed_params(cfg, 0)
    for name in params:
        if name.endswith((".sam.wo", ".ffn.w2", ".ffn.b2")):
            params[name].data[...] = 0.0
    _, feats = _features(cfg)
    x0 = ad.add(ad.gather(params["embed.atom"], feats.atom_type), ad.gather(params["embed.residue"], feats.residue_type))
    seen = []
    forward(feats, cfg, params, between=lambda i, t: seen.append(t.data.copy()) or t)
    assert np.allclose(seen[0], x0.data, atol=1e-12)
    assert np.allclose(seen[1], x0.data, atol=1e-12)


def test_shared_ca_storage_couples_tracks():
    cfg = small_config(n_layers=1)
    params = perturbed_params(cfg, 0)
    _, feats = _features(cfg)
    base = forward(feats, cfg, params).nodes.data
    ca = feats.res_nodes[3]
    kick = np.random.default_rng(9).normal(size=cfg.node_dim)  # not constant, so layer norm keeps it

    def bump(i, t):
        d = np.zeros(t.shape)
        d[ca] = kick
        return ad.add(t, d)

    moved = forward(feats, cfg, params, between=bump).nodes.data
    other_ca = feats.res_nodes[2]
    assert np.abs(moved[other_ca] - base[other_ca]).max() > 1e-6  # reached via the residue track only
    non_ca = np.setdiff1d(np.arange(len(base)), np.append(feats.res_nodes, ca))
    assert np.abs(moved[non_ca] - base[non_ca]).max() < 1e-12


def test_forward_shape_and_vector_encoder_toggle():
    cfg = small_config()
    chain, feats = _features(cfg)
    out = VabsNet(cfg, perturbed_params(cfg, 0)).forward(feats)
    assert out.nodes.shape == (chain.n_atoms + 1, cfg.node_dim)
    plain = replace(cfg, use_vector_encoder=False)
    assert "edge.wf" not in init_params(plain)
    p2 = {k: v for k, v in perturbed_params(cfg, 0).items() if k != "edge.wf"}
    out2 = VabsNet(plain, p2).forward(feats)
    assert np.abs(out.nodes.data - out2.nodes.data).max() > 1e-6


def test_movement_head_matches_unfused_form():
    cfg = small_config()
    params = perturbed_params(cfg, 3)
    _, feats = _features(cfg)
    model = VabsNet(cfg, params)
    out = model.forward(feats)
    pred = model.movement(out, feats).data
    x = out.nodes.data
    n, d = x.shape
    h, dh = cfg.n_heads, d // cfg.n_heads
    ae = feats.atom_edges
    e = edge_representation(params, ae, cfg)
    a = attention_weights(out.nodes, e, ae.src, ae.dst, params["move.wq"], params["move.wk"],
                          params["move.wb"], h).data
    v = x @ params["move.wv"].data
    ref = feats.coords.copy()
    for c, axis in enumerate("xyz"):
        b = np.zeros((n, d))
        for m, (s, t) in enumerate(zip(ae.src, ae.dst)):
            rel = feats.coords[t, c] - feats.coords[s, c]
            b[t] += np.repeat(a[m], dh) * rel * v[s]
        ref[:, c] += (b @ params[f"move.p{axis}"].data)[:, 0]
    assert np.allclose(pred, ref, atol=1e-10)


def test_edge_biases_match_edge_representation():
    cfg = small_config()
    params = perturbed_params(cfg, 4)
    _, feats = _features(cfg)
    biases = edge_biases(params, feats, cfg)
    for track, edges in (("atom", feats.atom_edges), ("res", feats.res_edges)):
        e = edge_representation(params, edges, cfg).data
        for i in range(cfg.n_layers):
            name = f"block.{i}.{track}"
            assert np.allclose(biases[name].data, e @ params[f"{name}.sam.wb"].data, atol=1e-12)
    e = edge_representation(params, feats.atom_edges, cfg).data
    assert np.allclose(biases["move"].data, e @ params["move.wb"].data, atol=1e-12)


def test_movement_degenerate_cases():
    cfg = small_config()
    params = init_params(cfg, 0)  # per-axis projections start at zero
    _, feats = _features(cfg)
    model = VabsNet(cfg, params)
    assert np.array_equal(model.movement(model.forward(feats), feats).data, feats.coords)


def test_heads_zero_weights():
    cfg = small_config()
    params = init_params(cfg, 0)
    nodes = Tensor(np.random.default_rng(0).normal(size=(6, cfg.node_dim)))
    rows = np.array([0, 3])
    assert not residue_type_head(nodes, rows, params).data.any()
    assert not sasa_head(nodes, rows, params).data.any()
    assert not node_class_head(nodes, rows, params).data.any()
    assert torsion_head(nodes, rows, params).shape == (2, 7, 2)


def test_config_mismatches_rejected():
    cfg = small_config()
    _, feats = _features(cfg.with_so3_invariant())
    with pytest.raises(ConfigurationError):
        VabsNet(cfg).forward(feats)
    with pytest.raises(ConfigurationError):
        VabsNetConfig(node_dim=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        VabsNetConfig.from_dict({"bogus": 1})
    _, with_esm = _features(cfg, esm=np.ones((8, 3)))
    with pytest.raises(ConfigurationError):
        VabsNet(cfg).forward(with_esm)


def test_external_embeddings_change_output():
    cfg = small_config()
    esm = np.random.default_rng(0).normal(size=(8, cfg.external_dim))
    _, plain = _features(cfg)
    _, rich = _features(cfg, esm=esm)
    model = VabsNet(cfg, perturbed_params(cfg, 0))
    assert np.abs(model.forward(plain).nodes.data - model.forward(rich).nodes.data).max() > 1e-6


def test_attention_rows_normalised():
    cfg = small_config()
    _, feats = _features(cfg, n_res=12)
    model = VabsNet(cfg, perturbed_params(cfg, 5, scale=3.0))
    trace = AttentionTrace()
    model.movement(model.forward(feats, trace), feats, trace)
    assert len(trace.entries) == 2 * cfg.n_layers + 1
    assert trace.max_row_error() < 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    _, feats = _features(cfg)
    model = VabsNet(cfg, perturbed_params(cfg, 1))
    before = model.forward(feats).nodes.data
    model.save(tmp_path / "ck")
    again = VabsNet.load(tmp_path / "ck")
    assert again.cfg == cfg
    assert np.abs(again.forward(feats).nodes.data - before).max() <= 1e-12
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    assert len(blob) == 8 * sum(int(np.prod(s)) for s in expected_shapes(cfg).values())


def test_checkpoint_mismatch_names_parameter(tmp_path):
    cfg = small_config()
    VabsNet(cfg).save(tmp_path / "ck")
    with pytest.raises(CheckpointError, match="embed.atom"):
        load_checkpoint(tmp_path / "ck", replace(cfg, node_dim=64))
    with pytest.raises(CheckpointError, match="block.2"):
        load_checkpoint(tmp_path / "ck", replace(cfg, n_layers=3))
