import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protbilevel.checks import brute_force_knn
from protbilevel.graph import BilevelGraph, GraphError, build_bilevel_graph, knn
from protbilevel.structures import AminoAcidType, build_chain, center_and_rotate, generate_synthetic_chain


def test_knn_matches_brute_force_random():
    pts = np.random.default_rng(0).uniform(0, 20, size=(200, 3))
    assert np.array_equal(knn(pts, 12), brute_force_knn(pts, 12))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(1, 40), st.integers(0, 2**31), st.booleans(), st.floats(0.5, 8.0))
def test_knn_property(n, k, seed, lattice, cell):
    pts = np.random.default_rng(seed).uniform(0, 12, size=(n, 3))
    if lattice:
        pts = np.round(pts)  # many exact ties
    assert np.array_equal(knn(pts, k, cell_size=cell), brute_force_knn(pts, k))


def test_knn_degenerate_inputs():
    assert knn(np.zeros((1, 3)), 5).shape == (1, 0)
    same = np.zeros((5, 3))
    assert knn(same, 2).tolist() == [[1, 2], [0, 2], [0, 1], [0, 1], [0, 1]]


def test_small_graph_in_neighbours():
    tiny = build_chain("A", [(AminoAcidType.GLY, 1, "", [
        ("N", "N", (0, 0, 0), None, None), ("CA", "C", (1.4, 0, 0), None, None),
        ("C", "C", (2, 1.3, 0), None, None), ("O", "O", (3, 1.5, 0.2), None, None)])])
    g = build_bilevel_graph(tiny, k_atom=10, k_res=10)
    for atom in range(4):
        src = g.atom_src[g.atom_dst == atom]
        assert sorted(src.tolist()) == sorted([a for a in range(4) if a != atom] + [g.origin])
    assert np.allclose(g.coords[g.origin], tiny.coords.mean(axis=0))


def test_origin_connects_both_ways():
    chain = generate_synthetic_chain(10, 0)
    g = build_bilevel_graph(chain, 8, 4)
    o = g.origin
    assert (g.atom_dst[g.atom_src == o].size, g.atom_src[g.atom_dst == o].size) == (chain.n_atoms, chain.n_atoms)
    assert sorted(g.res_src[g.res_dst == o].tolist()) == sorted(chain.ca_indices.tolist())
    assert set(g.res_dst.tolist()) <= set(g.res_nodes.tolist())
    nodes_without_origin = build_bilevel_graph(chain, 8, 4, use_origin=False)
    assert nodes_without_origin.origin is None and nodes_without_origin.n_nodes == chain.n_atoms


def test_topology_invariant_under_rigid_motion():
    chain = generate_synthetic_chain(20, 3)
    moved = center_and_rotate(chain, seed=4)
    g1, g2 = build_bilevel_graph(chain, 10, 6), build_bilevel_graph(moved, 10, 6)
    e1 = set(zip(g1.atom_src.tolist(), g1.atom_dst.tolist()))
    e2 = set(zip(g2.atom_src.tolist(), g2.atom_dst.tolist()))
    # rotation can reorder exact ties only in floating point; synthetic chains have none
    assert e1 == e2
    assert set(zip(g1.res_src.tolist(), g1.res_dst.tolist())) == set(zip(g2.res_src.tolist(), g2.res_dst.tolist()))


def test_graph_json_round_trip():
    g = build_bilevel_graph(generate_synthetic_chain(5, 0), 6, 3)
    h = BilevelGraph.from_json(g.to_json())
    assert np.array_equal(g.atom_src, h.atom_src) and np.array_equal(g.res_dst, h.res_dst)
    assert h.origin == g.origin


def test_graph_errors():
    chain = generate_synthetic_chain(3, 0)
    with pytest.raises(GraphError):
        build_bilevel_graph(chain, 0, 3)
