import math

import numpy as np
import pytest

from protbilevel.autodiff import Tensor, grad_check
from protbilevel.objectives import (
    EmptyTargetWarning,
    LossWeights,
    distance_loss,
    node_class_loss,
    position_loss,
    residue_type_loss,
    sasa_loss,
    torsion_loss,
    total_pretrain_loss,
)
from protbilevel.structures import random_rotation


def test_residue_type_loss_values():
    assert residue_type_loss(Tensor(np.zeros((3, 20))), [0, 7, 19]).data == pytest.approx(math.log(20))
    sharp = np.full((2, 20), -50.0)
    sharp[[0, 1], [4, 9]] = 50.0
    assert residue_type_loss(Tensor(sharp), [4, 9]).data < 1e-30
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0]])
    tgt = [1, 2, 0]
    hand = np.mean([-(logits[i, tgt[i]] - math.log(np.exp(logits[i]).sum())) for i in range(3)])
    assert residue_type_loss(Tensor(logits), tgt).data == pytest.approx(hand, abs=1e-15)


def test_empty_targets_warn_and_return_zero():
    with pytest.warns(EmptyTargetWarning):
        assert residue_type_loss(Tensor(np.zeros((0, 20))), []).data == 0.0
    with pytest.warns(EmptyTargetWarning):
        assert torsion_loss(Tensor(np.zeros((1, 7, 2))), np.zeros((1, 7)), np.zeros((1, 7), bool)).data == 0.0
    with pytest.warns(EmptyTargetWarning):
        assert position_loss(Tensor(np.zeros((0, 3))), np.zeros((0, 3))).data == 0.0


def test_torsion_loss_exact_and_norm_penalty():
    theta = np.random.default_rng(0).uniform(-np.pi, np.pi, size=(3, 7))
    exact = np.stack([np.sin(theta), np.cos(theta)], -1)
    valid = np.ones((3, 7), bool)
    assert torsion_loss(Tensor(exact), theta, valid).data == pytest.approx(0.0, abs=1e-9)
    raw = np.zeros((1, 7, 2))
    raw[..., 1] = 2.0
    only_first = np.zeros((1, 7), bool)
    only_first[0, 0] = True
    assert torsion_loss(Tensor(raw), np.zeros((1, 7)), only_first).data == pytest.approx(0.02, abs=1e-9)


def test_torsion_loss_ignores_invalid_angles():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(2, 7, 2))
    theta = rng.uniform(-3, 3, size=(2, 7))
    valid = rng.random((2, 7)) < 0.5
    valid[0, 0] = True
    base = torsion_loss(Tensor(raw), theta, valid).data
    raw2 = raw.copy()
    raw2[~valid] = 123.0
    assert torsion_loss(Tensor(raw2), theta, valid).data == pytest.approx(base)
    assert grad_check(lambda r: torsion_loss(r, theta, valid), raw) < 1e-7


def test_position_loss():
    assert position_loss(Tensor(np.ones((4, 3))), np.ones((4, 3))).data == 0.0
    assert position_loss(Tensor(np.array([[3.0, 4.0, 0.0]])), np.zeros((1, 3))).data == pytest.approx(5.0)
    rng = np.random.default_rng(2)
    p, r = rng.normal(size=(2, 5, 3))
    assert position_loss(Tensor(p), r).data == pytest.approx(sum(np.linalg.norm(p[i] - r[i]) for i in range(5)) / 5)


def test_distance_loss():
    r = np.random.default_rng(3).normal(size=(6, 3))
    assert distance_loss(Tensor(r), r).data == pytest.approx(0.0, abs=1e-12)
    pred = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    real = np.array([[0.0, 0, 0], [4.0, 0, 0]])
    assert distance_loss(Tensor(pred), real).data == pytest.approx(0.5)
    moved = r @ random_rotation(np.random.default_rng(1)).T + 7.0
    p = r + np.random.default_rng(4).normal(size=r.shape)
    pm = p @ random_rotation(np.random.default_rng(5)).T - 2.0
    assert distance_loss(Tensor(pm), r).data == pytest.approx(distance_loss(Tensor(p), r).data)
    assert distance_loss(Tensor(p), moved).data == pytest.approx(distance_loss(Tensor(p), r).data)
    assert grad_check(lambda x: distance_loss(x, r), p) < 1e-6


def test_sasa_loss():
    y = np.array([1.0, 5.0, 0.0])
    assert sasa_loss(Tensor(y), y).data == 0.0
    assert sasa_loss(Tensor(y - 2.5), y).data == pytest.approx(2.5)


def test_node_class_loss():
    assert node_class_loss(Tensor(np.zeros(4)), [0, 1, 1, 0]).data == pytest.approx(math.log(2))
    assert node_class_loss(Tensor(np.array([40.0, -40.0])), [1, 0]).data < 1e-15
    masked = node_class_loss(Tensor(np.array([40.0, 40.0])), [1, 0], mask=[True, False]).data
    assert masked < 1e-15


def test_total_loss_weights():
    comps = {k: Tensor(v) for k, v in zip(("res_type", "torsion", "pos", "dist", "sasa"), (1.0, 2.0, 3.0, 4.0, 5.0))}
    total, report = total_pretrain_loss(comps)
    assert total.data == 15.0 and report["total"] == 15.0 and report["sasa"] == 5.0
    only = total_pretrain_loss(comps, LossWeights(1, 0, 0, 0, 0))[0]
    assert only.data == 1.0
    zeros = {k: Tensor(0.0) for k in comps}
    assert total_pretrain_loss(zeros)[0].data == 0.0
    with pytest.raises(KeyError):
        total_pretrain_loss({"res_type": Tensor(1.0)})
