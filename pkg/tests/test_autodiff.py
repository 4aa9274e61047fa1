import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protbilevel import autodiff as ad
from protbilevel.autodiff import ContractError, ShapeError, Tape, Tensor, grad_check

RNG = np.random.default_rng(0)
TOL = 1e-7


def _x(*shape, scale=1.0, rng=RNG):
    return rng.normal(size=shape) * scale


def _weighted(t, w):
    # contract with a fixed random tensor so every output entry matters
    return ad.sum_(ad.mul(t, w))


def test_linear_and_quadratic_exact():
    w = _x(5)
    assert grad_check(lambda x: ad.sum_(ad.mul(x, w)), _x(5)) < 1e-9
    assert grad_check(lambda x: ad.sum_(ad.square(x)), _x(5)) < 1e-9


ELEMENTWISE = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_binary_ops_with_broadcast(name):
    w = _x(4, 3)
    assert grad_check(lambda a, b: _weighted(ELEMENTWISE[name](a, b), w), [_x(4, 3), _x(1, 3)]) < TOL


UNARY = {
    "exp": (ad.exp, 0.5),
    "sqrt": (lambda a: ad.sqrt(ad.add(ad.square(a), 0.5)), 1.0),
    "abs": (ad.abs_, 1.0),
    "relu": (ad.relu, 1.0),
    "gelu": (ad.gelu, 1.5),
    "neg": (ad.neg, 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops(name):
    fn, scale = UNARY[name]
    w = _x(6, 2)
    x = _x(6, 2, scale=scale)
    x[np.abs(x) < 1e-3] = 0.1  # keep kinks away from the stencil
    assert grad_check(lambda a: _weighted(fn(a), w), x) < TOL


def test_gelu_values():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(ad.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_matmul_concat_reshape_getitem():
    w = _x(3, 10)
    assert grad_check(lambda a, b: _weighted(ad.matmul(a, b), _x(4, 5, rng=np.random.default_rng(1))),
                      [_x(4, 3), _x(3, 5)]) < TOL
    assert grad_check(lambda a, b: _weighted(ad.concat([a, b], axis=1), w), [_x(3, 4), _x(3, 6)]) < TOL
    assert grad_check(lambda a: _weighted(ad.reshape(a, (3, 10)), w), _x(5, 6)) < TOL
    w2 = _x(2, 3)
    assert grad_check(lambda a: _weighted(ad.getitem(a, (slice(1, 3), slice(None))), w2), _x(4, 3)) < TOL
    idx = np.array([0, 2, 0])
    w3 = _x(3, 3)
    assert grad_check(lambda a: _weighted(ad.getitem(a, idx), w3), _x(4, 3)) < TOL


def test_reductions():
    wr = _x(3)
    assert grad_check(lambda a: _weighted(ad.sum_(a, axis=0), wr), _x(4, 3)) < TOL
    wr = _x(4, 1)
    assert grad_check(lambda a: _weighted(ad.mean(a, axis=1, keepdims=True), wr), _x(4, 3)) < TOL


def test_gather_and_index_update():
    idx = np.array([3, 0, 3, 1, -1])
    w = _x(5, 2)
    assert grad_check(lambda a: _weighted(ad.gather(a, idx), w), _x(4, 2)) < TOL
    slots = np.array([1, 3])
    wr = _x(4, 2)
    assert grad_check(lambda a, r: _weighted(ad.index_update(a, slots, r), wr), [_x(4, 2), _x(2, 2)]) < TOL
    out = ad.index_update(Tensor(np.zeros((3, 1))), np.array([2]), Tensor(np.ones((1, 1))))
    assert out.data[:, 0].tolist() == [0, 0, 1]
    with pytest.raises(ShapeError):
        ad.gather(Tensor(np.zeros((2, 2))), np.array([2]))


def test_segment_sum_against_loop():
    seg = np.array([0, 2, 2, 1, 0, 2])
    vals = _x(6, 3)
    out = ad.segment_sum(Tensor(vals), seg, 4).data
    ref = np.zeros((4, 3))
    for e, s in enumerate(seg):
        ref[s] += vals[e]
    assert np.allclose(out, ref)
    wr = _x(4, 3)
    assert grad_check(lambda v: _weighted(ad.segment_sum(v, seg, 4), wr), vals) < TOL
    # 1-D input path
    assert np.allclose(ad.segment_sum(Tensor(vals[:, 0]), seg, 4).data, ref[:, 0])


def test_segment_softmax():
    assert ad.segment_softmax(Tensor(np.array([[3.7]])), np.array([0]), 1).data.tolist() == [[1.0]]
    seg = np.array([1, 0, 1, 1, 0, 3])
    x = _x(6, 2, scale=3)
    out = ad.segment_softmax(Tensor(x), seg, 4).data
    for s in (0, 1, 3):
        rows = seg == s
        ref = np.exp(x[rows]) / np.exp(x[rows]).sum(axis=0)
        assert np.allclose(out[rows], ref, atol=1e-15)
    wr = _x(6, 2)
    assert grad_check(lambda v: _weighted(ad.segment_softmax(v, seg, 4), wr), x) < TOL
    big = ad.segment_softmax(Tensor(np.array([1000.0, 999.0])), np.array([0, 0]), 1).data
    assert np.isfinite(big).all() and abs(big.sum() - 1) < 1e-15


def test_edge_dot_and_segment_attend_against_dense():
    rng = np.random.default_rng(4)
    n, h, k = 5, 2, 3
    src = np.array([0, 1, 2, 3, 4, 0, 2])
    dst = np.array([1, 0, 0, 4, 2, 2, 2])
    q, kk, v = rng.normal(size=(3, n, h, k))
    w = rng.random((len(src), h))
    dot = ad.edge_dot(Tensor(q), Tensor(kk), dst, src).data
    assert np.allclose(dot, [[q[d, j] @ kk[s, j] for j in range(h)] for s, d in zip(src, dst)])
    att = ad.segment_attend(Tensor(w), Tensor(v), src, dst, n).data
    ref = np.zeros((n, h, k))
    for e, (s, d) in enumerate(zip(src, dst)):
        ref[d] += w[e][:, None] * v[s]
    assert np.allclose(att, ref)
    wd = rng.normal(size=(7, h))
    assert grad_check(lambda a, b: _weighted(ad.edge_dot(a, b, dst, src), wd), [q, kk]) < TOL
    wt = rng.normal(size=(n, h, k))
    assert grad_check(lambda a, b: _weighted(ad.segment_attend(a, b, src, dst, n), wt), [w, v]) < TOL


def test_layer_norm():
    const = ad.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.allclose(const, 0.0)
    x = _x(3, 5)
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
    assert np.allclose(out, ref)
    wr = _x(3, 5)
    assert grad_check(lambda a, g, b: _weighted(ad.layer_norm(a, g, b), wr), [x, _x(5), _x(5)]) < TOL


def test_l2_norm_and_zero_subgradient():
    x = _x(4, 3)
    wr = _x(4)
    assert grad_check(lambda a: _weighted(ad.l2_norm(a, axis=1), wr), x) < TOL
    z = Tensor(np.zeros((1, 3)), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_(ad.l2_norm(z, axis=1))
    tape.backward(out)
    assert np.array_equal(z.grad, np.zeros((1, 3)))


def test_losses():
    logits = _x(4, 6)
    tgt = np.array([0, 5, 2, 2])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    ce = ad.cross_entropy_with_logits(Tensor(logits), tgt).data
    assert ce == pytest.approx(-np.log(p[np.arange(4), tgt]).mean())
    assert grad_check(lambda a: ad.cross_entropy_with_logits(a, tgt), logits) < TOL
    y = np.array([1.0, 0.0, 1.0, 0.0])
    z = _x(4)
    sig = 1 / (1 + np.exp(-z))
    bce = ad.bce_with_logits(Tensor(z), y).data
    assert bce == pytest.approx(-(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean())
    assert grad_check(lambda a: ad.bce_with_logits(a, y), z) < TOL
    t = _x(5)
    x = t + 0.5
    assert ad.l1_loss(Tensor(x), t).data == pytest.approx(0.5)
    assert ad.l2_loss(Tensor(x), t).data == pytest.approx(0.25)
    with pytest.raises(ShapeError):
        ad.l1_loss(Tensor(x), t[:3])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_random_composite_graph(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    seg = rng.integers(0, 3, size=6)

    def f(a, b):
        h = ad.gelu(ad.matmul(a, b))
        s = ad.segment_softmax(h, seg, 3)
        return ad.sum_(ad.mul(ad.segment_sum(ad.mul(s, h), seg, 3), w))

    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(ta, tb)
    tape.backward(out)
    eps = 1e-5
    for arr, t in ((a, ta), (b, tb)):
        numeric = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            up, down = arr.copy(), arr.copy()
            up[i] += eps
            down[i] -= eps
            pair = (up, b) if arr is a else (a, up)
            hi = f(*map(Tensor, pair)).data
            pair = (down, b) if arr is a else (a, down)
            numeric[i] = (hi - f(*map(Tensor, pair)).data) / (2 * eps)
        # tiny components carry roundoff on the scale of the whole gradient, so
        # the absolute slack is tied to that scale rather than to each entry
        scale = np.abs(numeric).max()
        np.testing.assert_allclose(t.grad, numeric, rtol=1e-6, atol=1e-7 * scale)


def test_tape_semantics():
    a = Tensor(np.array([2.0]), requires_grad=True)
    out = ad.mul(a, a)  # no tape: nothing recorded
    assert not out.requires_grad
    with Tape() as tape:
        y = ad.add(ad.mul(a, a), ad.mul(a, 3.0))
    tape.backward(y)
    assert a.grad.tolist() == [7.0]
    with Tape() as tape:
        y = ad.mul(a, Tensor(np.ones(2)))
    with pytest.raises(ContractError):
        tape.backward(y)
    with pytest.raises(ContractError):
        grad_check(lambda x: x, np.ones(3))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_grad_check_params_reports_per_parameter():
    params = {"w": Tensor(_x(3, 2)), "b": Tensor(_x(2))}
    x = _x(4, 3)
    worst, per = ad.grad_check_params(
        lambda: ad.sum_(ad.square(ad.add(ad.matmul(Tensor(x), params["w"]), params["b"]))), params
    )
    assert worst < 1e-8 and set(per) == {"w", "b"}
