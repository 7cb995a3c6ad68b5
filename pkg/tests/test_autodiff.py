import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mulaaip import autodiff as ad
from mulaaip.autodiff import Adam, Parameter, Rng

from oracles import numeric_grad, rel_error


def test_forward_examples():
    assert ad.leaky_relu(np.array([-1.0, 3.0]), 0.2).data.tolist() == [-0.2, 3.0]
    sm = ad.softmax_segmented(np.zeros(3), np.zeros(3, int), 1).data
    np.testing.assert_allclose(sm, [1 / 3] * 3, atol=1e-15)
    assert ad.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]])).data.tolist() == [[3.0], [7.0]]


def test_errors():
    with pytest.raises(ad.ShapeMismatchError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeMismatchError):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ad.NonFiniteError):
        ad.log(np.array([0.0]))
    with pytest.raises(ad.NotScalarError):
        ad.backward(ad.mul(Parameter(np.ones(2)), 2.0))


UNARY = {
    "exp": ad.exp, "log": lambda x: ad.log(ad.add(ad.square(x), 1.0)), "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), 1.0)),
    "square": ad.square, "abs": ad.abs_, "leaky": lambda x: ad.leaky_relu(x, 0.2), "sigmoid": ad.sigmoid,
    "clip": lambda x: ad.clip(x, -0.5, 0.5), "mean_rows": ad.mean_rows, "sum_axis": lambda x: ad.sum_(x, axis=1),
    "mean_keep": lambda x: ad.mean(x, axis=0, keepdims=True), "reshape": lambda x: ad.reshape(x, (-1,)),
    "index": lambda x: ad.index(x, (slice(1, None), 0)), "gather": lambda x: ad.gather_rows(x, [2, 0, 0, 1]),
    "segsum": lambda x: ad.segment_sum(x, [1, 0, 1], 3), "neg": lambda x: -x,
    "softmax": lambda x: ad.softmax_segmented(ad.reshape(x, (-1,)), np.arange(x.shape[0] * x.shape[1]) % 3, 3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = Parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=UNARY[name](x).shape)
    f = lambda: float(np.sum(UNARY[name](x).data * w))
    loss = ad.sum_(ad.mul(UNARY[name](x), w))
    ad.backward(loss)
    assert rel_error(x.grad, numeric_grad(f, x.data)) < 1e-6


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
}


BINARY_CASES = [(n, s) for n in sorted(BINARY) for s in [(3, 4), (1, 4), (4,)]
                if s == (3, 4) or n not in ("matmul", "concat")]


@pytest.mark.parametrize("name,bshape", BINARY_CASES)
def test_binary_gradients(name, bshape, rng):
    a, b = Parameter(rng.normal(size=(3, 4))), Parameter(rng.normal(size=bshape))
    out = BINARY[name](a, b)
    w = rng.normal(size=out.shape)
    ad.backward(ad.sum_(ad.mul(out, w)))
    f = lambda: float(np.sum(BINARY[name](a.data, b.data).data * w))
    assert rel_error(a.grad, numeric_grad(f, a.data)) < 1e-6
    assert rel_error(b.grad, numeric_grad(f, b.data)) < 1e-6


def test_linear_gradient_outer_product(rng):
    W = Parameter(rng.normal(size=(3, 2)))
    x = rng.normal(size=(1, 3))
    ad.backward(ad.sum_(ad.matmul(x, W)))
    np.testing.assert_allclose(W.grad, np.repeat(x.T, 2, axis=1))
    assert rel_error(W.grad, numeric_grad(lambda: float(np.sum(x @ W.data)), W.data)) < 1e-6


def test_unused_param_zero_and_accumulation(rng):
    a, unused = Parameter(rng.normal(size=3)), Parameter(rng.normal(size=3))
    loss = ad.sum_(ad.square(a))
    ad.backward(loss)
    first = a.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(a.grad, 2 * first)
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_dropout():
    x = np.ones(100_000)
    y = ad.dropout(x, 0.3, Rng(1), training=True).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y).round(12)) == {0.0, round(1 / 0.7, 12)}
    assert ad.dropout(x, 0.3, Rng(1), training=False).data is x or np.array_equal(ad.dropout(x, 0.3, Rng(1), False).data, x)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, Rng(1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.integers(1, 5))
def test_segment_softmax_sums_to_one(logits, segs):
    ids = np.arange(len(logits)) % segs
    p = ad.softmax_segmented(np.array(logits), ids, segs).data
    sums = np.bincount(ids, weights=p, minlength=segs)
    np.testing.assert_allclose(sums[: min(segs, len(logits))], 1.0, atol=1e-12)


def test_adam_first_step():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)
    q = Parameter(np.array([2.0]))
    Adam([q], lr=0.1).step()
    assert q.data[0] == 2.0


def test_adam_trajectory_deterministic():
    def run():
        r = Rng(5)
        W = Parameter(r.normal(0, 1, (4, 3)))
        x = r.normal(0, 1, (6, 4))
        opt = Adam([W], lr=0.01)
        for _ in range(20):
            opt.zero_grad()
            ad.backward(ad.sum_(ad.square(ad.matmul(x, W))))
            opt.step()
        return W.data.tobytes()
    assert run() == run()


def test_rng_streams():
    assert Rng(3).random(5).tolist() == Rng(3).random(5).tolist()
    assert Rng(3).random(5).tolist() != Rng(4).random(5).tolist()
    assert Rng(3).fork(1).random(3).tolist() != Rng(3).fork(2).random(3).tolist()
    # golden SplitMix64 outputs for seed 0
    s, a = ad.splitmix64(0)
    _, b = ad.splitmix64(s)
    assert (a, b) == (0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4)


def test_xavier_bounds():
    w = ad.xavier_uniform((30, 20), Rng(0))
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_checkpoint_round_trip():
    named = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((2, 0, 1))}
    blob = ad.dump_checkpoint(named)
    assert blob[:4] == b"MLPK"
    back = ad.load_checkpoint(blob)
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])
    assert ad.dump_checkpoint(back) == blob
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(blob[:-4])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(b"NOPE" + blob[4:])
