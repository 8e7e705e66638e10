import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedldr import numkit as nk
from fedldr.numkit import ContractError, DimensionError, GradTape, Tensor

from oracles import central_difference, matmul_loops, rel_err

# softmax([1, 0]) evaluated with mpmath at 40 digits
SOFTMAX_1_0 = (0.7310585786300048792511592418218362743651, 0.2689414213699951207488407581781637256349)


def test_matmul_examples():
    b = [[3.0, 4.0], [5.0, 6.0]]
    np.testing.assert_array_equal(nk.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    np.testing.assert_array_equal(nk.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_matches_loops():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(nk.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (2, 8, 3), (8, 8, 8), (5, 1, 7)])
def test_matmul_up_to_8x8(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    np.testing.assert_allclose(nk.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_relu_examples():
    m = Tensor([[-1.0, 0.0], [2.0, -3.0]])
    np.testing.assert_array_equal(nk.relu(m).data, [[0, 0], [2, 0]])
    pos = np.random.default_rng(1).uniform(0.1, 2, (3, 3))
    np.testing.assert_array_equal(nk.relu(Tensor(pos)).data, pos)
    r = np.random.default_rng(2).standard_normal((4, 4))
    np.testing.assert_array_equal(nk.relu(nk.relu(Tensor(r))).data, nk.relu(Tensor(r)).data)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([[0.0, 1.0, -1.0]], requires_grad=True)
    with GradTape() as tape:
        loss = nk.total(nk.relu(x))
    (g,) = nk.backward(tape, loss, [x])
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


def test_row_softmax_examples():
    np.testing.assert_allclose(nk.row_softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(nk.row_softmax(Tensor([[1.0, 0.0]])).data, [SOFTMAX_1_0], atol=1e-15)
    out = nk.row_softmax(Tensor([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-50, 50)))
def test_row_softmax_is_row_stochastic(m):
    s = nk.row_softmax(Tensor(m)).data
    assert np.all(s > 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_backward_linear_map_adjoint():
    b = Tensor(np.random.default_rng(3).standard_normal((2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = nk.total(nk.matmul(Tensor(np.eye(2)), b))
    (g,) = nk.backward(tape, loss, [b])
    np.testing.assert_array_equal(g, np.ones((2, 2)))


def test_backward_softmax_sum_is_conserved():
    x = Tensor(np.random.default_rng(4).standard_normal((3, 5)), requires_grad=True)
    with GradTape() as tape:
        loss = nk.total(nk.row_softmax(x))
    (g,) = nk.backward(tape, loss, [x])
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        y = nk.relu(x)
    with pytest.raises(ContractError):
        nk.backward(tape, y, [x])


def test_unused_leaf_has_exact_zero_adjoint():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones((3, 1)), requires_grad=True)
    with GradTape() as tape:
        loss = nk.total(x)
    gx, gu = nk.backward(tape, loss, [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((3, 1)))
    np.testing.assert_array_equal(gx, np.ones((2, 2)))


def test_repeated_leaf_contributions_are_summed():
    # d/dE sum(E E^T) = 2 * (column sums broadcast); E appears twice
    e = np.random.default_rng(5).standard_normal((4, 3))
    t = Tensor(e, requires_grad=True)
    with GradTape() as tape:
        loss = nk.total(nk.matmul(t, nk.transpose(t)))
    (g,) = nk.backward(tape, loss, [t])
    expected = central_difference(lambda v: float(np.sum(v @ v.T)), e)
    assert rel_err(g, expected) < 1e-8


def test_tape_is_reverse_topological_and_lists_leaves():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        c = nk.matmul(a, b)
        d = nk.relu(c)
        nk.total(d)
    produced = {}
    for i, rec in enumerate(tape.records):
        produced[id(rec.out)] = i
        for inp in rec.inputs:
            assert produced.get(id(inp), -1) < i
    assert tape.leaves() == [a, b]


def test_no_recording_without_tape_or_without_grad():
    a = Tensor(np.ones((2, 2)))
    with GradTape() as tape:
        nk.relu(a)
    assert len(tape) == 0
    assert nk.relu(Tensor(np.ones((1, 1)), requires_grad=True)).requires_grad is False


def test_operations_are_pure():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    r1 = nk.row_softmax(nk.relu(nk.matmul(Tensor(a), Tensor(b)))).data
    r2 = nk.row_softmax(nk.relu(nk.matmul(Tensor(a), Tensor(b)))).data
    assert r1.tobytes() == r2.tobytes()


def test_rank_limit():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


# ---------------------------------------------------------------- gradient property, every primitive


def _check_primitive(fn, shapes, rng):
    """Compare tape gradients of sum(w * fn(*inputs)) against central differences."""
    xs = [rng.uniform(-1, 1, s) for s in shapes]
    out_shape = fn(*[Tensor(x) for x in xs]).shape
    w = rng.uniform(-1, 1, out_shape) if out_shape else np.array(rng.uniform(-1, 1))

    def scalar(*arrays):
        return float(np.sum(w * fn(*[Tensor(a) for a in arrays]).data))

    ts = [Tensor(x, requires_grad=True) for x in xs]
    with GradTape() as tape:
        y = fn(*ts)
        loss = _weighted(y, w)
    grads = nk.backward(tape, loss, ts)
    worst = 0.0
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = list(xs)
            args[i] = v
            return scalar(*args)
        worst = max(worst, rel_err(grads[i], central_difference(f, x, 1e-5)))
    return worst


def _weighted(y, w):
    # sum(w * y) built from primitives: reshape to a column and matmul with w
    flat = nk.reshape(y, (1, int(np.prod(y.shape)) if y.shape else 1))
    return nk.matmul(flat, Tensor(np.reshape(w, (-1, 1))))


PRIMITIVES = {
    "matmul": (lambda a, b: nk.matmul(a, b), [(3, 4), (4, 2)]),
    "transpose": (lambda a: nk.transpose(a), [(3, 2)]),
    "relu": (lambda a: nk.relu(a), [(4, 3)]),
    "row_softmax": (lambda a: nk.row_softmax(a), [(3, 5)]),
    "add": (lambda a, b: nk.add(a, b), [(2, 3), (2, 3)]),
    "sub": (lambda a, b: nk.sub(a, b), [(2, 3), (2, 3)]),
    "scale": (lambda a: nk.scale(a, -2.5), [(3, 3)]),
    "absolute": (lambda a: nk.absolute(a), [(3, 4)]),
    "mean": (lambda a: nk.mean(a), [(3, 4)]),
    "total": (lambda a: nk.total(a), [(2, 2)]),
    "sum_squares": (lambda a: nk.sum_squares(a), [(3, 2)]),
    "reshape": (lambda a: nk.reshape(a, (2, 6)), [(3, 4)]),
    "pool_contract": (lambda e, w: nk.pool_contract(e, w), [(4, 3), (3, 2, 5)]),
    "propagate": (lambda a, x: nk.propagate(a, x), [(4, 4), (4, 3)]),
    "propagate_batched": (lambda a, x: nk.propagate(a, x), [(4, 4), (2, 4, 3)]),
    "node_contract": (lambda h, t: nk.node_contract(h, t), [(4, 3), (4, 3, 2)]),
    "node_contract_batched": (lambda h, t: nk.node_contract(h, t), [(2, 4, 3), (4, 3, 2)]),
    "add_node_bias": (lambda z, b: nk.add_node_bias(z, b), [(4, 2), (4, 2)]),
    "add_node_bias_batched": (lambda z, b: nk.add_node_bias(z, b), [(3, 4, 2), (4, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    worst = max(_check_primitive(fn, shapes, rng) for _ in range(100))
    assert worst < 1e-4, f"{name}: {worst}"
