import threading

import numpy as np
import pytest

from subsetlift import autodiff as ad
from subsetlift.errors import DomainError, InvalidBatchError, InvalidInputError, InvalidShapeError

from helpers import analytic_grad, central_difference, rel_err

N_INSTANCES = 20


def check_gradient(fn, shapes, seed, positive=False, tol=1e-5):
    """Compare the gradient of ``sum(w * fn(*xs))`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    out_shape = np.shape(fn(*[ad.Tensor(x) for x in xs]).value)
    weights = rng.normal(size=out_shape)

    def scalar(*ts):
        return ad.sum(fn(*ts) * weights)

    grads = analytic_grad(scalar, *xs)
    for i, x in enumerate(xs):
        def f(xi, i=i):
            args = [ad.Tensor(xi if j == i else xs[j]) for j in range(len(xs))]
            return float(scalar(*args).value)

        assert rel_err(grads[i], central_difference(f, x)) < tol


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)], False),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)], True),
    "neg": (lambda a: -a, [(5,)], False),
    "log": (ad.log, [(6,)], True),
    "sqrt": (ad.sqrt, [(6,)], True),
    "relu": (ad.relu, [(4, 5)], False),
    "clamp_min": (lambda a: ad.clamp_min(a, 0.1), [(4, 5)], False),
    "matmul": (ad.matmul, [(3, 4), (4, 2)], False),
    "batched_matmul": (ad.matmul, [(2, 3, 4), (4, 5)], False),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(2, 5, 3), (4, 3), (4,)], False),
    "transpose": (ad.transpose, [(2, 3, 4)], False),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "getitem": (lambda a: ad.getitem(a, (slice(None), [2, 0, 2])), [(3, 4)], False),
    "take": (lambda a: ad.take(a, [3, 1], axis=1), [(2, 5, 3)], False),
    "gather_rows": (lambda a: ad.gather_rows(a, [2, 0]), [(3, 3)], False),
    "sum": (lambda a: ad.sum(a, axis=1), [(3, 4)], False),
    "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)], False),
    "singular_values": (ad.singular_values, [(6, 4)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes, positive = PRIMITIVES[name]
    for seed in range(N_INSTANCES):
        check_gradient(fn, shapes, seed, positive=positive, tol=1e-5 if name != "singular_values" else 1e-4)


def test_batchnorm_gradient_train_and_eval():
    for seed in range(N_INSTANCES):
        rng = np.random.default_rng(seed)
        state = ad.BatchNormState(3)
        state.scale.value = rng.uniform(0.5, 1.5, 3)
        state.shift.value = rng.normal(size=3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, 3)
        for train in (True, False):
            snapshot = (state.running_mean.copy(), state.running_var.copy())

            def fn(x):
                state.running_mean, state.running_var = snapshot[0].copy(), snapshot[1].copy()
                return ad.batchnorm(x, state, train=train)

            check_gradient(fn, [(6, 3)], seed, tol=1e-4)


def test_relu_subgradient_and_clamp_semantics():
    x = ad.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with ad.Tape():
        y = ad.relu(x)
        ad.backward(ad.sum(y))
    np.testing.assert_array_equal(y.value, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])
    c = ad.Tensor([-0.2, 0.1], requires_grad=True)
    with ad.Tape():
        out = ad.clamp_min(c, -0.05)
        ad.backward(ad.sum(out))
    np.testing.assert_array_equal(out.value, [-0.05, 0.1])
    np.testing.assert_array_equal(c.grad, [0.0, 1.0])


def test_log_grad_at_one():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.Tape():
        y = ad.log(x)
        ad.backward(ad.sum(y))
    assert y.value[0] == 0.0 and x.grad[0] == 1.0


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        ad.log(ad.Tensor([0.0, 1.0]))
    with pytest.raises(DomainError):
        ad.sqrt(ad.Tensor([-1.0]))
    with pytest.raises(DomainError):
        ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
    with pytest.raises(InvalidShapeError):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
    with pytest.raises(InvalidShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(InvalidInputError):
        ad.take(ad.Tensor(np.ones((3, 3))), [5], axis=0)
    with pytest.raises(InvalidBatchError):
        ad.batchnorm(ad.Tensor(np.ones((1, 3))), ad.BatchNormState(3), train=True)
    with pytest.raises(InvalidInputError):
        ad.backward(ad.Tensor(np.ones(2), requires_grad=True))


def test_structural_identities():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(ad.transpose(ad.transpose(ad.Tensor(x))).value, x)
    np.testing.assert_allclose(ad.mean(ad.Tensor(np.full((3, 4), 2.5)), axis=1).value, 2.5)
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ad.gather_rows(ad.Tensor(a), [2, 0]).value, a[[2, 0]])
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(3))).value, a)
    assert ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 4)))).shape == (2, 4)


def test_gather_rows_scatters_gradient():
    a = ad.Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.sum(ad.gather_rows(a, [2, 0, 2])))
    np.testing.assert_array_equal(a.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2]])


def test_tape_is_cleared_and_no_grad_records_nothing():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(x * x)
        assert len(tape.nodes) == 2
        ad.backward(y)
        assert len(tape.nodes) == 0
    with ad.Tape() as tape:
        with ad.no_grad():
            z = ad.sum(x * x)
        assert len(tape.nodes) == 0 and not z.requires_grad


def test_constants_do_not_record():
    with ad.Tape() as tape:
        ad.sum(ad.Tensor(np.ones(3)) * 2.0)
        assert len(tape.nodes) == 0


def test_gradient_accumulates_over_reuse():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.sum(x * x + x))
    np.testing.assert_allclose(x.grad, [7.0])


def test_batchnorm_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(64, 5))
    state = ad.BatchNormState(5)
    out = ad.batchnorm(ad.Tensor(x), state, train=True).value
    np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(0), 1.0, atol=1e-4)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(0, ddof=1), rtol=1e-12)
    ev = ad.batchnorm(ad.Tensor(x), state, train=False).value
    np.testing.assert_allclose(ev, (x - state.running_mean) / np.sqrt(state.running_var + 1e-5), rtol=1e-12)


def test_separate_threads_use_separate_tapes():
    results = {}

    def work(key, scale):
        x = ad.Tensor(np.arange(1000.0), requires_grad=True)
        with ad.Tape():
            for _ in range(20):
                y = ad.sum(x * scale)
            ad.backward(y)
        results[key] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        np.testing.assert_array_equal(results[i], np.full(1000, i + 1.0))
