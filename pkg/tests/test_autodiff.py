import threading
import unittest

import numpy as np

from cooklab import autodiff as ad
from cooklab.errors import GradientError, ShapeError


def numeric_grad(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


class GradCheck(unittest.TestCase):
    """Compares tape gradients of scalar functions with central differences."""

    def check(self, build, *arrays, atol=1e-6):
        with ad.precision(np.float64):
            params = [ad.Tensor(a, requires_grad=True) for a in arrays]
            with ad.Tape() as tape:
                loss = build(*params)
            grads = tape.backward(loss, params)
            for k, a in enumerate(arrays):
                def f(v, k=k):
                    values = [ad.Tensor(x) for x in arrays]
                    values[k] = ad.Tensor(v)
                    return build(*values).item()
                np.testing.assert_allclose(grads[k], numeric_grad(f, a.copy()), atol=atol)


class TestGradients(GradCheck):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_arithmetic_and_broadcast(self):
        a, b = self.rng.normal(size=(4, 3)), self.rng.normal(size=(1, 3))
        self.check(lambda x, y: ((x * y + x / (y * y + 1.0) - y) ** 2).sum(), a, b)

    def test_matmul_and_activations(self):
        x, w = self.rng.normal(size=(5, 4)), self.rng.normal(size=(4, 2))
        self.check(lambda x, w: ad.tanh(x @ w).sum() + ad.relu(x @ w + 0.1).mean(), x, w)

    def test_transcendental(self):
        x = self.rng.uniform(0.5, 2.0, size=(6,))
        self.check(lambda x: (ad.exp(x * 0.3) + ad.log(x) + ad.sqrt(x) + ad.sin(x) * ad.cos(x)).sum(), x)

    def test_reductions_and_reshape(self):
        x = self.rng.normal(size=(3, 4))
        self.check(lambda x: (x.sum(axis=0) * x.mean(axis=1, keepdims=True).reshape(3, 1)).sum() + ad.square(x.T).sum(), x)

    def test_max_gather_scatter(self):
        x = self.rng.normal(size=(5, 3))
        index = np.array([0, 2, 2, 4])

        def build(x):
            rows = ad.gather(x, index)
            return ad.tmax(x, axis=1).sum() + ad.square(ad.scatter_add(rows, np.array([0, 1, 0, 1]), 2)).sum()

        self.check(build, x)

    def test_concat_stack_getitem(self):
        x, y = self.rng.normal(size=(2, 3)), self.rng.normal(size=(2, 2))

        def build(x, y):
            joined = ad.concat([x, y], axis=1)
            stacked = ad.stack([x[0], x[1] * 2.0])
            return ad.square(joined).sum() + (stacked * stacked).sum() + x[1, 2] * y[0, 1]

        self.check(build, x, y)

    def test_log_softmax_and_smooth_l1(self):
        x = self.rng.normal(size=(3, 5))
        target = np.eye(5)[[1, 3, 0]]
        self.check(lambda x: -(ad.log_softmax(x) * target).sum() + ad.smooth_l1(x * 2.0).sum(), x)

    def test_shared_input_accumulates(self):
        x = np.array([1.5, -2.0])
        self.check(lambda x: (x * x * x).sum() + (x + x).sum(), x)


class TestTape(unittest.TestCase):

    def test_scalar_required(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = x * 2.0
        with self.assertRaises(GradientError) as ctx:
            tape.backward(y, [x])
        self.assertEqual(ctx.exception.code, "SCALAR_REQUIRED")

    def test_constants_are_not_recorded(self):
        with ad.Tape() as tape:
            (ad.Tensor(np.ones(3)) * 2.0).sum()
        self.assertEqual(len(tape.nodes), 0)

    def test_unused_parameter_gets_zeros(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        unused = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.Tape() as tape:
            loss = (x * 3.0).sum()
        gx, gu = tape.backward(loss, [x, unused])
        np.testing.assert_allclose(gx, [3.0, 3.0])
        np.testing.assert_array_equal(gu, np.zeros((2, 2)))

    def test_default_precision_and_override(self):
        self.assertEqual(ad.Tensor(1.0).data.dtype, np.float32)
        with ad.precision(np.float64):
            self.assertEqual(ad.Tensor(1.0).data.dtype, np.float64)
        self.assertEqual(ad.Tensor(1.0).data.dtype, np.float32)

    def test_ndarray_on_left_defers_to_tensor(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            loss = (np.arange(3.0) * x).sum()
        self.assertIsInstance(loss, ad.Tensor)
        np.testing.assert_allclose(tape.backward(loss, [x])[0], [0.0, 1.0, 2.0])

    def test_nan_check(self):
        with ad.nan_check():
            with self.assertRaises(GradientError) as ctx:
                ad.log(ad.Tensor(np.array([-1.0])))
        self.assertEqual(ctx.exception.code, "NON_FINITE")

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            ad.Tensor(np.ones(3)) + ad.Tensor(np.ones(4))

    def test_tapes_are_thread_local(self):
        results = {}

        def worker(name, scale):
            x = ad.Tensor(np.ones(4), requires_grad=True)
            with ad.Tape() as tape:
                loss = (x * scale).sum()
            results[name] = tape.backward(loss, [x])[0]

        threads = [threading.Thread(target=worker, args=(f"t{i}", float(i))) for i in range(4)]
        with ad.Tape() as outer:
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        self.assertEqual(len(outer.nodes), 0)
        for i in range(4):
            np.testing.assert_allclose(results[f"t{i}"], np.full(4, float(i)))

    def test_softmax_rows_sum_to_one(self):
        p = ad.softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 0.0]]))
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        self.assertAlmostEqual(p[1, 0], 0.5)


if __name__ == "__main__":
    unittest.main()
