import math
from unittest import TestCase

import numpy as np

from guarded_tuning import tensor as T
from guarded_tuning.decorrelation import DecorrelationConfig, composite_loss, cosine_distance_matrix, \
    distance_correlation, double_center
from guarded_tuning.errors import ConfigError, ContractError, DimensionError
from guarded_tuning.tensor import Tape, Tensor, backward
from tests.examples import analytic_grad, max_relative_error, numeric_grad


def sample(shape, seed=0, requires_grad=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def pairwise_dcor(x, y, eps=1e-8):
    """ distance correlation computed pair by pair with plain loops """
    def distances(rows):
        n = len(rows)
        norms = [max(math.sqrt(sum(v * v for v in row)), eps) for row in rows]
        dist = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                cos = sum(a * b for a, b in zip(rows[i], rows[j])) / (norms[i] * norms[j])
                dist[i][j] = dist[j][i] = 1.0 - cos
        return dist

    def centered(dist):
        n = len(dist)
        rows = [sum(r) / n for r in dist]
        cols = [sum(dist[i][j] for i in range(n)) / n for j in range(n)]
        grand = sum(rows) / n
        return [[dist[i][j] - rows[i] - cols[j] + grand for j in range(n)] for i in range(n)]

    a, b = centered(distances(x.tolist())), centered(distances(y.tolist()))
    n = len(a)

    def mean_product(p, q):
        return sum(p[i][j] * q[i][j] for i in range(n) for j in range(n)) / (n * n)

    dvar_x, dvar_y = mean_product(a, a), mean_product(b, b)
    if dvar_x < 1e-12 or dvar_y < 1e-12:
        return 0.0
    return math.sqrt(max(mean_product(a, b) / math.sqrt(dvar_x * dvar_y), 1e-12))


class DistanceTests(TestCase):
    def test_cosine_distance_matrix(self):
        x = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]]))
        dist = cosine_distance_matrix(x).data
        np.testing.assert_allclose(dist, [[0, 1, 2], [1, 0, 1], [2, 1, 0]], atol=1e-12)
        self.assertTrue(np.all(np.diag(dist) == 0))
        np.testing.assert_array_equal(dist, dist.T)

    def test_zero_rows_are_floored(self):
        x = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_allclose(cosine_distance_matrix(x).data, [[0, 1], [1, 0]])

    def test_needs_two_rows(self):
        with self.assertRaises(ContractError):
            cosine_distance_matrix(Tensor(np.ones((1, 3))))
        with self.assertRaises(DimensionError):
            cosine_distance_matrix(Tensor(np.ones(3)))

    def test_double_center(self):
        dist = cosine_distance_matrix(sample((7, 3)))
        centered = double_center(dist).data
        np.testing.assert_allclose(centered.sum(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(centered.sum(axis=1), 0, atol=1e-12)
        with self.assertRaises(DimensionError):
            double_center(Tensor(np.ones((2, 3))))


class DistanceCorrelationTests(TestCase):
    def test_self_correlation_is_one(self):
        x = sample((20, 5))
        self.assertAlmostEqual(distance_correlation(x, x).item(), 1.0, places=6)

    def test_matches_pairwise_computation(self):
        rng = np.random.default_rng(77)
        for trial in range(200):
            n = int(rng.integers(2, 129))
            x = rng.standard_normal((n, int(rng.integers(2, 9))))
            y = rng.standard_normal((n, int(rng.integers(1, 9))))
            if trial % 3 == 0:
                # partly dependent, so the statistic is not always near zero
                y[:, 0] = np.sin(x.sum(axis=1))
            if trial % 10 == 0:
                x[0] = 0.0
            value = distance_correlation(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64)).item()
            self.assertLessEqual(abs(value - pairwise_dcor(x, y)), 1e-6, f'trial={trial} n={n}')
            self.assertLessEqual(abs(distance_correlation(Tensor(x, dtype=np.float64),
                                                          Tensor(x, dtype=np.float64)).item() - 1.0), 1e-6)

    def test_row_scale_invariant(self):
        x, y = sample((20, 5), 1), sample((20, 3), 2)
        scaled = Tensor(y.data * np.arange(1, 21)[:, None], dtype=np.float64)
        self.assertAlmostEqual(distance_correlation(x, y).item(), distance_correlation(x, scaled).item(), places=8)

    def test_independent_samples_are_weakly_correlated(self):
        x, y = sample((200, 8), 1), sample((200, 8), 2)
        value = distance_correlation(x, y).item()
        self.assertGreaterEqual(value, 0.0)
        self.assertLess(value, 0.4)
        dependent = Tensor(np.tanh(x.data @ sample((8, 8), 3).data), dtype=np.float64)
        self.assertGreater(distance_correlation(x, dependent).item(), value)

    def test_constant_sample_gives_zero(self):
        x = sample((10, 4))
        constant = Tensor(np.tile([[1.0, 2.0, 3.0]], (10, 1)))
        self.assertEqual(distance_correlation(x, constant).item(), 0.0)
        self.assertEqual(distance_correlation(constant, x).item(), 0.0)

    def test_batch_seq_samples(self):
        x, y = sample((2, 5, 4), 1), sample((2, 5, 6), 2)
        flat = distance_correlation(x.data.reshape(10, 4), y.data.reshape(10, 6)).item()
        self.assertAlmostEqual(distance_correlation(x, y).item(), flat, places=10)
        with self.assertRaises(ContractError):
            distance_correlation(sample((4, 3)), sample((5, 3)))

    def test_gradients(self):
        x, y = sample((6, 3), 1, True), sample((6, 4), 2, True)

        def fn():
            return distance_correlation(x, y)

        for p, grad in zip((x, y), analytic_grad(fn, x, y)):
            self.assertLess(max_relative_error(grad, numeric_grad(fn, p)), 1e-4)


class CompositeLossTests(TestCase):
    def setUp(self):
        self.logits = sample((2, 3, 5), 0, True)
        self.targets = np.array([[1, 2, 3], [4, 0, -1]])
        self.emb = sample((2, 3, 4), 1, True)
        self.theta = sample((2, 3, 4), 2, True)

    def test_zero_lambda_is_task_loss(self):
        cfg = DecorrelationConfig(lam=0.0)
        loss, task, dcor = composite_loss(self.logits, self.targets, self.emb, self.theta, cfg, parts=True)
        self.assertEqual(loss.item(), task.item())
        self.assertEqual(dcor.item(), 0.0)

    def test_weighted_sum(self):
        cfg = DecorrelationConfig(lam=2.0)
        loss, task, dcor = composite_loss(self.logits, self.targets, self.emb, self.theta, cfg, parts=True)
        self.assertAlmostEqual(loss.item(), task.item() + 2.0 * dcor.item(), places=10)
        self.assertGreater(dcor.item(), 0.0)

    def test_embedding_gradient_switch(self):
        for embedding_grad in (True, False):
            self.emb.zero_grad()
            self.theta.zero_grad()
            cfg = DecorrelationConfig(lam=1.0, embedding_grad=embedding_grad)
            with Tape():
                loss = composite_loss(self.logits, self.targets, self.emb, self.theta, cfg)
            backward(loss)
            self.assertIsNotNone(self.theta.grad)
            self.assertEqual(self.emb.grad is not None, embedding_grad)

    def test_config_validation(self):
        with self.assertRaises(ConfigError) as cm:
            DecorrelationConfig(lam=-1.0, epsilon=0.0).validate()
        self.assertEqual(len(cm.exception.messages), 2)
        self.assertIs(DecorrelationConfig().validate().lam, 5.0)
        self.assertIsInstance(T.zeros((1,)), Tensor)
