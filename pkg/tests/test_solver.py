"""Solver unit tests: damped Gauss-Newton with box bounds."""

import numpy as np
import pytest

from evmocap import solver


def linear_block(A, b, w=1.0):
    return solver.ResidualBlock(lambda x: A @ x - b,
                                lambda x: A.copy(),
                                np.arange(A.shape[1]), w)


def test_quadratic_converges_fast():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.standard_normal((8, 5))
        b = rng.standard_normal(8)
        x_star, *_ = np.linalg.lstsq(A, b, rcond=None)
        x, rep = solver.minimize([linear_block(A, b)], np.zeros(5),
                                 opts=solver.SolverOptions())
        assert rep.n_iterations <= 3
        gap = np.sum((A @ x - b) ** 2) - np.sum((A @ x_star - b) ** 2)
        assert gap < 1e-8


def test_bound_lands_exactly_on_bound():
    # minimize (x - 2)^2 with x <= 1: solution is the bound itself
    blk = solver.ResidualBlock(lambda x: x - 2.0,
                               lambda x: np.eye(1),
                               np.array([0]))
    bounds = solver.BoundsSpec(np.array([-np.inf]), np.array([1.0]))
    x, rep = solver.minimize([blk], np.array([0.0]), bounds)
    assert x[0] == 1.0


def test_x0_outside_bounds_is_clamped():
    blk = solver.ResidualBlock(lambda x: x, lambda x: np.eye(1), np.array([0]))
    bounds = solver.BoundsSpec(np.array([2.0]), np.array([5.0]))
    x, rep = solver.minimize([blk], np.array([0.0]), bounds)
    assert rep.x0_clamped
    assert x[0] == 2.0


def test_rosenbrock_reaches_minimum():
    def res(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def jac(x):
        return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

    blk = solver.ResidualBlock(res, jac, np.array([0, 1]))
    x, rep = solver.minimize([blk], np.array([-1.2, 1.0]),
                             opts=solver.SolverOptions(max_iterations=200))
    assert np.sum(res(x) ** 2) < 1e-10
    assert np.allclose(x, [1.0, 1.0], atol=1e-5)


def test_accepted_costs_monotone():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((12, 6))
    b = rng.standard_normal(12)

    def res(x):
        return np.tanh(A @ x) - b

    def jac(x):
        d = 1.0 - np.tanh(A @ x) ** 2
        return d[:, None] * A

    blk = solver.ResidualBlock(res, jac, np.arange(6))
    x, rep = solver.minimize([blk], np.zeros(6))
    costs = np.asarray(rep.costs)
    assert np.all(np.diff(costs) <= 0)


def test_block_weight_scales_cost():
    A = np.eye(3)
    b = np.ones(3)
    _, rep1 = solver.minimize([linear_block(A, b, 1.0)], np.zeros(3))
    _, rep4 = solver.minimize([linear_block(A, b, 4.0)], np.zeros(3))
    assert rep4.costs[0] == pytest.approx(4.0 * rep1.costs[0])


def test_multiple_blocks_disjoint_params():
    blk0 = solver.ResidualBlock(lambda x: x - 1.0, lambda x: np.eye(2),
                                np.array([0, 1]))
    blk1 = solver.ResidualBlock(lambda x: x + 2.0, lambda x: np.eye(2),
                                np.array([2, 3]))
    x, _ = solver.minimize([blk0, blk1], np.zeros(4))
    assert np.allclose(x, [1, 1, -2, -2], atol=1e-8)


def test_nonfinite_initial_point_raises():
    blk = solver.ResidualBlock(lambda x: np.array([np.nan]),
                               lambda x: np.eye(1), np.array([0]))
    with pytest.raises(ValueError):
        solver.minimize([blk], np.array([0.0]))
