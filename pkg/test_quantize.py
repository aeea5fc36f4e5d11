#!/usr/bin/env python3
"""
Quantization tests - distortion, Lloyd/Newton updates and the RMQA chain
"""
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from backmc.exceptions import SolverError, ValidationError
from backmc.model import LVSegment, ModelSpec, TimeGrid, euler_step
from backmc.quantize import (
    GaussianMixture,
    InitScheme,
    QuantizerGrid,
    SolverKind,
    companion_parameters,
    degenerate_grid,
    distortion,
    euler_mixture,
    hessian,
    initial_grid,
    lloyd_step,
    newton_solve,
    newton_step,
    rmqa_build,
    robustness_study,
    solve_quantizer,
    standard_normal_quantizer,
)

NORMAL = GaussianMixture.standard_normal()
HALF_NORMAL_MEAN = math.sqrt(2 / math.pi)


def quad_distortion(points, mixture):
    """Cell-by-cell adaptive quadrature of E[min_j (X - gamma_j)^2]."""
    grid = QuantizerGrid(points)
    density = lambda x: sum(
        w * norm.pdf(x, m, s) for m, s, w in zip(mixture.means, mixture.stds, mixture.weights)
    )
    bounds = grid.bounds
    total = 0.0
    for j, gamma in enumerate(grid.points):
        value, _ = quad(lambda x: (x - gamma) ** 2 * density(x), bounds[j], bounds[j + 1], epsabs=1e-13, epsrel=1e-11)
        total += value
    return total


def test_single_point_at_mean_is_stationary():
    mixture = GaussianMixture([0.2, 1.0], [0.5, 0.3], [0.25, 0.75])
    report = distortion(QuantizerGrid([mixture.mean]), mixture)
    np.testing.assert_allclose(report.gradient, 0.0, atol=1e-14)
    assert report.value == pytest.approx(mixture.std ** 2, rel=1e-12)


def test_two_point_distortion_of_standard_normal():
    report = distortion(QuantizerGrid([-1.0, 1.0]), NORMAL)
    assert report.value == pytest.approx(2 - 2 * HALF_NORMAL_MEAN, rel=1e-12)
    assert report.value == pytest.approx(quad_distortion([-1.0, 1.0], NORMAL), rel=1e-9)
    assert report.quantization_error == pytest.approx(math.sqrt(report.value))


def test_mixture_distortion_matches_quadrature():
    mixture = GaussianMixture([0.0, 0.5], [1.0, 0.3], [0.3, 0.7])
    points = [-0.5, 0.4, 1.2]
    assert distortion(QuantizerGrid(points), mixture).value == pytest.approx(quad_distortion(points, mixture), rel=1e-8)


def test_gradient_matches_finite_differences():
    mixture = GaussianMixture([0.0, 0.5], [1.0, 0.3], [0.3, 0.7])
    points = np.array([-0.5, 0.4, 1.2])
    gradient = distortion(QuantizerGrid(points), mixture).gradient
    h = 1e-6
    for j in range(points.size):
        up, down = points.copy(), points.copy()
        up[j] += h
        down[j] -= h
        numeric = (distortion(QuantizerGrid(up), mixture).value - distortion(QuantizerGrid(down), mixture).value) / (2 * h)
        assert gradient[j] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_slice_signature_matches_mixture_signature():
    model = ModelSpec.cev(x0=1.36, r=0.0032, sigma=0.1, alpha=0.5)
    sources = QuantizerGrid([1.33, 1.36, 1.39])
    probs = np.array([0.2, 0.5, 0.3])
    grid = QuantizerGrid(np.linspace(1.30, 1.42, 6))
    direct = distortion(grid, sources, probs, model, 0.1, 0.01)
    mixed = distortion(grid, euler_mixture(model, 0.1, 0.01, sources, probs))
    assert direct.value == mixed.value
    mixture = euler_mixture(model, 0.1, 0.01, sources, probs)
    np.testing.assert_array_equal(lloyd_step(grid, sources, probs, model, 0.1, 0.01).points, lloyd_step(grid, mixture).points)
    with pytest.raises(ValidationError):
        euler_mixture(model, 0.1, 0.01, sources, np.array([0.5, 0.5, 0.5]))


def test_lloyd_step_gives_half_normal_means():
    updated = lloyd_step(QuantizerGrid([-1.0, 1.0]), NORMAL)
    np.testing.assert_allclose(updated.points, [-HALF_NORMAL_MEAN, HALF_NORMAL_MEAN], atol=1e-14)


def test_empty_end_cell_moves_to_its_finite_bound():
    updated = lloyd_step(QuantizerGrid([-1.0, 0.0, 50.0]), NORMAL)
    assert updated.points[2] == 25.0
    assert updated.points[0] < updated.points[1] < updated.points[2]


def test_lloyd_never_increases_distortion():
    mixture = GaussianMixture([-0.3, 0.8], [0.6, 0.4], [0.4, 0.6])
    grid = QuantizerGrid(np.linspace(-3, 3, 7))
    values = [distortion(grid, mixture).value]
    for _ in range(25):
        grid = lloyd_step(grid, mixture)
        values.append(distortion(grid, mixture).value)
    assert all(b <= a + 1e-14 for a, b in zip(values, values[1:]))


def test_standard_normal_quantizer_is_a_fixed_point():
    grid = standard_normal_quantizer(10)
    np.testing.assert_allclose(grid.points, -grid.points[::-1], atol=1e-9)
    np.testing.assert_allclose(lloyd_step(grid, NORMAL).points, grid.points, atol=1e-8)
    np.testing.assert_allclose(distortion(grid, NORMAL).gradient, 0.0, atol=1e-8)
    np.testing.assert_allclose(standard_normal_quantizer(2).points, [-HALF_NORMAL_MEAN, HALF_NORMAL_MEAN], atol=1e-10)
    with pytest.raises(ValidationError):
        standard_normal_quantizer(0)


def test_newton_at_stationary_grid_is_identity():
    grid = standard_normal_quantizer(10)
    np.testing.assert_allclose(newton_step(grid, NORMAL).points, grid.points, atol=1e-8)
    diag, off = hessian(grid, NORMAL)
    dense = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    assert np.all(np.linalg.eigvalsh(dense) > 0)


def test_newton_converges_from_nearby_start():
    optimum = standard_normal_quantizer(10).points
    result = newton_solve(NORMAL, 1.01 * optimum, tol=1e-12, max_iter=50)
    assert result.converged
    np.testing.assert_allclose(result.grid.points, optimum, atol=1e-8)


def test_newton_flags_ill_conditioned_hessian():
    with pytest.raises(SolverError) as info:
        newton_step(QuantizerGrid([-1.0, 0.0, 40.0]), NORMAL)
    assert info.value.condition > 1e12
    rows = robustness_study(NORMAL, np.array([-1.0, 0.0, 40.0]), solvers=["newton"])
    assert rows[0]["converged"] is False
    assert rows[0]["points"] is None
    assert "condition" in rows[0]["failure"]


def test_acceleration_reduces_lloyd_iterations():
    start = 1.01 * standard_normal_quantizer(10).points
    rows = {row["solver"]: row for row in robustness_study(NORMAL, start, solvers=["lloyd", "anderson"], tol=1e-7)}
    assert rows["anderson"]["converged"]
    assert rows["anderson"]["iterations"] < rows["lloyd"]["iterations"]
    assert rows["anderson"]["distortions"][-1] <= rows["anderson"]["distortions"][0] + 1e-12


def test_solve_quantizer_reaches_known_optimum():
    result = solve_quantizer(NORMAL, np.linspace(-2, 2, 5), SolverKind.ANDERSON, tol=1e-10, max_iter=5000)
    assert result.converged
    np.testing.assert_allclose(result.grid.points, standard_normal_quantizer(5).points, atol=1e-7)


def test_grid_rejects_unordered_points():
    with pytest.raises(ValidationError):
        QuantizerGrid([0.0, 0.0, 1.0])
    with pytest.raises(ValidationError):
        QuantizerGrid([1.0, 0.5])


def test_initial_grid_schemes():
    model = ModelSpec.cev(x0=1.0, r=0.03, sigma=0.2, alpha=1.0)
    reference = standard_normal_quantizer(4).points
    spot = np.array([1.0])
    for scheme in InitScheme:
        np.testing.assert_allclose(initial_grid(scheme, model, 0.0, 0.01, spot, reference), 1.0003 + 0.02 * reference)
    prev = np.array([0.9, 0.97, 1.03, 1.1])
    euler_op = initial_grid("euler_op", model, 0.01, 0.01, prev, reference)
    np.testing.assert_allclose(initial_grid("prev_grid", model, 0.01, 0.01, prev, reference), prev)
    np.testing.assert_allclose(initial_grid("mid_point", model, 0.01, 0.01, prev, reference), 0.5 * (prev + euler_op))
    np.testing.assert_allclose(initial_grid("expected_value", model, 0.01, 0.01, prev, reference), prev * 1.0003)


def test_degenerate_grid_centres_on_location():
    reference = standard_normal_quantizer(5).points
    grid = degenerate_grid(1.36, reference)
    assert grid[2] == 1.36
    assert np.all(np.diff(grid) > 0)
    assert grid[-1] - grid[0] < 1e-7


def test_companion_parameters_are_stochastic():
    model = ModelSpec.cev(x0=1.36, r=0.0032, sigma=0.1, alpha=0.5)
    mixture = euler_mixture(model, 0.0, 0.01, np.array([1.35, 1.37]), np.array([0.4, 0.6]))
    transitions, marginals = companion_parameters(QuantizerGrid(np.linspace(1.3, 1.42, 7)), mixture)
    np.testing.assert_allclose(transitions.sum(axis=1), 1.0, atol=1e-14)
    assert marginals.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(marginals, mixture.weights @ transitions, atol=1e-15)



def test_companion_transitions_match_simulated_cell_frequencies():
    model = ModelSpec.cev(x0=1.36, r=0.0032, sigma=0.1, alpha=0.5)
    sources, n = np.array([1.33, 1.36, 1.39]), 200_000
    mixture = euler_mixture(model, 0.0, 0.02, sources, np.array([0.2, 0.5, 0.3]))
    grid = QuantizerGrid(np.linspace(1.30, 1.42, 9))
    transitions, _ = companion_parameters(grid, mixture)
    rng = np.random.default_rng(21)
    for i, x in enumerate(sources):
        landed = euler_step(model, 0.0, 0.02, np.full(n, x), rng.standard_normal(n))
        freq = np.bincount(grid.cell_index(landed), minlength=grid.N) / n
        p = transitions[i]
        assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n) + 2 / n)

def test_rmqa_chain_is_consistent():
    model = ModelSpec.cev(x0=1.36, r=0.0032, sigma=0.1, alpha=0.5)
    chain = rmqa_build(model, TimeGrid.uniform(0.5, 5), N=20, record_distortion=True)
    assert chain.builder == "rmqa"
    assert chain.n == 5 and chain.N == 20
    assert len(chain.diagnostics) == 5
    for k, matrix in enumerate(chain.forward):
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(chain.marginals[k] @ matrix, chain.marginals[k + 1], atol=1e-12)
        assert np.all(np.diff(chain.grids[k + 1]) > 0)
    assert all(d.converged for d in chain.diagnostics)
    assert all(d.distortions for d in chain.diagnostics)
    # grids follow the forward mean
    mean = chain.marginals[-1] @ chain.grids[-1]
    assert mean == pytest.approx(1.36 * (1 + 0.0032 * 0.1) ** 5, rel=1e-4)


def test_zero_volatility_chain_tracks_the_spot():
    model = ModelSpec.local_vol(x0=1.0, r=0.0, segments=[LVSegment(end_time=1.0, x=(0.5, 1.5), eta=(0.0, 0.0))])
    chain = rmqa_build(model, TimeGrid.uniform(1.0, 3), N=5)
    for k in range(1, 4):
        assert chain.grids[k][2] == 1.0
        np.testing.assert_array_equal(chain.marginals[k], [0.0, 0.0, 1.0, 0.0, 0.0])
    assert all(d.degenerate for d in chain.diagnostics)


def test_solver_error_is_tagged_with_slice():
    error = SolverError("Hessian condition number 1e13 exceeds 1e12", iterations=4, condition=1e13).at_slice(3)
    assert error.slice_index == 3
    assert error.iterations == 4
    assert error.condition == 1e13
    assert str(error).startswith("slice 3: ")
