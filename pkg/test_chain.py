#!/usr/bin/env python3
"""
Chain tests - Bayes reversal, alias sampling and path sampling
"""
import numpy as np
import pytest
from scipy.stats import chi2

from backmc.chain import (
    AliasTable,
    ChainApproximation,
    alias_build,
    alias_sample,
    chain_frame,
    reverse_transitions,
    sample_backward,
    sample_forward,
    sample_marginal,
    transition_frame,
)
from backmc.exceptions import UnreachableStateError, ValidationError


def hand_chain(second=None):
    """x0 -> two states -> three states."""
    second = np.array([[0.5, 0.5, 0.0], [0.0, 0.25, 0.75]]) if second is None else second
    return ChainApproximation.from_transitions(
        times=[0.0, 1.0, 2.0],
        grids=[np.array([1.0]), np.array([0.9, 1.1]), np.array([0.8, 1.0, 1.2])],
        forward=[np.array([[0.5, 0.5]]), second],
    )


def two_state_chain(p0, matrix):
    """A chain whose first slice already has the marginal p0."""
    return ChainApproximation(
        times=[0.0, 1.0, 2.0],
        grids=[np.array([1.0]), np.array([0.9, 1.1]), np.array([0.9, 1.1])],
        marginals=[np.array([1.0]), np.asarray(p0), np.asarray(p0) @ np.asarray(matrix)],
        forward=[np.array([p0]), np.asarray(matrix)],
    )


def test_marginals_propagate():
    chain = hand_chain()
    np.testing.assert_allclose(chain.marginals[1], [0.5, 0.5])
    np.testing.assert_allclose(chain.marginals[2], [0.25, 0.375, 0.375])
    assert chain.n == 2 and chain.N == 3 and chain.x0 == 1.0


def test_symmetric_reversal():
    chain = reverse_transitions(two_state_chain([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]))
    np.testing.assert_allclose(chain.marginals[2], [0.5, 0.5])
    np.testing.assert_allclose(chain.backward[1], [[0.9, 0.1], [0.1, 0.9]])


def test_hand_bayes_reversal():
    chain = reverse_transitions(two_state_chain([0.8, 0.2], [[0.5, 0.5], [0.0, 1.0]]))
    np.testing.assert_allclose(chain.marginals[2], [0.4, 0.6])
    np.testing.assert_allclose(chain.backward[1][1], [2 / 3, 1 / 3])
    np.testing.assert_allclose(chain.backward[1][0], [1.0, 0.0])
    for rows in chain.backward:
        np.testing.assert_allclose(rows.sum(axis=1), 1.0)


def test_reversal_returns_a_new_chain():
    chain = hand_chain()
    reversed_chain = reverse_transitions(chain)
    assert not chain.has_backward
    assert reversed_chain.has_backward
    for before, after in zip(chain.forward, reversed_chain.forward):
        np.testing.assert_array_equal(before, after)


def test_unreachable_states_are_masked():
    chain = reverse_transitions(hand_chain(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])))
    np.testing.assert_array_equal(chain.backward_valid[1], [True, False, True])
    assert not chain.backward[1][1].any()
    with pytest.raises(UnreachableStateError):
        sample_backward(chain, 1, 10, np.random.default_rng(0))
    table = chain.backward_table(1)
    with pytest.raises(UnreachableStateError):
        table.sample(np.array([0, 1]), np.random.default_rng(0))


def test_chain_validation():
    with pytest.raises(ValidationError):
        hand_chain(np.array([[0.5, 0.4, 0.0], [0.0, 0.25, 0.75]]))
    with pytest.raises(ValidationError):
        ChainApproximation.from_transitions(
            times=[0.0, 1.0], grids=[np.array([1.0, 2.0]), np.array([1.0, 2.0])], forward=[np.eye(2)]
        )
    with pytest.raises(ValidationError):
        ChainApproximation.from_transitions(
            times=[0.0, 1.0, 2.0],
            grids=[np.array([1.0]), np.array([0.9, 1.1]), np.array([0.8, 1.2])],
            forward=[np.array([[0.5, 0.5]]), np.full((3, 2), 0.5)],
        )
    with pytest.raises(ValidationError):
        sample_backward(hand_chain(), 0, 5, np.random.default_rng(0))


def test_uniform_alias_thresholds():
    table = alias_build(np.full(8, 1 / 8))
    np.testing.assert_allclose(table.prob[0], 1.0)


def test_alias_table_reconstructs_distribution():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    table = alias_build(p)
    n = p.size
    implied = table.prob[0] / n
    for column, target in enumerate(table.alias[0]):
        implied[target] += (1 - table.prob[0][column]) / n
    np.testing.assert_allclose(implied, p, atol=1e-12)


def test_alias_rejects_bad_distributions():
    for bad in (np.array([]), np.array([0.0, 0.0]), np.array([0.5, -0.1, 0.6])):
        with pytest.raises(ValidationError):
            alias_build(bad)


def test_fair_coin_frequencies():
    draws = alias_sample(alias_build(np.array([0.5, 0.5])), np.random.default_rng(11), size=1_000_000)
    assert abs(draws.mean() - 0.5) <= 4 * np.sqrt(0.25 / 1_000_000)


def test_alias_chi_square_goodness_of_fit():
    rng = np.random.default_rng(2024)
    p = rng.dirichlet(np.ones(64))
    draws = alias_sample(alias_build(p), np.random.default_rng(5), size=1_000_000)
    observed = np.bincount(draws, minlength=64)
    expected = p * draws.size
    statistic = ((observed - expected) ** 2 / expected).sum()
    assert statistic < chi2.ppf(0.999, df=63)
    assert isinstance(alias_sample(alias_build(p), rng), int)


def test_backward_paths_start_at_spot_and_end_at_terminal():
    chain = reverse_transitions(hand_chain())
    paths = sample_backward(chain, 1, 2000, np.random.default_rng(1))
    assert paths.n_paths == 2000
    assert np.all(paths.indices[:, 0] == 0)
    assert np.all(paths.indices[:, -1] == 1)
    share = np.mean(paths.indices[:, 1] == 0)
    assert abs(share - 2 / 3) <= 4 * np.sqrt(2 / 9 / 2000)
    values = paths.values()
    assert values.shape == (2000, 3)
    assert set(np.unique(values[:, 2])) == {1.0}


def test_single_step_backward_needs_no_sampling():
    chain = reverse_transitions(ChainApproximation.from_transitions(
        times=[0.0, 1.0], grids=[np.array([1.0]), np.array([0.9, 1.1])], forward=[np.array([[0.3, 0.7]])]
    ))
    paths = sample_backward(chain, 1, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(paths.values(), [[1.0, 1.1]] * 4)


def test_forward_path_frequencies_match_joint_law():
    chain = hand_chain()
    n = 200_000
    paths = sample_forward(chain, n, np.random.default_rng(9))
    joint = {(0, 0): 0.25, (0, 1): 0.25, (1, 1): 0.125, (1, 2): 0.375}
    for (i, j), prob in joint.items():
        freq = np.mean((paths.indices[:, 1] == i) & (paths.indices[:, 2] == j))
        assert abs(freq - prob) <= 4 * np.sqrt(prob * (1 - prob) / n)
    assert not np.any((paths.indices[:, 1] == 0) & (paths.indices[:, 2] == 2))


def test_deterministic_chain_has_one_path():
    chain = reverse_transitions(ChainApproximation.from_transitions(
        times=[0.0, 1.0, 2.0],
        grids=[np.array([1.0]), np.array([1.0, 2.0]), np.array([1.0, 2.0])],
        forward=[np.array([[1.0, 0.0]]), np.eye(2)],
    ))
    forward = sample_forward(chain, 50, np.random.default_rng(0)).values()
    backward = sample_backward(chain, 0, 50, np.random.default_rng(0)).values()
    np.testing.assert_array_equal(forward, 1.0)
    np.testing.assert_array_equal(backward, 1.0)


def test_direct_jump_sampling():
    chain = hand_chain()
    draws = sample_marginal(chain, 2, 100_000, np.random.default_rng(4))
    assert set(np.unique(draws)) <= {0.8, 1.0, 1.2}
    assert abs(np.mean(draws == 0.8) - 0.25) <= 4 * np.sqrt(0.25 * 0.75 / 100_000)
    with pytest.raises(ValidationError):
        sample_marginal(chain, 3, 10, np.random.default_rng(0))


def test_frames():
    chain = hand_chain()
    grid_rows = chain_frame(chain)
    assert list(grid_rows.columns) == ["slice", "node", "time", "point", "marginal"]
    assert len(grid_rows) == 1 + 2 + 3
    transitions = transition_frame(chain)
    assert len(transitions) == 2 + 4
    assert transitions["prob"].sum() == pytest.approx(1.0 + 2.0)
    frame = sample_forward(chain, 3, np.random.default_rng(0)).to_frame()
    assert list(frame.columns) == ["t0", "t1", "t2"]


def test_alias_table_from_matrix_skips_invalid_rows():
    table = AliasTable.from_matrix(np.array([[0.2, 0.8], [0.0, 0.0]]), valid=np.array([True, False]))
    assert table.size == 2
    draws = table.sample(np.zeros(1000, dtype=int), np.random.default_rng(0))
    assert set(np.unique(draws)) <= {0, 1}


def test_backward_paths_match_forward_paths_ending_at_the_same_node():
    rng = np.random.default_rng(17)
    forward = [
        rng.dirichlet(2 * np.ones(3))[None, :],
        rng.dirichlet(2 * np.ones(4), size=3),
        rng.dirichlet(2 * np.ones(4), size=4),
    ]
    chain = reverse_transitions(ChainApproximation.from_transitions(
        times=[0.0, 1.0, 2.0, 3.0],
        grids=[np.array([1.0]), np.linspace(0.9, 1.1, 3), np.linspace(0.8, 1.2, 4), np.linspace(0.7, 1.3, 4)],
        forward=forward,
    ))
    j = 2
    exact = forward[0][0][:, None] * forward[1] * forward[2][:, j][None, :] / chain.marginals[3][j]
    assert exact.sum() == pytest.approx(1.0)
    ahead = sample_forward(chain, 400_000, np.random.default_rng(1)).indices
    ahead = ahead[ahead[:, 3] == j]
    back = sample_backward(chain, j, 100_000, np.random.default_rng(2)).indices
    assert np.all(back[:, 3] == j)
    for i1 in range(3):
        for i2 in range(4):
            p = exact[i1, i2]
            f = np.mean((ahead[:, 1] == i1) & (ahead[:, 2] == i2))
            b = np.mean((back[:, 1] == i1) & (back[:, 2] == i2))
            assert abs(b - p) <= 4 * np.sqrt(p * (1 - p) / len(back)) + 1e-12
            assert abs(f - b) <= 4 * np.sqrt(p * (1 - p) * (1 / len(ahead) + 1 / len(back))) + 1e-12
