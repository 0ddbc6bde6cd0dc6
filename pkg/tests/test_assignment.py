import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dvis.assignment import brute_force_min, cosine_cost, hungarian_min, match_adjacent, pairwise_cost
from dvis.errors import DimensionError, InfeasibleError
from dvis.synth import SynthConfig, generate_video


def test_trivial_cases():
    a = hungarian_min([[0.0]])
    assert a.mapping.tolist() == [0] and a.total_cost == 0.0
    b = hungarian_min([[1.0, 0.0], [0.0, 1.0]])
    assert b.mapping.tolist() == [1, 0] and b.total_cost == 0.0


def test_random_5x5_integer_against_permutations():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = rng.integers(0, 20, size=(5, 5)).astype(float)
        best = min(sum(c[i, p[i]] for i in range(5)) for p in itertools.permutations(range(5)))
        got = hungarian_min(c)
        assert got.total_cost == best
        assert got.mapping.tolist() == brute_force_min(c).mapping.tolist()


def test_ties_break_lexicographically():
    assert hungarian_min(np.zeros((3, 3))).mapping.tolist() == [0, 1, 2]
    c = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 5.0]])
    # optima: (0,2,1),(1,2,0),(2,0,1),(2,1,0) at cost 1; lexicographic smallest is (0,2,1)
    assert hungarian_min(c).mapping.tolist() == brute_force_min(c).mapping.tolist()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(st.just(n), st.integers(n, 6))).flatmap(
    lambda nm: arrays(np.float64, nm, elements=st.integers(-5, 5).map(float))
))
def test_rectangular_matches_brute_force(c):
    got, ref = hungarian_min(c), brute_force_min(c)
    assert got.total_cost == ref.total_cost
    assert got.mapping.tolist() == ref.mapping.tolist()
    assert len(set(got.mapping.tolist())) == len(got.mapping)


def test_forbidden_pairs_avoided():
    inf = np.inf
    c = np.array([[inf, 1.0, 5.0], [2.0, inf, inf], [1.0, 1.0, inf]])
    a = hungarian_min(c)
    assert np.isfinite(c[np.arange(3), a.mapping]).all()
    assert a.total_cost == brute_force_min(c).total_cost


def test_infeasible_and_shape_errors():
    with pytest.raises(InfeasibleError):
        hungarian_min([[np.inf, np.inf], [0.0, 1.0]])
    with pytest.raises(InfeasibleError):
        hungarian_min([[np.inf, 0.0], [np.inf, 0.0]])
    with pytest.raises(DimensionError):
        hungarian_min(np.zeros((3, 2)))


def test_cosine_cost_closed_forms():
    eye = np.eye(4)
    np.testing.assert_allclose(cosine_cost(eye, eye), 1.0 - eye, atol=1e-15)
    A = np.random.default_rng(1).standard_normal((3, 5))
    np.testing.assert_allclose(np.diag(cosine_cost(A, -A)), 2.0, atol=1e-12)


def test_cosine_cost_formula():
    rng = np.random.default_rng(2)
    A, B = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    ref = np.array([[1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for b in B] for a in A])
    np.testing.assert_allclose(cosine_cost(A, B), ref, atol=1e-12)


def test_cosine_cost_zero_row_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="dvis"):
        c = cosine_cost(np.zeros((1, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(c, 1.0)
    assert "zero-norm" in caplog.text


def test_negative_dot_metric():
    A = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(pairwise_cost(A, A, "negative-dot"), [[-5.0]])
    with pytest.raises(ValueError):
        pairwise_cost(A, A, "euclid")


def test_match_adjacent_exact_copies():
    rng = np.random.default_rng(3)
    prev = rng.standard_normal((6, 8))
    pi = rng.permutation(6)
    cur = prev[pi]
    out, perm = match_adjacent(prev, cur)
    np.testing.assert_array_equal(out, prev)
    np.testing.assert_array_equal(perm, np.argsort(pi))
    _, ident = match_adjacent(prev, prev)
    np.testing.assert_array_equal(ident, np.arange(6))


def test_match_adjacent_first_frame_unchanged():
    cur = np.arange(6.0).reshape(3, 2)
    out, perm = match_adjacent(None, cur)
    np.testing.assert_array_equal(out, cur)
    np.testing.assert_array_equal(perm, [0, 1, 2])


def test_match_adjacent_recovers_planted_permutation():
    cfg = SynthConfig(T=2, N_slots=6, N_inst=6, sigma_obs=0.05, sigma_motion=0.0, occlusion_prob=0.0, distractor_prob=0.0)
    v = generate_video(cfg, 0)
    _, perm = match_adjacent(v.queries[0], v.queries[1])
    # slot perm[n] of frame 1 carries the instance of slot n of frame 0
    np.testing.assert_array_equal(v.planted[1][perm], v.planted[0])


def test_match_adjacent_inverse_and_prepermutation_invariance():
    rng = np.random.default_rng(4)
    prev = rng.standard_normal((5, 8))
    cur = prev[rng.permutation(5)] + 0.05 * rng.standard_normal((5, 8))
    _, p = match_adjacent(prev, cur)
    _, q = match_adjacent(cur, prev)
    np.testing.assert_array_equal(p[q], np.arange(5))
    sigma = rng.permutation(5)
    out1, _ = match_adjacent(prev, cur)
    out2, _ = match_adjacent(prev, cur[sigma])
    np.testing.assert_array_equal(out1, out2)
