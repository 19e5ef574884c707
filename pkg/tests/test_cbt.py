import time

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from brainevo.cbt import build_cbt, cumulative_strength, load_cbt, pairwise_distances, save_cbt
from brainevo.errors import ContractError
from brainevo.graph import BrainGraph
from oracles import cbt_loops, random_graph


def _graph_with(n_r, value, conn=(0, 1)):
    w = np.zeros((n_r, n_r))
    w[conn] = w[conn[::-1]] = value
    return BrainGraph(w)


def test_pairwise_distance_is_absolute_difference():
    H = pairwise_distances([_graph_with(3, 0.2), _graph_with(3, 0.5)])
    assert H[0, 1][0, 1] == pytest.approx(0.3)
    assert H[0, 1][1, 0] == pytest.approx(0.3)
    assert H.n_c == 2


def test_identical_population_has_zero_distances(rng):
    g = BrainGraph(random_graph(rng, 4))
    H = pairwise_distances([g, g, g])
    assert not H.values.any()
    assert not cumulative_strength(H).any()


def test_pairwise_distances_match_double_loop(rng):
    pop = [random_graph(rng, 4) for _ in range(5)]
    H = pairwise_distances([BrainGraph(w) for w in pop]).values
    for i in range(4):
        for j in range(4):
            for s in range(5):
                for t in range(5):
                    assert H[i, j, s, t] == abs(pop[s][i][j] - pop[t][i][j])


def test_single_subject_is_refused(rng):
    with pytest.raises(ContractError):
        pairwise_distances([BrainGraph(random_graph(rng, 3))])
    with pytest.raises(ContractError):
        build_cbt([BrainGraph(random_graph(rng, 3))])


def test_cumulative_strength_hand_example():
    pop = [_graph_with(2, v) for v in (0.1, 0.2, 0.4)]
    M = cumulative_strength(pairwise_distances(pop))
    np.testing.assert_allclose(M[0, 1], [0.4, 0.3, 0.5], rtol=0, atol=1e-15)


def test_cumulative_strength_is_permutation_equivariant(rng):
    pop = [BrainGraph(random_graph(rng, 4)) for _ in range(6)]
    perm = rng.permutation(6)
    M = cumulative_strength(pairwise_distances(pop))
    Mp = cumulative_strength(pairwise_distances([pop[p] for p in perm]))
    np.testing.assert_allclose(Mp, M[..., perm], rtol=0, atol=1e-14)


def test_identical_population_gives_common_graph(rng):
    g = BrainGraph(random_graph(rng, 5))
    assert build_cbt([g, g, g, g]).template == g


def test_hand_example_three_subjects_two_connections():
    # n_r = 3 gives connections (0,1), (0,2), (1,2); the medoid differs between them
    vals = {(0, 1): (0.1, 0.2, 0.4), (0, 2): (0.9, 0.3, 0.35), (1, 2): (0.5, 0.5, 0.5)}
    pop = []
    for s in range(3):
        w = np.zeros((3, 3))
        for (i, j), v in vals.items():
            w[i, j] = w[j, i] = v[s]
        pop.append(w)
    cbt = build_cbt([BrainGraph(w) for w in pop])
    expected, pick = cbt_loops(pop)
    np.testing.assert_array_equal(cbt.template.weights, expected)
    assert cbt.argmin[0, 1] == 1 and cbt.argmin[0, 2] == 2 and cbt.argmin[1, 2] == 0


def test_two_subject_tie_selects_first(rng):
    a, b = random_graph(rng, 5), random_graph(rng, 5)
    cbt = build_cbt([BrainGraph(a), BrainGraph(b)])
    np.testing.assert_array_equal(cbt.template.weights, a)
    assert not cbt.argmin.any()


def test_even_population_middle_tie_goes_to_lower_index():
    # both middle values (0.2 at index 3, 0.3 at index 0) have the same summed distance
    pop = [_graph_with(2, v) for v in (0.3, 0.1, 0.4, 0.2)]
    cbt = build_cbt(pop)
    assert cbt.argmin[0, 1] == 0 and cbt.template.weights[0, 1] == 0.3
    pop = [_graph_with(2, v) for v in (0.1, 0.2, 0.4, 0.3)]
    assert build_cbt(pop).argmin[0, 1] == 1


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3, 5, 8]), st.sampled_from([4, 6]), st.integers(0, 2**31 - 1))
def test_entries_come_from_population(n_c, n_r, seed):
    rng = np.random.default_rng(seed)
    pop = [random_graph(rng, n_r) for _ in range(n_c)]
    cbt = build_cbt([BrainGraph(w) for w in pop])
    for i in range(n_r):
        for j in range(n_r):
            if i != j:
                assert cbt.template.weights[i, j] == pop[cbt.argmin[i, j]][i, j]
                assert cbt.template.weights[i, j] in {w[i, j] for w in pop}


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([3, 5, 7]), st.integers(0, 2**31 - 1))
def test_permutation_invariant_without_ties(n_c, seed):
    rng = np.random.default_rng(seed)
    pop = [BrainGraph(random_graph(rng, 4)) for _ in range(n_c)]
    # even populations always tie between the two middle values
    M = np.sort(cumulative_strength(pairwise_distances(pop))[np.triu_indices(4, 1)], axis=-1)
    assume(np.all(M[:, 1] - M[:, 0] > 1e-9))
    perm = rng.permutation(n_c)
    assert build_cbt([pop[p] for p in perm]).template == build_cbt(pop).template


def test_full_size_population_is_fast(rng):
    pop = [BrainGraph(random_graph(rng, 35)) for _ in range(23)]
    t = time.perf_counter()
    cbt = build_cbt(pop)
    assert time.perf_counter() - t < 5.0
    assert cbt.template.n_r == 35 and len(cbt.source_ids) == 23


def test_save_and_load(tmp_path, rng):
    pop = [BrainGraph(random_graph(rng, 4)) for _ in range(3)]
    cbt = build_cbt(pop, ["a", "b", "c"])
    path = save_cbt(cbt, tmp_path)
    back = load_cbt(path)
    assert back.template == cbt.template
    assert back.source_ids == ("a", "b", "c")
    np.testing.assert_array_equal(back.argmin, cbt.argmin)
    assert "source_ids=a,b,c" in (tmp_path / "cbt_provenance.txt").read_text()
