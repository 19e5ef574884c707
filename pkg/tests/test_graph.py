import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainevo.errors import ContractError, LoadError, ValidationError
from brainevo.graph import (
    BrainGraph,
    LongitudinalDataset,
    SubjectTrajectory,
    devectorize,
    format_number,
    load_dataset,
    read_matrix,
    save_dataset,
    vectorize,
    write_matrix,
)
from oracles import random_graph


def _dataset(rng, n_subjects=2, n_t=3, n_r=4, test=()):
    subjects = []
    for s in range(n_subjects):
        split = "test" if s in test else "train"
        graphs = [BrainGraph(random_graph(rng, n_r)) for _ in range(n_t)]
        subjects.append(SubjectTrajectory(f"sub{s}", graphs, split))
    return LongitudinalDataset(subjects)


def test_round_trip_small_dataset(tmp_path, rng):
    ds = _dataset(rng)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.n_r == 4 and back.T == 2
    assert back == ds


def test_round_trip_is_bit_exact_with_awkward_values(tmp_path):
    w = np.zeros((3, 3))
    vals = [1e-300, 0.1 + 0.2, np.nextafter(1.0, 0.0)]
    for (i, j), v in zip([(0, 1), (0, 2), (1, 2)], vals):
        w[i, j] = w[j, i] = v
    write_matrix(tmp_path / "m.csv", w)
    text = (tmp_path / "m.csv").read_text()
    assert "e" not in text.lower()
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.csv"), w)


def test_byte_output_is_deterministic(tmp_path, rng):
    ds = _dataset(rng, n_subjects=3, test=(2,))
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_empty_dataset_is_refused(tmp_path):
    with pytest.raises(ContractError):
        save_dataset(LongitudinalDataset([]), tmp_path)


def test_out_of_range_entry_names_cell(tmp_path, rng):
    save_dataset(_dataset(rng), tmp_path)
    w = read_matrix(tmp_path / "sub1_t1.csv")
    w[2, 3] = w[3, 2] = 1.5
    write_matrix(tmp_path / "sub1_t1.csv", w)
    with pytest.raises(ValidationError, match=r"row 2, col 3"):
        load_dataset(tmp_path)


def test_asymmetric_input_is_rejected(tmp_path, rng):
    save_dataset(_dataset(rng), tmp_path)
    w = read_matrix(tmp_path / "sub0_t0.csv")
    w[0, 1] = 0.25
    w[1, 0] = 0.5
    write_matrix(tmp_path / "sub0_t0.csv", w)
    with pytest.raises(ValidationError, match="asymmetric"):
        load_dataset(tmp_path)


def test_missing_training_timepoint_names_subject(tmp_path, rng):
    save_dataset(_dataset(rng), tmp_path)
    (tmp_path / "sub1_t2.csv").unlink()
    with pytest.raises(LoadError, match=r"sub1.*t2"):
        load_dataset(tmp_path)


def test_testing_subject_may_have_baseline_only(tmp_path, rng):
    ds = _dataset(rng, n_subjects=3)
    short = SubjectTrajectory("probe", ds.trajectories[0].graphs[:1], "test")
    ds = ds.with_trajectories(ds.trajectories + [short])
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.m == 1 and len(back.test[0].graphs) == 1


def test_split_bookkeeping(rng):
    ds = _dataset(rng, n_subjects=5, test=(1, 3))
    assert (ds.n, ds.m) == (3, 2)
    assert ds.split == {"sub0": "train", "sub1": "test", "sub2": "train", "sub3": "test", "sub4": "train"}


def test_full_size_dataset(rng):
    # 114 subjects, 35 ROIs, two visits
    subjects = [
        SubjectTrajectory(f"s{s}", [BrainGraph(random_graph(rng, 35)) for _ in range(2)], "train" if s < 91 else "test")
        for s in range(114)
    ]
    ds = LongitudinalDataset(subjects)
    assert (ds.n, ds.m, ds.n_r, ds.T) == (91, 23, 35, 1)


def test_vectorize_definition():
    w = np.array([[0, 0.1, 0.2], [0.1, 0, 0.3], [0.2, 0.3, 0]])
    np.testing.assert_array_equal(vectorize(BrainGraph(w)), [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(vectorize(BrainGraph(np.zeros((3, 3)))), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_vectorize_round_trip(n_r, seed):
    g = BrainGraph(random_graph(np.random.default_rng(seed), n_r))
    v = vectorize(g)
    assert v.shape == (n_r * (n_r - 1) // 2,)
    assert devectorize(v, n_r) == g
    np.testing.assert_array_equal(vectorize(devectorize(v, n_r)), v)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_vectorize_is_injective(n_r, seed):
    rng = np.random.default_rng(seed)
    a, b = random_graph(rng, n_r), random_graph(rng, n_r)
    assert (vectorize(BrainGraph(a)) == vectorize(BrainGraph(b))).all() == np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 6),
    st.integers(0, 2**31 - 1),
    st.sampled_from(["asym", "diag", "high", "low", "nan"]),
)
def test_violations_are_rejected(n_r, seed, kind):
    rng = np.random.default_rng(seed)
    w = random_graph(rng, n_r)
    i, j = 0, 1 + int(rng.integers(n_r - 1))
    if kind == "asym":
        w[i, j] = (w[j, i] + 0.5) % 1.0
    elif kind == "diag":
        w[j, j] = 0.5
    elif kind == "high":
        w[i, j] = w[j, i] = 1.0 + rng.uniform(1e-9, 1.0)
    elif kind == "low":
        w[i, j] = w[j, i] = -rng.uniform(1e-9, 1.0)
    else:
        w[i, j] = w[j, i] = np.nan
    with pytest.raises(ValidationError):
        BrainGraph(w)


def test_brain_graph_is_read_only(rng):
    g = BrainGraph(random_graph(rng, 4))
    with pytest.raises(ValueError):
        g.weights[0, 1] = 0.0


def test_format_number_is_positional():
    assert format_number(0.0) == "0"
    assert format_number(-0.0) == "0"
    assert format_number(1.0) == "1"
    assert format_number(2.5e-7) == "0.00000025"
