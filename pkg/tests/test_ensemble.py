import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dermens.ensemble import (
    FUSERS,
    ScoreTable,
    SelectionTrace,
    average_fusion,
    forward_selection,
    greedy_selection,
    vote_fusion,
)
from dermens.errors import ContractError, ValidationError
from dermens.metrics import average_precision


def table(scores, labels=None, names=None):
    scores = np.atleast_2d(np.asarray(scores, float))
    n, k = scores.shape
    return ScoreTable([f"s{i}" for i in range(n)], names or [f"WI:f{j}" for j in range(k)], scores, labels)


def synthetic(seed=0, n=60, noise=3):
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(n // 2, int), np.zeros(n - n // 2, int)]
    y = y[rng.permutation(n)]
    cols = [rng.random(n) for _ in range(noise)]
    cols.insert(1, y.astype(float))  # informative component sits in the middle
    names = ["WI:noise_a", "CR:perfect", "WI:noise_b", "CRGT:noise_c"][: noise + 1]
    return table(np.column_stack(cols), y, names)


# -- fusion -------------------------------------------------------------------


def test_average_examples():
    t = table([[0.2, 0.8], [0.3, 0.3]])
    assert average_fusion(t).tolist() == [0.5, 0.3]
    assert average_fusion(t, [1]).tolist() == [0.8, 0.3]


def test_vote_examples():
    t = table([[0.9, 0.6, 0.1], [0.1, 0.2, 0.3]])
    assert vote_fusion(t).tolist() == [2 / 3, 0.0]
    assert vote_fusion(table([[0.5]])).tolist() == [1.0]


def test_empty_subset():
    t = table([[0.2, 0.8]])
    for fuse in FUSERS.values():
        with pytest.raises(ContractError):
            fuse(t, [])


def test_scores_outside_unit_interval():
    with pytest.raises(ContractError):
        table([[1.2]])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(0, 1)))
def test_average_between_min_and_max(s):
    out = average_fusion(table(s))
    assert np.all(out >= s.min(axis=1) - 1e-15) and np.all(out <= s.max(axis=1) + 1e-15)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(0, 1)))
def test_vote_invariant_to_threshold_preserving_rescale(s):
    # x -> x**3 is strictly increasing on [0, 1] and keeps x >= t iff x**3 >= t**3
    assert np.array_equal(vote_fusion(table(s), threshold=0.5), vote_fusion(table(s**3), threshold=0.125))


def test_table_csv_roundtrip():
    t = synthetic()
    t.splits = ["train"] * 60
    text = t.to_csv({"fused": average_fusion(t)})
    back = ScoreTable.from_csv(text)
    assert back.components == t.components
    assert np.array_equal(back.scores, t.scores) and np.array_equal(back.labels, t.labels)
    assert text.splitlines()[0].startswith("sample_id,split,label,WI:noise_a")


def test_table_csv_errors():
    with pytest.raises(ValidationError):
        ScoreTable.from_csv("")
    with pytest.raises(ValidationError):
        ScoreTable.from_csv("id,label\n")
    with pytest.raises(ValidationError):
        ScoreTable.from_csv("sample_id,split,label,WI:a\ns0,train,1\n")


# -- selection ----------------------------------------------------------------


def test_greedy_finds_perfect_component():
    t = synthetic()
    subset, trace = greedy_selection(t, 3, 0)
    assert trace.rows[0]["component"] == "CR:perfect"
    assert t.components.index("CR:perfect") in subset
    assert average_precision(average_fusion(t, subset), t.labels) == 1.0
    ind = [r["individual_ap"] for r in trace.rows]
    assert all(a >= b for a, b in zip(ind, ind[1:]))


def test_greedy_single_component():
    t = table(np.array([[0.1], [0.9], [0.2], [0.8], [0.3], [0.7]]), [0, 1, 0, 1, 0, 1])
    assert greedy_selection(t, 3, 0)[0] == [0]


def test_greedy_trace_csv_roundtrip():
    _, trace = greedy_selection(synthetic(), 3, 0)
    back = SelectionTrace.from_csv(trace.to_csv())
    assert back.kind == "greedy" and back.rows == trace.rows


def test_forward_picks_perfect_and_halts():
    t = synthetic()
    subset, trace = forward_selection(t, 3, 0)
    assert subset == [t.components.index("CR:perfect")]
    assert trace.rows[0]["chosen"] == "CR:perfect" and trace.rows[0]["ap"] == 1.0
    assert len(trace.rows) == 2 and not trace.rows[-1]["accepted"]


def test_forward_duplicate_component():
    rng = np.random.default_rng(1)
    y = rng.permutation(np.r_[np.ones(15, int), np.zeros(15, int)])
    signal = np.clip(0.5 * y + 0.5 * rng.random(30), 0, 1)
    t = table(np.column_stack([signal, signal, rng.random(30)]), y, ["WI:a", "WI:b", "WI:noise"])
    subset, trace = forward_selection(t, 3, 0)
    assert len(trace.rows) <= 2
    assert not ({0, 1} <= set(subset))


def test_forward_path_strictly_increasing():
    rng = np.random.default_rng(2)
    y = rng.permutation(np.r_[np.ones(20, int), np.zeros(20, int)])
    cols = [np.clip(0.3 * y + rng.random(40) * 0.9, 0, 1) for _ in range(5)]
    t = table(np.column_stack(cols), y)
    _, trace = forward_selection(t, 3, 5)
    path = [r["ap"] for r in trace.rows if r["accepted"]]
    assert all(b > a for a, b in zip(path, path[1:]))
    back = SelectionTrace.from_csv(trace.to_csv())
    assert [r["candidates"] for r in back.rows] == [r["candidates"] for r in trace.rows]


def test_selection_deterministic():
    t = synthetic(3)
    assert greedy_selection(t, 3, 7)[0] == greedy_selection(t, 3, 7)[0]
    assert forward_selection(t, 3, 7)[0] == forward_selection(t, 3, 7)[0]


def test_selection_needs_labels_and_classes():
    t = table(np.random.default_rng(0).random((6, 2)))
    with pytest.raises(ContractError):
        greedy_selection(t)
    t = table(np.random.default_rng(0).random((6, 2)), [1, 1, 1, 1, 1, 0])
    with pytest.raises(ContractError):
        forward_selection(t)
