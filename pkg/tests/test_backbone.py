import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prolific import BranchingMechanism
from prolific.backbone import Motion, PopulationCapExceeded, poissonize_initial, sample_backbone, sample_forest
from prolific.rng import keyed_rng

QUAD = BranchingMechanism.quadratic(1, 1)
STABLE = BranchingMechanism.stable(1, 1, 1.5)
NEVEU = BranchingMechanism.neveu()


def test_empty_tree():
    tree = sample_backbone(QUAD, 0, 1.0, keyed_rng(0))
    assert tree.size == 0
    assert tree.prolific_count(0.5) == 0
    assert list(tree.nodes()) == []


def test_tree_structure_and_labels():
    tree = sample_backbone(STABLE, 2, 2.0, keyed_rng(1))
    nodes = list(tree.nodes())
    labels = {n.label for n in nodes}
    assert len(labels) == len(nodes)
    by_label = {n.label: n for n in nodes}
    for n in nodes:
        assert n.birth < n.death
        if n.parent is None:
            assert n.birth == 0.0 and "." not in n.label
        else:
            parent = by_label[n.parent]
            assert n.label.rsplit(".", 1)[0] == n.parent
            assert n.birth == parent.death
            assert parent.offspring >= 2
        if math.isinf(n.death):
            assert n.offspring is None
    # every branching produces exactly its offspring count of children
    kids = {}
    for n in nodes:
        if n.parent is not None:
            kids[n.parent] = kids.get(n.parent, 0) + 1
    for n in nodes:
        if n.offspring is not None:
            assert kids.get(n.label, 0) == n.offspring


def test_alive_convention_at_time_zero():
    tree = sample_backbone(QUAD, 3, 1.0, keyed_rng(2))
    assert tree.prolific_count(0.0) == 3


def test_counts_never_decrease():
    forest = sample_forest(STABLE, np.full(200, 2), 1.0, keyed_rng(3))
    counts = forest.prolific_counts(np.linspace(0, 1, 21))
    assert np.all(np.diff(counts, axis=1) >= 0)


def test_mean_population_growth():
    n = 20_000
    forest = sample_forest(QUAD, np.ones(n, dtype=np.int64), 1.0, keyed_rng(4))
    z = forest.prolific_counts([0.5, 1.0]).astype(float)
    for k, t in enumerate((0.5, 1.0)):
        se = z[:, k].std() / math.sqrt(n)
        assert abs(z[:, k].mean() - math.exp(t)) <= 4 * se


def test_lifetimes_are_exponential():
    forest = sample_forest(STABLE, np.ones(5000, dtype=np.int64), 50.0, keyed_rng(5), live_cap=50)
    roots = forest.parent < 0
    life = forest.death[roots] - forest.birth[roots]
    life = life[np.isfinite(life)]
    assert abs(life.mean() - 1 / STABLE.q) <= 4 * life.std() / math.sqrt(life.size)


def test_poissonized_initial_count():
    counts = poissonize_initial(1.0, 1.0, keyed_rng(6), size=100_000)
    assert abs(np.mean(counts == 0) - math.exp(-1)) < 0.006
    with pytest.raises(ValueError):
        poissonize_initial(1.0, 0.0, keyed_rng(6))


def test_cap_raises_with_partial_tree():
    with pytest.raises(PopulationCapExceeded) as info:
        sample_backbone(NEVEU, 1, 5.0, keyed_rng(7), cap=50)
    exc = info.value
    assert exc.capped_from < 5.0
    assert exc.tree.prolific_count(np.nextafter(exc.capped_from, 0)) < 50
    assert np.all(exc.tree.birth < exc.capped_from)


def test_forest_cap_marks_counts():
    forest = sample_forest(NEVEU, np.ones(300, dtype=np.int64), 3.0, keyed_rng(8), live_cap=40)
    counts = forest.prolific_counts([0.5, 3.0])
    capped = forest.capped
    assert capped.any() and not capped.all()
    assert np.all(counts[capped & (forest.cap_time <= 3.0), 1] == -1)
    uncapped = ~capped
    assert np.all(counts[uncapped] >= 1)
    # before its cap time every replicate stays below the cap
    for r in np.flatnonzero(capped)[:10]:
        t = np.nextafter(forest.cap_time[r], 0)
        assert forest.subtree(r).prolific_count(t) < 40


def test_capped_result_matches_uncapped_prefix():
    """Capping only truncates: before the cap time the tree is the same draw."""
    big = sample_forest(STABLE, np.ones(50, dtype=np.int64), 1.0, keyed_rng(9), live_cap=10**6)
    small = sample_forest(STABLE, np.ones(50, dtype=np.int64), 1.0, keyed_rng(9), live_cap=30)
    assert not big.capped.any()
    for r in range(50):
        t = min(small.cap_time[r], 1.0)
        grid = np.linspace(0, t, 5, endpoint=not small.capped[r])
        np.testing.assert_array_equal(big.subtree(r).prolific_counts(grid), small.subtree(r).prolific_counts(grid))


def test_motion_marks():
    tree = sample_backbone(QUAD, 2, 1.0, keyed_rng(10), motion=Motion(dimension=2, sigma=0.5), motion_rng=keyed_rng(11))
    nodes = list(tree.nodes())
    by_label = {n.label: n for n in nodes}
    for n in nodes:
        assert len(n.birth_position) == 2
        if n.parent is not None:
            assert n.birth_position == by_label[n.parent].death_position
    plain = sample_backbone(QUAD, 2, 1.0, keyed_rng(10))
    np.testing.assert_array_equal(plain.death, tree.death)


def test_jsonl_round_trip(tmp_path):
    tree = sample_backbone(QUAD, 1, 1.0, keyed_rng(12))
    lines = tree.to_jsonl(tmp_path / "t.jsonl").read_text().splitlines()
    rows = [json.loads(x) for x in lines]
    assert [r["id"] for r in rows] == tree.labels()


def test_bad_arguments():
    with pytest.raises(ValueError):
        sample_forest(QUAD, [-1], 1.0, keyed_rng(0))
    with pytest.raises(ValueError):
        sample_forest(QUAD, [1], 0.0, keyed_rng(0))
    with pytest.raises(ValueError):
        sample_backbone(QUAD, -1, 1.0, keyed_rng(0))
    with pytest.raises(ValueError):
        sample_backbone(QUAD, 1, 1.0, keyed_rng(0)).prolific_counts([2.0])


@given(n=st.integers(0, 6), seed=st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_forest_initial_counts(n, seed):
    forest = sample_forest(STABLE, [n, 0, n], 0.5, keyed_rng(seed), live_cap=10**5)
    np.testing.assert_array_equal(forest.prolific_counts([0.0])[:, 0], [n, 0, n])
