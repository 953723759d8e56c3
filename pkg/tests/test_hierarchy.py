import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdan.exceptions import ContractError, HierarchyParseError
from mdan.hierarchy import (SHIPPED, aggregate_to_parent, hierarchical_confusion, leaf_to_path, leaves_to_paths,
                            load_hierarchy, parse_hierarchy, violation_count, violation_counts)

EKMAN = load_hierarchy("ekman")
PARROTT = load_hierarchy("parrott")


def test_binary_from_two_lines():
    h = parse_hierarchy("1\tpositive\t-\n1\tnegative\t-\n")
    assert h.depth == 1 and h.names(1) == ["positive", "negative"]


def test_shipped_shapes():
    sizes = {name: load_hierarchy(name).level_sizes for name in SHIPPED}
    assert sizes == {"binary": (2,), "ekman": (2, 6), "mikels": (2, 8), "parrott": (2, 6, 25)}


def test_ekman_and_mikels_groupings():
    assert EKMAN.names(2) == ["happiness", "surprise", "anger", "disgust", "fear", "sadness"]
    assert EKMAN.parent_index(2).tolist() == [0, 0, 1, 1, 1, 1]
    mikels = load_hierarchy("mikels")
    pos = [mikels.names(2)[k] for k in mikels.children_of(2, 0)]
    assert pos == ["amusement", "awe", "contentment", "excitement"]


def test_parrott_positive_children():
    assert [PARROTT.names(2)[k] for k in PARROTT.children_of(2, 0)] == ["joy", "love", "surprise"]
    assert [len(PARROTT.children_of(3, j)) for j in range(6)] == [7, 3, 1, 6, 6, 2]


def test_comments_and_blank_lines_ignored():
    h = parse_hierarchy("# tree\n\n1\ta\t-  # top\n2\tb\ta\n")
    assert h.level_sizes == (1, 1)


@pytest.mark.parametrize("text, line, msg", [
    ("1\ta\t-\n2\tb\tzzz\n", 2, "not defined"),
    ("1\ta\t-\n1\ta\t-\n", 2, "duplicate"),
    ("1\ta\t-\n3\tb\ta\n", 2, "level 2 has no nodes"),
    ("1\ta\tb\n", 1, "parent '-'"),
    ("1\ta\t-\n2\tb\t-\n", 2, "needs a parent"),
    ("1\ta\t-\n2\tb\ta\n3\tc\ta\n", 3, "expected level 2"),
    ("1\ta\t-\nx\tb\ta\n", 2, "not an integer"),
    ("1 a -\n", 1, "expected"),
    ("1\ta\t-\n1\tb\t-\n2\tc\ta\n", 2, "no children"),
])
def test_parse_errors_carry_line(text, line, msg):
    with pytest.raises(HierarchyParseError, match=msg) as err:
        parse_hierarchy(text)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}:")


def test_round_trip_text():
    for name in SHIPPED:
        h = load_hierarchy(name)
        again = parse_hierarchy(h.to_text())
        assert again.levels == h.levels and [n.name for n in again.nodes] == [n.name for n in h.nodes]


def test_leaf_paths():
    assert EKMAN.names(1)[leaf_to_path(EKMAN, EKMAN.names(2).index("sadness"))[0]] == "negative"
    binary = load_hierarchy("binary")
    assert leaf_to_path(binary, 1).tolist() == [1]
    joy_leaf = PARROTT.names(3).index("joy.1")
    path = leaf_to_path(PARROTT, joy_leaf)
    assert [PARROTT.names(lv + 1)[i] for lv, i in enumerate(path)] == ["positive", "joy", "joy.1"]
    with pytest.raises(IndexError):
        leaves_to_paths(EKMAN, [6])


def test_aggregate_examples():
    h = parse_hierarchy("1\tA\t-\n1\tB\t-\n2\ta\tA\n2\tb\tA\n2\tc\tB\n2\td\tB\n")
    np.testing.assert_allclose(aggregate_to_parent(h, [0.2, 0.3, 0.1, 0.4], 2), [0.5, 0.5], atol=1e-15)
    assert aggregate_to_parent(h, [0, 0, 1, 0], 2).tolist() == [0.0, 1.0]
    np.testing.assert_allclose(aggregate_to_parent(EKMAN, np.full(6, 1 / 6), 2), [2 / 6, 4 / 6], atol=1e-15)


def test_aggregate_contracts():
    with pytest.raises(ContractError):
        aggregate_to_parent(EKMAN, np.full(6, 0.2), 2)
    with pytest.raises(ContractError):
        aggregate_to_parent(EKMAN, np.full(5, 0.2), 2)
    with pytest.raises(ContractError):
        aggregate_to_parent(EKMAN, [0.5, 0.5], 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=25, max_size=25).filter(lambda v: sum(v) > 1e-3),
       st.integers(0, 2**32 - 1))
def test_aggregate_mass_and_sibling_permutation(raw, seed):
    p = np.array(raw) / np.sum(raw)
    up = aggregate_to_parent(PARROTT, p, 3)
    assert abs(up.sum() - p.sum()) <= 1e-12
    # permuting siblings leaves parent mass unchanged
    rng = np.random.default_rng(seed)
    q = p.copy()
    for j in range(6):
        kids = PARROTT.children_of(3, j)
        q[kids] = p[rng.permutation(kids)]
    np.testing.assert_allclose(aggregate_to_parent(PARROTT, q, 3), up, atol=1e-15)
    # the argmax child's parent carries at least that child's mass
    k = int(p.argmax())
    assert up[PARROTT.parent_index(3)[k]] >= p[k]


def test_violation_examples():
    pos, sad = EKMAN.names(1).index("positive"), EKMAN.names(2).index("sadness")
    assert violation_count(EKMAN, [pos, sad]) == 1
    assert violation_count(EKMAN, [pos, EKMAN.names(2).index("surprise")]) == 0
    fear_leaf = PARROTT.names(3).index("fear.1")
    assert violation_count(PARROTT, [1, 0, fear_leaf]) == 2  # negative, joy, fear.1


def test_leaf_paths_never_violate():
    for name in SHIPPED:
        h = load_hierarchy(name)
        paths = leaves_to_paths(h, np.arange(h.level_sizes[-1]))
        assert violation_counts(h, paths).sum() == 0


def test_confusion_perfect_and_constant():
    t = np.array([0, 1, 2, 3, 4, 5])
    cm, mass = hierarchical_confusion(EKMAN, t, t, 2)
    assert (cm == np.eye(6, dtype=int)).all() and mass == 0.0
    cm, _ = hierarchical_confusion(EKMAN, t, np.full(6, 3), 2)
    assert cm[:, 3].tolist() == [1] * 6 and cm.sum() == cm[:, 3].sum()


def test_confusion_hand_built_case():
    # happiness surprise anger disgust fear sadness = 0..5; six errors, two of them across the polarity line
    truths = np.array([0, 1, 2, 3, 4, 5])
    preds = np.array([1, 2, 3, 4, 5, 0])
    cm, mass = hierarchical_confusion(EKMAN, truths, preds, 2)
    assert mass == pytest.approx(2 / 6)
    expected = np.zeros((6, 6), dtype=int)
    expected[truths, preds] = 1
    assert (cm == expected).all()


def test_confusion_level_one_has_no_cross_parent_mass():
    _, mass = hierarchical_confusion(EKMAN, np.array([0, 1]), np.array([1, 0]), 1)
    assert mass == 0.0
