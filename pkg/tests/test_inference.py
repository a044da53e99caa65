import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DIATOM_ORDERS, random_tree, tiny_model
from hiertax.errors import DataError
from hiertax.inference import (
    decode_beam,
    decode_greedy,
    decode_levelwise,
    flat_lookup,
    predict,
    read_predictions,
    write_predictions,
)
from hiertax.model import CascadeModel, masked_softmax
from hiertax.numerics import make_rng
from hiertax.taxonomy import Level, TaxonomyTree
from hiertax.training import teacher_forcing_masks


class FixedLogits(CascadeModel):
    """Cascade whose heads emit preset logits, independent of their input."""

    def __init__(self, variant, tree, logits):
        super().__init__(variant, tree.counts, 1, taxonomy_checksum=tree.checksum)
        self.fixed = {lv: np.asarray(z, dtype=float) for lv, z in logits.items()}

    def head_logits(self, level, backbone, ancestor_probs, training=False, rng=None):
        return np.tile(self.fixed[level], (len(backbone), 1))


def exhaustive_best(model, tree, x):
    """Max-product root-to-leaf path by scoring every species path."""
    depth = len(model.levels)
    paths = np.unique(tree.species_paths[:, :depth], axis=0)
    xs = np.repeat(x[None], len(paths), axis=0)
    out = model.forward(xs, teacher_forcing_masks(tree, paths, model.levels))
    rows = np.arange(len(paths))
    with np.errstate(divide="ignore"):
        scores = sum(np.log(out[lv].probs[rows, paths[:, lv]]) for lv in model.levels)
    best = max(range(len(paths)), key=lambda i: (scores[i], tuple(-paths[i])))
    return tuple(int(v) for v in paths[best]), float(scores[best])


def diatom_logits(tree, order_overrides=None):
    z = np.empty(tree.n(Level.ORDER))
    for name, _, logit in DIATOM_ORDERS:
        z[tree.index_of(Level.ORDER, name)] = (order_overrides or {}).get(name, logit)
    c = np.full(tree.n(Level.CLASS), -1.0)
    c[tree.index_of(Level.CLASS, "Bacillariophyceae")] = 2.0
    return {Level.CLASS: c, Level.ORDER: z}


# greedy ------------------------------------------------------------------


def test_greedy_diatom_keeps_inside_predicted_class(diatom_tree):
    model = FixedLogits("h-co", diatom_tree, diatom_logits(diatom_tree, {"Thalassiosirales": 5.0}))
    pred = decode_greedy(model, diatom_tree, np.zeros((1, 1)))[0]
    order = diatom_tree.names[Level.ORDER][pred.labels[Level.ORDER]]
    assert order == "Naviculales"
    assert pred.path_valid
    assert pred.probs[Level.ORDER][pred.labels[Level.ORDER]] == pytest.approx(0.7294, abs=1e-4)


def test_greedy_forced_through_single_child_chain():
    tree = TaxonomyTree.from_name_paths([("A", "o1", "f1", "g1", "s1"), ("B", "o2", "f2", "g2", "s2")])
    logits = {lv: make_rng(lv).normal(size=tree.n(lv)) * 10 for lv in Level}
    logits[Level.CLASS] = np.array([0.0, 1.0])
    model = FixedLogits("h-cofgs", tree, logits)
    pred = decode_greedy(model, tree, np.zeros((1, 1)))[0]
    assert pred.labels == tuple(int(v) for v in tree.species_paths[1])
    assert pred.path_score == pytest.approx(np.log(masked_softmax(np.array([0.0, 1.0]))[1]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_greedy_paths_always_valid(seed):
    tree = random_tree(seed)
    model = tiny_model("h-cofgs", tree, seed=seed)
    preds = decode_greedy(model, tree, make_rng(seed).normal(size=(40, 4)) * 3)
    assert preds.path_valid.all()
    for row in preds.labels:
        assert tree.is_valid_path(row)


def test_greedy_rejects_flat_model():
    tree = random_tree(0)
    with pytest.raises(DataError, match="hierarchical"):
        decode_greedy(tiny_model("f-s", tree), tree, np.zeros((1, 4)))


# level-wise --------------------------------------------------------------


def test_levelwise_diatom_produces_invalid_path(diatom_tree):
    model = FixedLogits("h-co", diatom_tree, diatom_logits(diatom_tree, {"Thalassiosirales": 5.0}))
    pred = decode_levelwise(model, diatom_tree, np.zeros((1, 1)))[0]
    assert diatom_tree.names[Level.CLASS][pred.labels[0]] == "Bacillariophyceae"
    assert diatom_tree.names[Level.ORDER][pred.labels[1]] == "Thalassiosirales"
    assert not pred.path_valid


def test_levelwise_matches_greedy_when_heads_agree(diatom_tree):
    model = FixedLogits("h-co", diatom_tree, diatom_logits(diatom_tree))
    a = decode_levelwise(model, diatom_tree, np.zeros((1, 1)))
    b = decode_greedy(model, diatom_tree, np.zeros((1, 1)))
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.path_valid.all()


@pytest.mark.parametrize("feed_masked", [False, True])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_levelwise_invalid_exactly_where_argmax_leaves_parent(seed, feed_masked):
    tree = random_tree(seed)
    model = tiny_model("h-cofgs", tree, seed=seed)
    x = make_rng(seed).normal(size=(30, 4)) * 3
    lw = decode_levelwise(model, tree, x, feed_masked=feed_masked)
    greedy = decode_greedy(model, tree, x)
    differs = np.zeros(len(x), bool)
    for lv in list(Level)[1:]:
        allowed = tree.mask_matrix(lv)[lw.labels[:, lv - 1]]
        masked_arg = np.argmax(np.where(allowed, lw.probs[lv], -1.0), axis=1)
        differs |= masked_arg != lw.labels[:, lv]
    np.testing.assert_array_equal(~lw.path_valid, differs)
    same = (lw.labels == greedy.labels).all(axis=1)
    assert lw.path_valid[same].all()


# beam --------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_beam_width_one_is_greedy(seed):
    tree = random_tree(seed)
    model = tiny_model("h-cofgs", tree, seed=seed)
    x = make_rng(seed).normal(size=(10, 4)) * 3
    beam, greedy = decode_beam(model, tree, x, k=1), decode_greedy(model, tree, x)
    np.testing.assert_array_equal(beam.labels, greedy.labels)
    np.testing.assert_allclose(beam.path_score, greedy.path_score, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["h-co", "h-cof", "h-cofg", "h-cofgs"]))
def test_saturated_beam_is_exhaustive_search(seed, variant):
    tree = random_tree(seed)
    model = tiny_model(variant, tree, seed=seed)
    x = make_rng(seed).normal(size=(3, 4)) * 3
    beam = decode_beam(model, tree, x, k=tree.n(Level.SPECIES))
    depth = len(model.levels)
    for i in range(len(x)):
        path, score = exhaustive_best(model, tree, x[i])
        assert tuple(beam.labels[i, :depth]) == path
        assert beam.path_score[i] == pytest.approx(score, abs=1e-9)


def test_beam_crossover_fixture():
    # class A is likelier, but its probability splits over two orders
    tree = TaxonomyTree.from_name_paths(
        [("A", "a1", "f1", "g1", "s1"), ("A", "a2", "f2", "g2", "s2"), ("B", "b1", "f3", "g3", "s3")]
    )
    logits = {Level.CLASS: np.log([0.6, 0.4]), Level.ORDER: np.zeros(3)}
    model = FixedLogits("h-co", tree, logits)
    x = np.zeros((1, 1))
    greedy = decode_greedy(model, tree, x)[0]
    beam = decode_beam(model, tree, x, k=2)[0]
    assert tree.names[Level.CLASS][greedy.labels[0]] == "A"
    assert tree.name_path(beam.labels)[:2] == ("B", "b1")
    assert np.exp(beam.path_score) == pytest.approx(0.4)
    assert np.exp(greedy.path_score) == pytest.approx(0.3)
    assert beam.labels[:2] == exhaustive_best(model, tree, x[0])[0]


def test_beam_ties_break_to_lexicographic_path():
    tree = TaxonomyTree.from_name_paths([("A", "a1", "f", "g", "s"), ("B", "b1", "f2", "g2", "s2")])
    model = FixedLogits("h-co", tree, {Level.CLASS: np.zeros(2), Level.ORDER: np.zeros(2)})
    assert decode_beam(model, tree, np.zeros((1, 1)), k=2)[0].labels[:2] == (0, 0)


def test_beam_width_validated():
    tree = random_tree(0)
    with pytest.raises(ValueError):
        decode_beam(tiny_model("h-co", tree), tree, np.zeros((1, 4)), k=0)


def test_beam_score_monotone_in_width():
    violations = 0
    for seed in range(30):
        tree = random_tree(seed)
        model = tiny_model("h-cofgs", tree, seed=seed)
        x = make_rng(seed).normal(size=(5, 4)) * 3
        scores = [decode_beam(model, tree, x, k=k).path_score for k in (1, 2, 3, 5, 8)]
        for a, b in zip(scores, scores[1:]):
            violations += int(np.sum(b < a - 1e-12))
    assert violations == 0


# flat --------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_flat_species_lookup_follows_tree(seed):
    tree = random_tree(seed)
    model = tiny_model("f-s", tree, seed=seed)
    x = make_rng(seed).normal(size=(20, 4))
    preds = flat_lookup(model, tree, x)
    top = np.argmax(model.forward(x)[Level.SPECIES].probs, axis=1)
    np.testing.assert_array_equal(preds.labels, tree.species_paths[top])
    assert preds.path_valid.all()


def test_flat_class_leaves_other_levels_undefined():
    tree = random_tree(1)
    preds = flat_lookup(tiny_model("f-c", tree), tree, np.zeros((2, 4)))
    assert (preds.labels[:, 1:] == -1).all() and (preds.labels[:, 0] >= 0).all()
    assert preds.path_valid.all()


def test_flat_lookup_rejects_hierarchical():
    tree = random_tree(0)
    with pytest.raises(DataError, match="flat"):
        flat_lookup(tiny_model("h-co", tree), tree, np.zeros((1, 4)))


# dispatch and files ------------------------------------------------------


def test_predict_dispatch():
    tree = random_tree(2)
    model = tiny_model("h-cof", tree)
    x = make_rng(0).normal(size=(4, 4))
    assert predict(model, tree, x, "beam", beam_width=2).strategy == "beam"
    with pytest.raises(ValueError, match="unknown strategy"):
        predict(model, tree, x, "sampling")


def test_prediction_file_roundtrip(tmp_path):
    tree = random_tree(3)
    model = tiny_model("h-cofgs", tree)
    preds = decode_greedy(model, tree, make_rng(0).normal(size=(5, 4)))
    ids = [f"r{i}" for i in range(5)]
    write_predictions(tmp_path / "p.csv", ids, preds, tree)
    got_ids, labels, strategy = read_predictions(tmp_path / "p.csv")
    assert got_ids == ids and strategy == "greedy"
    np.testing.assert_array_equal(labels, preds.labels)


def test_prediction_file_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,strategy\nx,greedy\n")
    with pytest.raises(DataError, match="missing"):
        read_predictions(tmp_path / "bad.csv")
