import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertax.data import (
    SPLITS,
    Dataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    largest_remainder,
    load_dataset,
    load_provider,
    nearest_centroid_predict,
    save_dataset,
    save_provider,
    species_centroids,
    stratified_split,
)
from hiertax.errors import DataError
from hiertax.taxonomy import Level


def small(seed=0, **kw):
    kw.setdefault("level_counts", (2, 3, 4, 5, 8))
    kw.setdefault("dim", 6)
    kw.setdefault("samples_per_species", (3, 9))
    return generate_synthetic(SyntheticSpec(seed=seed, **kw))


def remainder_oracle(n, fractions):
    """Try every floor/ceil allocation; keep the one with the largest rounded-up remainders."""
    from itertools import product

    exact = [n * f for f in fractions]
    floors = [int(np.floor(e + 1e-9)) for e in exact]
    best = None
    for bumps in product((0, 1), repeat=len(fractions)):
        alloc = [f + b for f, b in zip(floors, bumps)]
        if sum(alloc) != n:
            continue
        gained = round(sum(e - f for e, f, b in zip(exact, floors, bumps) if b), 9)
        # ties go to the allocation whose bumped slots come first
        key = (-gained, [i for i, b in enumerate(bumps) if b])
        if best is None or key < best[0]:
            best = (key, alloc)
    return best[1]


# splitting ---------------------------------------------------------------


def test_stratum_of_ten():
    assert largest_remainder(10, (0.7, 0.15, 0.15)) == [7, 2, 1]


@pytest.mark.parametrize("n,expected", [(1, [1, 0, 0]), (2, [1, 1, 0])])
def test_tiny_strata_fill_train_first(n, expected):
    assert largest_remainder(n, (0.7, 0.15, 0.15)) == expected


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 400))
def test_largest_remainder_bounds(n):
    fr = (0.7, 0.15, 0.15)
    counts = largest_remainder(n, fr)
    assert sum(counts) == n
    if n >= 3:
        assert all(abs(c - n * f) < 1 for c, f in zip(counts, fr))


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 60))
def test_largest_remainder_matches_oracle(n):
    assert largest_remainder(n, (0.7, 0.15, 0.15)) == remainder_oracle(n, (0.7, 0.15, 0.15))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_split_is_partition_with_exact_counts(seed):
    ds = stratified_split(small(seed), SplitSpec(seed=seed))
    assert set(ds.splits) <= set(SPLITS)
    strata = ds.labels[:, Level.SPECIES]
    for s in np.unique(strata):
        sel = ds.splits[strata == s]
        counts = [int(np.sum(sel == name)) for name in SPLITS]
        assert counts == largest_remainder(len(sel), (0.7, 0.15, 0.15))


def test_split_is_seeded():
    ds = small(1, samples_per_species=(10, 10))
    a, b = stratified_split(ds), stratified_split(ds)
    np.testing.assert_array_equal(a.splits, b.splits)
    c = stratified_split(ds, SplitSpec(seed=7))
    assert not np.array_equal(a.splits, c.splits)


def test_split_at_other_level():
    ds = stratified_split(small(2), SplitSpec(stratify_level=Level.ORDER))
    for s in np.unique(ds.labels[:, 1]):
        sel = ds.splits[ds.labels[:, 1] == s]
        assert [int(np.sum(sel == n)) for n in SPLITS] == largest_remainder(len(sel), (0.7, 0.15, 0.15))


def test_split_spec_validation():
    with pytest.raises(DataError):
        SplitSpec(fractions=(0.5, 0.5, 0.1))
    with pytest.raises(DataError):
        SplitSpec(fractions=(1.0, 0.0, 0.0))
    empty = small().subset(np.zeros(len(small()), bool))
    with pytest.raises(DataError, match="empty"):
        stratified_split(empty)


# synthetic data ----------------------------------------------------------


def test_synthetic_shape():
    ds = generate_synthetic(SyntheticSpec(seed=3))
    assert ds.tree.counts == (3, 6, 9, 12, 24)
    assert ds.dim == 32 and len(ds) == 24 * 40


def test_synthetic_children_ranges():
    spec = SyntheticSpec(level_counts=None, children_per_node=((2, 2), (1, 3), (1, 1), (2, 4)), n_classes=2, seed=1)
    tree = generate_synthetic(spec).tree
    assert tree.counts[:2] == (2, 4)
    for lv in range(1, 5):
        per_parent = np.bincount(tree.parents[lv], minlength=tree.n(lv - 1))
        lo, hi = spec.children_per_node[lv - 1]
        assert per_parent.min() >= lo and per_parent.max() <= hi


def test_synthetic_is_pure_function_of_spec():
    a, b = small(5), small(5)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.tree == b.tree and a.ids == b.ids
    assert not np.array_equal(small(6).features[:3], a.features[:3])


def test_zero_noise_nearest_centroid_is_perfect():
    ds = small(4, noise=0.0)
    pred = nearest_centroid_predict(species_centroids(ds), ds.features)
    np.testing.assert_array_equal(pred, ds.labels[:, Level.SPECIES])


def test_dispersion_ladder_makes_coarse_levels_easier():
    spec = SyntheticSpec(dispersion=(8.0, 2.0, 1.0, 0.5, 0.1), noise=1.0, samples_per_species=(20, 20), seed=2)
    ds = stratified_split(generate_synthetic(spec))
    train, test = ds.split("train"), ds.split("test")
    pred = nearest_centroid_predict(species_centroids(train), test.features)
    paths = ds.tree.species_paths[pred]
    class_acc = np.mean(paths[:, 0] == test.labels[:, 0])
    species_acc = np.mean(paths[:, 4] == test.labels[:, 4])
    assert class_acc > 0.95 and species_acc < 0.7


@pytest.mark.parametrize(
    "kw",
    [
        dict(dispersion=(1, 1, 1, 1)),
        dict(dispersion=(1, 1, 0, 1, 1)),
        dict(noise=-1.0),
        dict(level_counts=(3, 2, 4, 5, 6)),
        dict(level_counts=(0, 1, 1, 1, 1)),
        dict(samples_per_species=(0, 3)),
    ],
)
def test_degenerate_specs_rejected(kw):
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(**kw))


# files -------------------------------------------------------------------


def test_dataset_roundtrip_is_exact(tmp_path):
    ds = stratified_split(small(7))
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv", ds.tree)
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.splits, ds.splits)


def test_provider_features(tmp_path):
    ds = small(8)
    save_provider(tmp_path / "emb.csv", ds.ids, ds.features)
    bare = Dataset(ds.tree, ds.ids, np.zeros((len(ds), 0)), ds.labels)
    save_dataset(bare, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv", ds.tree, load_provider(tmp_path / "emb.csv"))
    np.testing.assert_array_equal(back.features, ds.features)
    with pytest.raises(DataError, match="provider"):
        load_dataset(tmp_path / "d.csv", ds.tree)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


def test_truncated_row_reports_line(tmp_path):
    ds = small(9)
    save_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    lines[3] = ",".join(lines[3].split(",")[:-2])
    write_lines(tmp_path / "d.csv", lines)
    with pytest.raises(DataError, match=r"d\.csv:4:"):
        load_dataset(tmp_path / "d.csv", ds.tree)


def test_unknown_label_is_named(tmp_path):
    ds = small(9)
    save_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    parts = lines[2].split(",")
    parts[3] = "Nofamily"
    lines[2] = ",".join(parts)
    write_lines(tmp_path / "d.csv", lines)
    with pytest.raises(DataError, match="family label 'Nofamily'"):
        load_dataset(tmp_path / "d.csv", ds.tree)


def test_mixed_feature_lengths_rejected(tmp_path):
    ds = small(10)
    save_provider(tmp_path / "emb.csv", ds.ids[:2], ds.features[:2])
    text = (tmp_path / "emb.csv").read_text() + "extra,1.0\n"
    (tmp_path / "emb.csv").write_text(text)
    with pytest.raises(DataError, match=":4:"):
        load_provider(tmp_path / "emb.csv")


def test_bad_split_and_duplicates(tmp_path):
    ds = stratified_split(small(11))
    save_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    write_lines(tmp_path / "dup.csv", lines + [lines[1]])
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(tmp_path / "dup.csv", ds.tree)
    parts = lines[1].split(",")
    parts[6] = "holdout"
    write_lines(tmp_path / "bad.csv", [lines[0], ",".join(parts)])
    with pytest.raises(DataError, match="unknown split"):
        load_dataset(tmp_path / "bad.csv", ds.tree)


def test_invalid_label_path_rejected():
    ds = small(12)
    labels = ds.labels.copy()
    labels[0, Level.CLASS] = (labels[0, Level.CLASS] + 1) % ds.tree.n(Level.CLASS)
    with pytest.raises(DataError, match="not valid"):
        Dataset(ds.tree, ds.ids, ds.features, labels)
