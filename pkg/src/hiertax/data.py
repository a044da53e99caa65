"""Datasets of feature vectors with 5-level labels, splitting and synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from hiertax.errors import DataError
from hiertax.numerics import make_rng
from hiertax.taxonomy import LEVEL_COLUMNS, LEVELS, N_LEVELS, Level, TaxonomyTree

SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"


class Record(NamedTuple):
    id: str
    features: np.ndarray
    labels: tuple[int, ...]
    split: str


@dataclass
class Dataset:
    """Immutable-by-convention table: ids, (n, D) features, (n, 5) label indices."""

    tree: TaxonomyTree
    ids: list[str]
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray = None  # object array of split names

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1, N_LEVELS)
        n = len(self.ids)
        if self.splits is None:
            self.splits = np.full(n, UNASSIGNED, dtype=object)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.features.ndim != 2 or len(self.features) != n:
            raise DataError(f"feature matrix shape {self.features.shape} does not match {n} records")
        if len(self.labels) != n or len(self.splits) != n:
            raise DataError("ids, labels and splits must have equal length")
        if n:
            sp = self.labels[:, Level.SPECIES]
            ok = (sp >= 0) & (sp < self.tree.n(Level.SPECIES))
            ok[ok] = np.all(self.tree.species_paths[sp[ok]] == self.labels[ok], axis=1)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise DataError(f"record {self.ids[bad]!r}: label path is not valid in the taxonomy")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Record]:
        for i in range(len(self)):
            yield Record(self.ids[i], self.features[i], tuple(int(v) for v in self.labels[i]), self.splits[i])

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def taxonomy_checksum(self) -> str:
        return self.tree.checksum

    def name_paths(self) -> list[tuple[str, ...]]:
        return [self.tree.name_path(row) for row in self.labels]

    def subset(self, selector) -> "Dataset":
        idx = np.flatnonzero(selector) if np.asarray(selector).dtype == bool else np.asarray(selector)
        return Dataset(
            self.tree,
            [self.ids[i] for i in idx],
            self.features[idx],
            self.labels[idx],
            self.splits[idx],
        )

    def split(self, name: str) -> "Dataset":
        return self.subset(self.splits == name)

    def with_splits(self, splits: Sequence[str]) -> "Dataset":
        return Dataset(self.tree, list(self.ids), self.features, self.labels, np.asarray(splits, dtype=object))

    def rebased(self, tree: TaxonomyTree | None = None) -> "Dataset":
        """Re-index labels against ``tree`` (default: a tree rebuilt from these records)."""
        paths = self.name_paths()
        if tree is None:
            tree = TaxonomyTree.from_name_paths(paths)
        labels = np.array(
            [[tree.index_of(lv, p[lv]) for lv in LEVELS] for p in paths], dtype=np.int64
        ).reshape(-1, N_LEVELS)
        return Dataset(tree, list(self.ids), self.features, labels, self.splits)


# splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    stratify_level: Level = Level.SPECIES
    seed: int = 42

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise DataError("split fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError("split fractions must sum to 1")


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of ``n`` by ``fractions``; remainder ties favor earlier slots."""
    if n < len(fractions):
        # tiny stratum: fill by priority train > val > test
        return [1 if i < n else 0 for i in range(len(fractions))]
    exact = [n * f for f in fractions]
    base = [int(np.floor(e + 1e-9)) for e in exact]
    rem = [e - b for e, b in zip(exact, base)]
    left = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_split(dataset: Dataset, spec: SplitSpec | None = None) -> Dataset:
    spec = spec or SplitSpec()
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    rng = make_rng(spec.seed)
    strata = dataset.labels[:, spec.stratify_level]
    splits = np.full(len(dataset), UNASSIGNED, dtype=object)
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        members = members[rng.permutation(len(members))]
        counts = largest_remainder(len(members), spec.fractions)
        start = 0
        for name, c in zip(SPLITS, counts):
            splits[members[start : start + c]] = name
            start += c
    return dataset.with_splits(splits)


# synthetic data ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Random taxonomy plus Gaussian clusters whose centers nest down the tree.

    Either ``level_counts`` (exact node count per level) or
    ``children_per_node`` (inclusive (lo, hi) per level below CLASS) sets the
    shape. ``dispersion`` gives the center offset scale per level, coarse to
    fine; ``noise`` is the within-species standard deviation.
    """

    level_counts: tuple[int, ...] | None = (3, 6, 9, 12, 24)
    children_per_node: tuple[tuple[int, int], ...] | None = None
    n_classes: int = 3
    dim: int = 32
    dispersion: tuple[float, ...] = (4.0, 2.0, 1.2, 0.8, 0.6)
    noise: float = 0.5
    samples_per_species: tuple[int, int] = (40, 40)
    seed: int = 0

    def validate(self) -> None:
        if len(self.dispersion) != N_LEVELS or any(d <= 0 for d in self.dispersion):
            raise DataError("dispersion needs five positive scales")
        if self.noise < 0:
            raise DataError("noise must be non-negative")
        if self.dim < 1:
            raise DataError("feature dimension must be positive")
        lo, hi = self.samples_per_species
        if lo < 1 or hi < lo:
            raise DataError("samples_per_species must be a range with lo >= 1")
        if self.level_counts is not None:
            c = self.level_counts
            if len(c) != N_LEVELS or c[0] < 1 or any(b < a for a, b in zip(c, c[1:])):
                raise DataError(f"degenerate taxonomy shape {c}: counts must be non-decreasing and >= 1")
        else:
            if self.children_per_node is None or len(self.children_per_node) != N_LEVELS - 1:
                raise DataError("children_per_node needs four (lo, hi) ranges")
            if self.n_classes < 1 or any(lo < 1 or hi < lo for lo, hi in self.children_per_node):
                raise DataError("degenerate taxonomy shape")


def _random_parents(rng, n_parent: int, n_child: int) -> np.ndarray:
    extra = rng.integers(0, n_parent, size=n_child - n_parent)
    return np.sort(np.concatenate([np.arange(n_parent), extra]))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    if spec.level_counts is not None:
        parents = [np.full(spec.level_counts[0], -1)]
        for lv in LEVELS[1:]:
            parents.append(_random_parents(rng, spec.level_counts[lv - 1], spec.level_counts[lv]))
    else:
        parents = [np.full(spec.n_classes, -1)]
        for lv in LEVELS[1:]:
            lo, hi = spec.children_per_node[lv - 1]
            n_kids = rng.integers(lo, hi + 1, size=len(parents[-1]))
            parents.append(np.repeat(np.arange(len(parents[-1])), n_kids))

    prefix = ("C", "O", "F", "G", "S")
    names = [[f"{prefix[lv]}{i:03d}" for i in range(len(parents[lv]))] for lv in LEVELS]
    tree = TaxonomyTree(names, parents)

    centers = rng.normal(0.0, spec.dispersion[0], size=(tree.n(Level.CLASS), spec.dim))
    for lv in LEVELS[1:]:
        offset = rng.normal(0.0, spec.dispersion[lv], size=(tree.n(lv), spec.dim))
        centers = centers[tree.parents[lv]] + offset

    lo, hi = spec.samples_per_species
    n_per = rng.integers(lo, hi + 1, size=tree.n(Level.SPECIES))
    species = np.repeat(np.arange(tree.n(Level.SPECIES)), n_per)
    features = centers[species] + rng.normal(0.0, 1.0, size=(len(species), spec.dim)) * spec.noise
    labels = tree.species_paths[species]
    ids = [f"s{i:05d}" for i in range(len(species))]
    return Dataset(tree, ids, features, labels)


def species_centroids(dataset: Dataset) -> np.ndarray:
    n = dataset.tree.n(Level.SPECIES)
    sums = np.zeros((n, dataset.dim))
    np.add.at(sums, dataset.labels[:, Level.SPECIES], dataset.features)
    counts = np.bincount(dataset.labels[:, Level.SPECIES], minlength=n)
    return sums / np.maximum(counts, 1)[:, None]


def nearest_centroid_predict(centroids: np.ndarray, features: np.ndarray) -> np.ndarray:
    d = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


# files -------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: Dataset, path: str | Path, with_split: bool | None = None) -> None:
    if with_split is None:
        with_split = bool(np.any(dataset.splits != UNASSIGNED))
    header = ["id", *LEVEL_COLUMNS] + (["split"] if with_split else [])
    header += [f"f{j}" for j in range(dataset.dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, sid in enumerate(dataset.ids):
            row = [sid, *dataset.tree.name_path(dataset.labels[i])]
            if with_split:
                row.append(dataset.splits[i])
            row += [_fmt(v) for v in dataset.features[i]]
            w.writerow(row)


def load_provider(path: str | Path) -> dict[str, np.ndarray]:
    """Precomputed embeddings: header ``id,f0,...``; one row per record id."""
    out = {}
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise DataError(f"{path}: provider file needs an 'id' first column")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} features, got {len(vec)}")
            out[row[0]] = vec
    return out


def save_provider(path: str | Path, ids: Sequence[str], features: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{j}" for j in range(features.shape[1])])
        for sid, row in zip(ids, features):
            w.writerow([sid] + [_fmt(v) for v in row])


def load_dataset(
    path: str | Path, tree: TaxonomyTree, provider: dict[str, np.ndarray] | None = None
) -> Dataset:
    """Read a dataset file; features come from the row or, if absent, the provider."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if header[: 1 + N_LEVELS] != ["id", *LEVEL_COLUMNS]:
            raise DataError(f"{path}: header must start with id,{','.join(LEVEL_COLUMNS)}")
        has_split = len(header) > 6 and header[6] == "split"
        fstart = 7 if has_split else 6
        ids, feats, labels, splits = [], [], [], []
        dim = len(header) - fstart
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            path_idx = []
            for lv, name in zip(LEVELS, row[1:6]):
                try:
                    path_idx.append(tree.index_of(lv, name))
                except DataError:
                    raise DataError(f"{path}:{lineno}: {lv.label} label {name!r} not in taxonomy") from None
            if dim > 0:
                try:
                    vec = np.array([float(v) for v in row[fstart:]])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            elif provider is not None:
                if sid not in provider:
                    raise DataError(f"{path}:{lineno}: id {sid!r} missing from feature provider")
                vec = provider[sid]
            else:
                raise DataError(f"{path}: no feature columns and no provider file given")
            if feats and len(vec) != len(feats[0]):
                raise DataError(f"{path}:{lineno}: mixed feature lengths ({len(vec)} vs {len(feats[0])})")
            ids.append(sid)
            feats.append(vec)
            labels.append(path_idx)
            split = row[6] if has_split else UNASSIGNED
            if split not in SPLITS and split != UNASSIGNED:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            splits.append(split)
    if not ids:
        raise DataError(f"{path}: no records")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate record ids")
    return Dataset(tree, ids, np.array(feats), np.array(labels), np.array(splits, dtype=object))
