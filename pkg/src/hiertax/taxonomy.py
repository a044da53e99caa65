"""Five-level taxonomy tree: cleaning, construction, masks and distances."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hiertax.errors import ConfigError, DataError


class Level(IntEnum):
    CLASS = 0
    ORDER = 1
    FAMILY = 2
    GENUS = 3
    SPECIES = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | Level") -> "Level":
        if isinstance(value, Level):
            return value
        if isinstance(value, int):
            return cls(value)
        return cls[value.strip().upper()]


LEVELS = tuple(Level)
N_LEVELS = len(LEVELS)
LEVEL_COLUMNS = tuple(lv.label for lv in LEVELS)

DEFAULT_MERGE_RULES = {"Mediophyceae": "Coscinodiscophyceae"}
DEFAULT_UNCERTAIN_MARKERS = ("sp.", "cf.", "?")


class EmptyTaxonomyError(DataError):
    pass


@dataclass(frozen=True)
class TaxonNode:
    level: Level
    index: int
    name: str
    parent: int | None = None  # index at level - 1


@dataclass(frozen=True)
class MaskRow:
    parent: tuple[Level, int]
    child_level: Level
    bits: np.ndarray


@dataclass
class CleanReport:
    input_count: int = 0
    merged: int = 0
    removed_incomplete: int = 0
    removed_uncertain: int = 0
    conflicts_resolved: int = 0
    retained: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class CleanRules:
    merge: dict = field(default_factory=lambda: dict(DEFAULT_MERGE_RULES))
    uncertain_markers: tuple = DEFAULT_UNCERTAIN_MARKERS


class TaxonomyTree:
    """Immutable strict 5-level tree with lexicographically ordered index spaces.

    ``names[lv]`` lists node names in index order and ``parents[lv]`` holds the
    parent index (at ``lv - 1``) of every node; ``parents[CLASS]`` is all -1.
    """

    def __init__(self, names: Sequence[Sequence[str]], parents: Sequence[Sequence[int]]):
        if len(names) != N_LEVELS or len(parents) != N_LEVELS:
            raise DataError("taxonomy must have exactly five levels")
        self.names: tuple[tuple[str, ...], ...] = tuple(tuple(n) for n in names)
        self.parents: tuple[np.ndarray, ...] = tuple(
            np.asarray(p, dtype=np.int64) for p in parents
        )
        for lv in LEVELS:
            if len(self.names[lv]) == 0:
                raise EmptyTaxonomyError(f"empty taxonomy at level {lv.label}")
            if len(set(self.names[lv])) != len(self.names[lv]):
                raise DataError(f"duplicate names at level {lv.label}")
            if len(self.parents[lv]) != len(self.names[lv]):
                raise DataError(f"parent map length mismatch at level {lv.label}")
            if lv == Level.CLASS:
                if np.any(self.parents[lv] != -1):
                    raise DataError("class nodes cannot have parents")
                continue
            p = self.parents[lv]
            if np.any(p < 0) or np.any(p >= len(self.names[lv - 1])):
                raise DataError(f"parent index out of range at level {lv.label}")
            if len(np.unique(p)) != len(self.names[lv - 1]):
                raise DataError(f"childless node at level {Level(lv - 1).label}")
        self.name_index = {
            (lv, name): i for lv in LEVELS for i, name in enumerate(self.names[lv])
        }
        self._paths = self._species_paths()
        self._masks = {
            lv: self._mask_matrix(lv) for lv in LEVELS if lv != Level.CLASS
        }

    # construction -------------------------------------------------------

    @classmethod
    def from_name_paths(cls, paths: Iterable[Sequence[str]]) -> "TaxonomyTree":
        """Build from 5-name paths that already satisfy the single-parent rule."""
        paths = [tuple(p) for p in paths]
        if not paths:
            raise EmptyTaxonomyError("empty taxonomy")
        names = []
        parent_name: list[dict[str, str]] = [dict() for _ in LEVELS]
        for lv in LEVELS:
            seen = set()
            for p in paths:
                seen.add(p[lv])
                if lv > 0:
                    prev = parent_name[lv].setdefault(p[lv], p[lv - 1])
                    if prev != p[lv - 1]:
                        raise DataError(
                            f"{lv.label} {p[lv]!r} has two parents: {prev!r}, {p[lv - 1]!r}"
                        )
            names.append(sorted(seen))
        parents = [[-1] * len(names[0])]
        for lv in LEVELS[1:]:
            index = {n: i for i, n in enumerate(names[lv - 1])}
            parents.append([index[parent_name[lv][n]] for n in names[lv]])
        return cls(names, parents)

    # queries ------------------------------------------------------------

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(n) for n in self.names)

    def n(self, level: Level) -> int:
        return len(self.names[level])

    def node(self, level: Level, index: int) -> TaxonNode:
        self._check(level, index)
        parent = None if level == Level.CLASS else int(self.parents[level][index])
        return TaxonNode(Level(level), int(index), self.names[level][index], parent)

    def index_of(self, level: Level, name: str) -> int:
        try:
            return self.name_index[(Level(level), name)]
        except KeyError:
            raise DataError(f"unknown {Level(level).label} label {name!r}") from None

    def children(self, level: Level, index: int) -> np.ndarray:
        """Indices (at ``level + 1``) of the children of a node."""
        self._check(level, index)
        if level == Level.SPECIES:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.parents[level + 1] == index)

    def child_mask(self, parent_level: Level, parent_index: int, child_level: Level) -> MaskRow:
        parent_level, child_level = Level(parent_level), Level(child_level)
        if child_level != parent_level + 1:
            raise ValueError("child level must be exactly one below the parent level")
        self._check(parent_level, parent_index)
        bits = self._masks[child_level][parent_index].copy()
        return MaskRow((parent_level, int(parent_index)), child_level, bits)

    def mask_matrix(self, child_level: Level) -> np.ndarray:
        """Boolean (n_parent x n_child) matrix; row i is the mask of parent i."""
        return self._masks[Level(child_level)]

    def ancestor_path(self, species_index: int) -> tuple[int, ...]:
        self._check(Level.SPECIES, species_index)
        return tuple(int(v) for v in self._paths[species_index])

    @property
    def species_paths(self) -> np.ndarray:
        """(n_species x 5) array; row s is the root-to-leaf path of species s."""
        return self._paths

    def ancestor_at(self, level: Level, index: int, target: Level) -> int:
        """Ancestor of node ``(level, index)`` at the coarser ``target`` level."""
        self._check(level, index)
        idx = int(index)
        for lv in range(level, target, -1):
            idx = int(self.parents[lv][idx])
        return idx

    def is_valid_path(self, path: Sequence[int], depth: int = N_LEVELS) -> bool:
        if len(path) < depth:
            return False
        for lv in range(depth):
            if not 0 <= path[lv] < self.n(Level(lv)):
                return False
            if lv > 0 and self.parents[lv][path[lv]] != path[lv - 1]:
                return False
        return True

    def taxonomic_distance(self, species_a: int, species_b: int) -> int:
        """Levels ascended from species to the lowest common ancestor (0..5)."""
        self._check(Level.SPECIES, species_a)
        self._check(Level.SPECIES, species_b)
        a, b = self._paths[species_a], self._paths[species_b]
        return int(np.count_nonzero(a != b))

    def distances(self, pred: np.ndarray, true: np.ndarray) -> np.ndarray:
        pred = np.asarray(pred, dtype=np.int64)
        true = np.asarray(true, dtype=np.int64)
        n = self.n(Level.SPECIES)
        if np.any((pred < 0) | (pred >= n) | (true < 0) | (true >= n)):
            raise IndexError("species index out of range")
        return np.count_nonzero(self._paths[pred] != self._paths[true], axis=1)

    def name_path(self, path: Sequence[int]) -> tuple[str, ...]:
        return tuple(
            self.names[lv][i] if i >= 0 else "" for lv, i in zip(LEVELS, path)
        )

    # serialization ------------------------------------------------------

    def to_text(self) -> str:
        doc = {
            "format": "hiertax-taxonomy/1",
            "levels": [
                {
                    "level": lv.label,
                    "names": list(self.names[lv]),
                    "parents": [int(v) for v in self.parents[lv]],
                }
                for lv in LEVELS
            ],
        }
        return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaxonomyTree":
        try:
            doc = json.loads(text)
            levels = doc["levels"]
            names = [lv["names"] for lv in levels]
            parents = [lv["parents"] for lv in levels]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed taxonomy document: {exc}") from None
        if [lv.get("level") for lv in levels] != list(LEVEL_COLUMNS):
            raise DataError("taxonomy document must list the five levels in order")
        return cls(names, parents)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TaxonomyTree":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaxonomyTree):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.parents, other.parents)
        )

    def __repr__(self) -> str:
        return f"TaxonomyTree(counts={self.counts})"

    # internals ----------------------------------------------------------

    def _check(self, level: Level, index: int) -> None:
        if not 0 <= int(index) < len(self.names[level]):
            raise IndexError(
                f"{Level(level).label} index {index} out of range [0, {len(self.names[level])})"
            )

    def _species_paths(self) -> np.ndarray:
        paths = np.empty((self.n(Level.SPECIES), N_LEVELS), dtype=np.int64)
        paths[:, Level.SPECIES] = np.arange(self.n(Level.SPECIES))
        for lv in range(Level.SPECIES, Level.CLASS, -1):
            paths[:, lv - 1] = self.parents[lv][paths[:, lv]]
        paths.setflags(write=False)
        return paths

    def _mask_matrix(self, child_level: Level) -> np.ndarray:
        m = np.zeros((self.n(Level(child_level - 1)), self.n(child_level)), dtype=bool)
        m[self.parents[child_level], np.arange(self.n(child_level))] = True
        m.setflags(write=False)
        return m


# cleaning -----------------------------------------------------------------


def _is_uncertain(species: str, markers: Sequence[str]) -> bool:
    s = species.lower()
    return any(m.lower() in s for m in markers)


def _modal(counter: Counter) -> str:
    # ties go to the lexicographically smallest name
    return min(counter, key=lambda name: (-counter[name], name))


def clean_records(
    records: Iterable[Sequence[str]], rules: CleanRules | None = None
) -> tuple[list[tuple[str, ...]], CleanReport]:
    """Apply merge rules, drop incomplete/uncertain rows, enforce single parents.

    Conflicting records are reassigned to the modal parent rather than dropped.
    Returns the surviving name paths in input order together with the counts.
    """
    rules = rules or CleanRules()
    report = CleanReport()
    rows = []
    for rec in records:
        report.input_count += 1
        rec = tuple((s or "").strip() for s in rec)
        if len(rec) != N_LEVELS:
            raise DataError(f"record {report.input_count} has {len(rec)} fields, expected 5")
        if rec[0] in rules.merge:
            rec = (rules.merge[rec[0]],) + rec[1:]
            report.merged += 1
        if any(not s for s in rec):
            report.removed_incomplete += 1
            continue
        if _is_uncertain(rec[Level.SPECIES], rules.uncertain_markers):
            report.removed_uncertain += 1
            continue
        rows.append(list(rec))

    if not rows:
        raise EmptyTaxonomyError("empty taxonomy: no records survived cleaning")

    # top-down so every parent chain is already unique when it is copied
    for lv in LEVELS[1:]:
        votes: dict[str, Counter] = {}
        for r in rows:
            votes.setdefault(r[lv], Counter())[r[lv - 1]] += 1
        chain_of = {r[lv - 1]: r[: lv] for r in rows}
        for r in rows:
            parent = _modal(votes[r[lv]])
            if r[lv - 1] != parent:
                r[: lv] = chain_of[parent]
                report.conflicts_resolved += 1

    report.retained = len(rows)
    return [tuple(r) for r in rows], report


def build_tree(
    records: Iterable[Sequence[str]], rules: CleanRules | None = None
) -> tuple[TaxonomyTree, CleanReport]:
    cleaned, report = clean_records(records, rules)
    return TaxonomyTree.from_name_paths(cleaned), report


# min-sample filtering ----------------------------------------------------


def sparse_taxa_mask(labels: np.ndarray, threshold: int, levels: Iterable[Level]) -> np.ndarray:
    """Rows belonging to a taxon with fewer than ``threshold`` rows at any level."""
    drop = np.zeros(len(labels), dtype=bool)
    for lv in levels:
        col = labels[:, lv]
        counts = np.bincount(col)
        drop |= counts[col] < threshold
    return drop


def filter_min_samples(dataset, threshold, levels: Iterable[Level | str]):
    """Iteratively drop taxa with fewer than ``threshold`` records until nothing changes.

    ``threshold`` is an int or a ``{level: int}`` mapping. With one uniform
    threshold a single pass always reaches the fixed point; differing
    per-level thresholds can cascade over several passes.

    ``dataset`` is a :class:`hiertax.data.Dataset`. Returns the filtered dataset
    (rebased on a rebuilt tree) and a report of removals per level.
    """
    levels = sorted({Level.parse(lv) for lv in levels})
    if Level.CLASS in levels:
        raise ConfigError("the class level cannot be filtered")
    if isinstance(threshold, Mapping):
        thresholds = {Level.parse(k): int(v) for k, v in threshold.items()}
        missing = [lv.label for lv in levels if lv not in thresholds]
        if missing:
            raise ConfigError(f"no threshold for levels {missing}")
    else:
        thresholds = {lv: int(threshold) for lv in levels}
    if any(thresholds[lv] < 1 for lv in levels):
        raise ConfigError("threshold must be >= 1")

    labels = dataset.labels
    keep = np.ones(len(labels), dtype=bool)
    removed = {lv.label: 0 for lv in levels}
    passes = 0
    while True:
        idx = np.flatnonzero(keep)
        sub = labels[idx]
        drop = np.zeros(len(idx), dtype=bool)
        for lv in levels:
            d = sparse_taxa_mask(sub, thresholds[lv], [lv]) & ~drop
            removed[lv.label] += int(d.sum())
            drop |= d
        if not drop.any():
            break
        passes += 1
        keep[idx[drop]] = False
        if not keep.any():
            first = next(name for name, c in removed.items() if c > 0)
            raise EmptyTaxonomyError(f"empty after filtering: level {first} exhausted")
    report = {"removed": removed, "passes": passes, "retained": int(keep.sum())}
    return dataset.subset(keep).rebased(), report


# label files -------------------------------------------------------------


def read_label_file(path: str | Path) -> list[tuple[str, ...]]:
    """Read a delimited file with a header containing the five level columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        try:
            cols = [header.index(c) for c in LEVEL_COLUMNS]
        except ValueError:
            raise DataError(f"{path}: header must contain {', '.join(LEVEL_COLUMNS)}") from None
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            out.append(tuple(row[c] for c in cols))
    return out


def write_label_file(path: str | Path, records: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEVEL_COLUMNS)
        for r in records:
            w.writerow(r)
