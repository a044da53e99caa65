"""Decoding strategies: greedy hierarchical, level-wise argmax, beam search, flat lookup."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hiertax.errors import DataError
from hiertax.model import CascadeModel, masked_softmax
from hiertax.taxonomy import LEVEL_COLUMNS, LEVELS, N_LEVELS, Level, TaxonomyTree

GREEDY, LEVELWISE, BEAM, FLAT = "greedy", "levelwise", "beam", "flat"
STRATEGIES = (GREEDY, LEVELWISE, BEAM, FLAT)


def _log(p: float) -> float:
    return float(np.log(p)) if p > 0 else float("-inf")


@dataclass
class Prediction:
    labels: tuple[int, ...]  # -1 where the level is not predicted
    probs: list  # per level: probability vector or None
    strategy: str
    path_valid: bool
    path_score: float


@dataclass
class Predictions:
    """Batch of predictions stored column-wise."""

    labels: np.ndarray  # (n, 5) int, -1 = undefined
    probs: list  # per level: (n, n_level) array or None
    strategy: str
    path_valid: np.ndarray
    path_score: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Prediction:
        return Prediction(
            tuple(int(v) for v in self.labels[i]),
            [None if p is None else p[i] for p in self.probs],
            self.strategy,
            bool(self.path_valid[i]),
            float(self.path_score[i]),
        )

    def top1(self) -> np.ndarray:
        """(n, 5) probability of each selected label (nan where undefined)."""
        out = np.full(self.labels.shape, np.nan)
        for lv, p in enumerate(self.probs):
            if p is not None:
                sel = self.labels[:, lv]
                out[:, lv] = p[np.arange(len(sel)), sel]
        return out

    @classmethod
    def stack(cls, preds: Sequence[Prediction], strategy: str) -> "Predictions":
        labels = np.array([p.labels for p in preds], dtype=np.int64).reshape(-1, N_LEVELS)
        probs = []
        for lv in range(N_LEVELS):
            vecs = [p.probs[lv] for p in preds]
            probs.append(None if not vecs or vecs[0] is None else np.stack(vecs))
        return cls(
            labels,
            probs,
            strategy,
            np.array([p.path_valid for p in preds], dtype=bool),
            np.array([p.path_score for p in preds], dtype=np.float64),
        )


def _check(model: CascadeModel, tree: TaxonomyTree, flat: bool | None) -> None:
    if tuple(model.counts) != tuple(tree.counts):
        raise DataError(f"model class counts {model.counts} do not match taxonomy {tree.counts}")
    if flat is not None and model.variant.flat != flat:
        kind = "flat" if flat else "hierarchical"
        raise DataError(f"strategy needs a {kind} model, got {model.variant.value}")


def _valid_paths(tree: TaxonomyTree, labels: np.ndarray, depth: int) -> np.ndarray:
    ok = np.ones(len(labels), dtype=bool)
    for lv in range(1, depth):
        ok &= tree.parents[lv][labels[:, lv]] == labels[:, lv - 1]
    return ok


def _finish(model, labels, outputs, strategy, tree) -> Predictions:
    n = len(labels)
    depth = len(model.levels)
    score = np.zeros(n)
    probs = [None] * N_LEVELS
    rows = np.arange(n)
    for lv in model.levels:
        p = outputs[lv]
        probs[lv] = p
        with np.errstate(divide="ignore"):
            score += np.log(p[rows, labels[:, lv]])
    return Predictions(labels, probs, strategy, _valid_paths(tree, labels, depth), score)


def decode_greedy(model: CascadeModel, tree: TaxonomyTree, features: np.ndarray) -> Predictions:
    """Argmax per level; each choice masks the next level to its children."""
    _check(model, tree, flat=False)
    features = np.atleast_2d(features)
    n = len(features)
    labels = np.full((n, N_LEVELS), -1, dtype=np.int64)

    def source(level, done):
        prev = done[-1]
        labels[:, prev.level] = np.argmax(prev.probs, axis=1)
        return tree.mask_matrix(level)[labels[:, prev.level]]

    outputs = model.forward(features, source)
    last = model.levels[-1]
    labels[:, last] = np.argmax(outputs[last].probs, axis=1)
    return _finish(model, labels, {lv: o.probs for lv, o in outputs.items()}, GREEDY, tree)


def decode_levelwise(
    model: CascadeModel, tree: TaxonomyTree, features: np.ndarray, feed_masked: bool = False
) -> Predictions:
    """Independent argmax at every level, ignoring the taxonomy.

    Child heads see their ancestors' unmasked distributions. With
    ``feed_masked`` they instead see distributions masked under the
    (level-wise) predicted parent; the selection itself is unconstrained
    either way.
    """
    _check(model, tree, flat=False)
    features = np.atleast_2d(features)
    n = len(features)
    labels = np.full((n, N_LEVELS), -1, dtype=np.int64)
    raw = {}

    def source(level, done):
        prev = done[-1]
        p = masked_softmax(prev.logits)
        raw[prev.level] = p
        labels[:, prev.level] = np.argmax(p, axis=1)
        if not feed_masked:
            return None
        return tree.mask_matrix(level)[labels[:, level - 1]]

    outputs = model.forward(features, source)
    last = model.levels[-1]
    raw[last] = masked_softmax(outputs[last].logits)
    labels[:, last] = np.argmax(raw[last], axis=1)
    return _finish(model, labels, raw, LEVELWISE, tree)


def decode_beam(
    model: CascadeModel, tree: TaxonomyTree, features: np.ndarray, k: int = 3
) -> Predictions:
    """Level-synchronous beam search maximizing the summed log-probability.

    Every candidate carries its own ancestor distributions, so child logits
    are recomputed per candidate. Ties are broken by the lexicographically
    smaller path.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    _check(model, tree, flat=False)
    features = np.atleast_2d(features)
    preds = [_beam_one(model, tree, features[i : i + 1], k) for i in range(len(features))]
    return Predictions.stack(preds, BEAM)


def _beam_one(model: CascadeModel, tree: TaxonomyTree, x: np.ndarray, k: int) -> Prediction:
    f = model.embed(x)
    # candidate = (score, path, per-level probability vectors)
    beam: list[tuple[float, tuple[int, ...], list[np.ndarray]]] = [(0.0, (), [])]
    for lv in model.levels:
        fb = np.repeat(f, len(beam), axis=0)
        ancestors = [np.stack([c[2][j] for c in beam]) for j in range(len(beam[0][2]))]
        z = model.head_logits(lv, fb, ancestors)
        if lv == Level.CLASS:
            valid = np.ones(z.shape, dtype=bool)
        else:
            valid = tree.mask_matrix(lv)[[c[1][-1] for c in beam]]
        p = masked_softmax(z, valid)
        expanded = []
        for (score, path, vecs), pc, vc in zip(beam, p, valid):
            for child in np.flatnonzero(vc):
                expanded.append((score + _log(pc[child]), path + (int(child),), vecs + [pc]))
        expanded.sort(key=lambda c: (-c[0], c[1]))
        beam = expanded[:k]
    score, path, vecs = beam[0]
    labels = tuple(path) + (-1,) * (N_LEVELS - len(path))
    probs = list(vecs) + [None] * (N_LEVELS - len(vecs))
    return Prediction(labels, probs, BEAM, tree.is_valid_path(path, len(path)), score)


def flat_lookup(model: CascadeModel, tree: TaxonomyTree, features: np.ndarray) -> Predictions:
    """Argmax at the flat model's level; ancestors from the tree for F-S."""
    _check(model, tree, flat=True)
    features = np.atleast_2d(features)
    level = model.levels[0]
    p = model.forward(features)[level].probs
    top = np.argmax(p, axis=1)
    n = len(top)
    labels = np.full((n, N_LEVELS), -1, dtype=np.int64)
    if level == Level.SPECIES:
        labels[:] = tree.species_paths[top]
    else:
        labels[:, level] = top
    probs = [None] * N_LEVELS
    probs[level] = p
    with np.errstate(divide="ignore"):
        score = np.log(p[np.arange(n), top])
    return Predictions(labels, probs, FLAT, np.ones(n, dtype=bool), score)


def predict(model, tree, features, strategy: str = GREEDY, beam_width: int = 3, **kw) -> Predictions:
    if strategy == GREEDY:
        return decode_greedy(model, tree, features)
    if strategy == LEVELWISE:
        return decode_levelwise(model, tree, features, **kw)
    if strategy == BEAM:
        return decode_beam(model, tree, features, beam_width)
    if strategy == FLAT:
        return flat_lookup(model, tree, features)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def default_strategy(model: CascadeModel) -> str:
    return FLAT if model.variant.flat else GREEDY


# prediction files --------------------------------------------------------

PRED_COLUMNS = (
    ["id", "strategy"]
    + list(LEVEL_COLUMNS)
    + [f"{c}_index" for c in LEVEL_COLUMNS]
    + ["path_valid", "path_score"]
    + [f"{c}_prob" for c in LEVEL_COLUMNS]
)


def write_predictions(path: str | Path, ids: Sequence[str], preds: Predictions, tree: TaxonomyTree) -> None:
    top = preds.top1()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_COLUMNS)
        for i, sid in enumerate(ids):
            lab = preds.labels[i]
            w.writerow(
                [sid, preds.strategy]
                + list(tree.name_path(lab))
                + [int(v) for v in lab]
                + [int(preds.path_valid[i]), repr(float(preds.path_score[i]))]
                + ["" if np.isnan(v) else repr(float(v)) for v in top[i]]
            )


def read_predictions(path: str | Path) -> tuple[list[str], np.ndarray, str]:
    """Return ids, (n, 5) label indices and the strategy tag."""
    ids, labels, strategy = [], [], ""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PRED_COLUMNS[:12] if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing prediction columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                labels.append([int(row[f"{c}_index"]) for c in LEVEL_COLUMNS])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed label index") from None
            ids.append(row["id"])
            strategy = row["strategy"]
    return ids, np.array(labels, dtype=np.int64).reshape(-1, N_LEVELS), strategy
