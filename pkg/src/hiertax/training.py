"""Weighted multi-level focal loss, teacher forcing, and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from hiertax.data import Dataset
from hiertax.errors import ConfigError, ContractViolation, DataError, DivergenceError
from hiertax.evaluation import per_level_metrics
from hiertax.inference import decode_greedy, flat_lookup
from hiertax.model import LOSS_WEIGHTS, CascadeModel, ModelConfig, Variant, transferable
from hiertax.numerics import AdamW, AdamWConfig, make_rng, softmax_backward, spawn_seeds
from hiertax.taxonomy import Level, MaskRow, TaxonomyTree

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("focal alpha must be in (0, 1]")
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")


def _focal_terms(pt: np.ndarray, params: FocalParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and d loss / d p_t."""
    a, g = params.alpha, params.gamma
    logp = np.log(pt)
    q = 1.0 - pt
    loss = -a * q**g * logp
    if g == 0:
        dmod = np.zeros_like(pt)
    else:
        # d/dp of -(1-p)^g is g(1-p)^(g-1); vanishes with log p at p = 1
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(q > 0, g * q ** (g - 1) * logp, 0.0)
    dpt = a * (dmod - q**g / pt)
    return loss, dpt


def focal_loss(
    probs: np.ndarray, target: int, params: FocalParams = FocalParams()
) -> tuple[float, np.ndarray]:
    """Focal loss of one distribution and its gradient w.r.t. the logits.

    ``probs`` is a (possibly masked) softmax output, so the returned gradient
    is zero wherever the probability is zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    pt = probs[target]
    if pt <= 0:
        raise ContractViolation(f"target {target} has zero probability (masked out)")
    loss, dpt = _focal_terms(np.array([pt]), params)
    grad_p = np.zeros_like(probs)
    grad_p[target] = dpt[0]
    return float(loss[0]), softmax_backward(probs, grad_p)


def focal_loss_batch(
    probs: np.ndarray, targets: np.ndarray, params: FocalParams, level: Level | None = None
) -> tuple[float, np.ndarray]:
    """Mean focal loss over a batch and its gradient w.r.t. ``probs``."""
    n = len(targets)
    rows = np.arange(n)
    pt = probs[rows, targets]
    if np.any(pt <= 0):
        i = int(np.flatnonzero(pt <= 0)[0])
        where = "" if level is None else f" at level {Level(level).label}"
        raise ContractViolation(f"sample {i}: target {int(targets[i])} is masked out{where}")
    loss, dpt = _focal_terms(pt, params)
    grad = np.zeros_like(probs)
    grad[rows, targets] = dpt / n
    return float(loss.mean()), grad


def total_loss(losses: Sequence[float], weights: Sequence[float]) -> float:
    if len(losses) != len(weights):
        raise ConfigError(f"{len(losses)} level losses but {len(weights)} weights")
    return float(sum(w * l for w, l in zip(weights, losses)))


def teacher_forcing_masks(
    tree: TaxonomyTree, labels: np.ndarray, levels: Sequence[Level]
) -> dict[Level, np.ndarray]:
    """Per-level (batch x n) masks: children of each sample's true parent."""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    out = {}
    for lv in levels:
        if lv == Level.CLASS:
            out[lv] = None
        else:
            out[lv] = tree.mask_matrix(lv)[labels[:, lv - 1]]
    return out


def teacher_forcing_rows(tree: TaxonomyTree, path: Sequence[int]) -> dict[Level, MaskRow]:
    """Single-path variant returning :class:`MaskRow` objects."""
    if not tree.is_valid_path(path):
        raise DataError(f"invalid label path {tuple(path)}")
    return {
        Level(lv): tree.child_mask(Level(lv - 1), path[lv - 1], Level(lv))
        for lv in range(1, len(path))
    }


# schedule and stopping -----------------------------------------------------


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` non-improving epochs."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6):
        self.lr, self.factor, self.patience, self.min_lr = lr, factor, patience, min_lr
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.since_best = 0

    def step(self, epoch: int, metric: float) -> bool:
        """Record ``metric``; return True if it is a new best."""
        if metric > self.best:
            self.best, self.best_epoch, self.since_best = metric, epoch, 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


# training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 80
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loss_weights: list | None = None
    seed: int = 42

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "scheduler_factor", "min_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.scheduler_patience < 0 or self.early_stop_patience < 1:
            raise ConfigError("weight_decay and patience values must be non-negative")
        if self.early_stop_patience <= self.scheduler_patience:
            warnings.warn(
                "early_stop_patience <= scheduler_patience: the learning rate will never be reduced",
                stacklevel=2,
            )

    def weights_for(self, variant: Variant) -> tuple[float, ...]:
        w = tuple(self.loss_weights) if self.loss_weights is not None else LOSS_WEIGHTS[variant]
        if len(w) != len(variant.levels):
            raise ConfigError(
                f"{variant.value} has {len(variant.levels)} levels but {len(w)} loss weights"
            )
        return w

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def checksum(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EpochLog:
    epoch: int
    train_loss: dict[str, float]
    val: dict[str, dict[str, float]]
    lr: float
    monitored: float
    is_best: bool

    def row(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "monitored": self.monitored, "is_best": int(self.is_best)}
        for lv, v in self.train_loss.items():
            out[f"loss_{lv}"] = v
        for lv, m in self.val.items():
            out[f"val_acc_{lv}"] = m["accuracy"]
            out[f"val_f1_{lv}"] = m["weighted_f1"]
        return out


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_metric: float
    logs: list[EpochLog]
    stopped_early: bool


def predict_labels(model: CascadeModel, dataset: Dataset) -> np.ndarray:
    """Greedy (hierarchical) or tree-lookup (flat) label paths, (n, 5)."""
    if model.variant.flat:
        return flat_lookup(model, dataset.tree, dataset.features).labels
    return decode_greedy(model, dataset.tree, dataset.features).labels


def validation_metrics(model: CascadeModel, dataset: Dataset) -> dict[str, dict[str, float]]:
    return per_level_metrics(predict_labels(model, dataset), dataset.labels, model.levels)


def batch_loss(
    model: CascadeModel,
    tree: TaxonomyTree,
    features: np.ndarray,
    labels: np.ndarray,
    weights: Sequence[float],
    focal: FocalParams = FocalParams(),
    rng: np.random.Generator | None = None,
    backward: bool = True,
) -> tuple[float, list[float]]:
    """Teacher-forced forward pass and weighted focal loss over one batch.

    With ``backward`` the parameter gradients are reset and then filled.
    Dropout is active only when ``rng`` is given.
    """
    levels = model.levels
    masks = None if model.variant.flat else teacher_forcing_masks(tree, labels, levels)
    outputs = model.forward(features, masks, training=rng is not None, rng=rng)
    grads, losses = {}, []
    for w, lv in zip(weights, levels):
        l, g = focal_loss_batch(outputs[lv].probs, labels[:, lv], focal, lv)
        losses.append(l)
        grads[lv] = w * g
    loss = total_loss(losses, weights)
    if backward and math.isfinite(loss):
        model.zero_grad()
        model.backward(grads)
    return loss, losses


def fit(
    model: CascadeModel,
    train: Dataset,
    val: Dataset,
    config: TrainConfig | None = None,
    monitor: Callable[[CascadeModel, int], float] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> FitResult:
    """Train with teacher forcing; keep the epoch with the best deepest-level weighted F1.

    ``monitor(model, epoch)`` replaces the validation metric when given.
    On return the model holds the best parameters.
    """
    config = config or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation splits must be non-empty")
    if set(train.ids) & set(val.ids):
        raise DataError("training and validation splits overlap")
    for ds in (train, val):
        if ds.tree.counts != model.counts:
            raise DataError(f"dataset taxonomy {ds.tree.counts} does not match model {model.counts}")
    weights = config.weights_for(model.variant)
    focal = FocalParams(config.focal_alpha, config.focal_gamma)
    shuffle_seed, dropout_seed = spawn_seeds(config.seed, 2)
    shuffle_rng, dropout_rng = make_rng(shuffle_seed), make_rng(dropout_seed)
    opt = AdamW(
        model.layers,
        AdamWConfig(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay),
    )
    sched = PlateauScheduler(config.lr, config.scheduler_factor, config.scheduler_patience, config.min_lr)
    stopper = EarlyStopping(config.early_stop_patience)
    levels = model.levels
    deepest = levels[-1].label
    tree = train.tree
    logs: list[EpochLog] = []
    best_state = model.snapshot()
    n = len(train)

    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(n)
        sums = np.zeros(len(levels))
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            loss, losses = batch_loss(
                model, tree, train.features[idx], train.labels[idx], weights, focal, dropout_rng
            )
            if not math.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite loss at epoch {epoch}, batch {b}")
            try:
                opt.step()
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}") from None
            sums += np.array(losses) * len(idx)

        val_metrics = validation_metrics(model, val)
        metric = monitor(model, epoch) if monitor else val_metrics[deepest]["weighted_f1"]
        improved = stopper.step(epoch, metric)
        if improved:
            best_state = model.snapshot()
        entry = EpochLog(
            epoch,
            {lv.label: float(s / n) for lv, s in zip(levels, sums)},
            val_metrics,
            opt.lr,
            float(metric),
            improved,
        )
        logs.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.debug("epoch %d loss %.4f monitored %.4f lr %.2e", epoch, float(sums.sum() / n), metric, opt.lr)
        opt.lr = sched.step(metric)
        if stopper.should_stop:
            break

    model.load_state(best_state)
    return FitResult(best_state, stopper.best_epoch, stopper.best, logs, stopper.should_stop)


# progressive chain -------------------------------------------------------


class ChainError(DataError):
    pass


@dataclass
class Stage:
    variant: Variant
    train: Dataset
    val: Dataset
    test: Dataset | None = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)


@dataclass
class StageResult:
    variant: str
    model: CascadeModel
    fit: FitResult
    transferred: list[str]
    test_metrics: dict | None = None


def check_chain_step(prev: Stage, nxt: Stage) -> None:
    if not set(prev.variant.levels) <= set(nxt.variant.levels):
        raise ChainError(
            f"stage {nxt.variant.value} does not extend the levels of {prev.variant.value}"
        )
    a, b = prev.train.tree, nxt.train.tree
    for lv in prev.variant.levels:
        extra = set(b.names[lv]) - set(a.names[lv])
        if extra:
            raise ChainError(
                f"{nxt.variant.value} taxonomy has {lv.label} taxa unknown to "
                f"{prev.variant.value}: {sorted(extra)[:5]}"
            )


def warm_start(prev: CascadeModel, prev_tree: TaxonomyTree, new: CascadeModel, new_tree: TaxonomyTree) -> list[str]:
    """Copy the adapter and every head whose shapes and label spaces agree."""
    copied = []
    src, dst = prev.named_layers(), new.named_layers()
    for name in transferable(prev, new):
        if name.startswith("heads/"):
            level = Level.parse(name.split("/")[1])
            if any(prev_tree.names[lv] != new_tree.names[lv] for lv in range(level + 1)):
                continue
        dst[name].weight[...] = src[name].weight
        dst[name].bias[...] = src[name].bias
        copied.append(name)
    return copied


def progressive_chain(
    stages: Sequence[Stage],
    config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    on_stage: Callable[[StageResult], None] | None = None,
) -> list[StageResult]:
    """Train each stage in order, warm-starting from the previous stage's model."""
    config = config or TrainConfig()
    if not stages:
        raise ChainError("empty stage list")
    for a, b in zip(stages, stages[1:]):
        check_chain_step(a, b)
    results: list[StageResult] = []
    prev_model = prev_tree = None
    for i, stage in enumerate(stages):
        tree = stage.train.tree
        model = CascadeModel.for_tree(
            stage.variant, tree, stage.train.dim, config=model_config, seed=config.seed + i
        )
        copied = warm_start(prev_model, prev_tree, model, tree) if prev_model is not None else []
        log.info("stage %s: transferred %s", stage.variant.value, copied or "nothing")
        # each stage uses its own variant's default loss weights
        result = fit(model, stage.train, stage.val, replace(config, loss_weights=None))
        test = None
        if stage.test is not None:
            test = validation_metrics(model, stage.test)
        res = StageResult(stage.variant.value, model, result, copied, test)
        results.append(res)
        if on_stage:
            on_stage(res)
        prev_model, prev_tree = model, tree
    return results
