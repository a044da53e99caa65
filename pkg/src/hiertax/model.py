"""Cascaded per-level MLP heads with taxonomy-masked softmax."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from hiertax.errors import ContractViolation, DataError, DimensionError
from hiertax.numerics import (
    Linear,
    assign_arrays,
    dropout_backward,
    dropout_mask,
    load_arrays,
    make_rng,
    relu,
    relu_backward,
    save_arrays,
    softmax_backward,
)
from hiertax.taxonomy import LEVELS, Level, MaskRow, TaxonomyTree


class Variant(str, Enum):
    F_C = "f-c"
    F_S = "f-s"
    H_CO = "h-co"
    H_COF = "h-cof"
    H_COFG = "h-cofg"
    H_COFGS = "h-cofgs"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        try:
            return cls(value.strip().lower().replace("_", "-"))
        except ValueError:
            raise DataError(
                f"unknown variant {value!r}; choose from {[v.value for v in cls]}"
            ) from None

    @property
    def flat(self) -> bool:
        return self in (Variant.F_C, Variant.F_S)

    @property
    def levels(self) -> tuple[Level, ...]:
        if self is Variant.F_C:
            return (Level.CLASS,)
        if self is Variant.F_S:
            return (Level.SPECIES,)
        depth = {"h-co": 2, "h-cof": 3, "h-cofg": 4, "h-cofgs": 5}[self.value]
        return LEVELS[:depth]

    @property
    def deepest(self) -> Level:
        return self.levels[-1]


# Hidden widths and dropout rates of the three head sizes. There is one rate
# per linear layer: the first applies to the backbone part of the input, the
# rest follow each hidden ReLU.
HEAD_WIDTHS = {"2L": (512,), "3L": (512, 256), "4L": (1024, 512, 256)}
HEAD_DROPOUT = {"2L": (0.3, 0.2), "3L": (0.3, 0.2, 0.1), "4L": (0.3, 0.2, 0.2, 0.1)}

LOSS_WEIGHTS = {
    Variant.F_C: (1.0,),
    Variant.F_S: (1.0,),
    Variant.H_CO: (1.0, 1.0),
    Variant.H_COF: (1.0, 1.0, 1.0),
    Variant.H_COFG: (0.8, 0.9, 1.0, 1.2),
    Variant.H_COFGS: (0.8, 0.9, 1.0, 1.2, 1.5),
}


def head_kind(level: Level, flat: bool) -> str:
    if flat or level == Level.CLASS:
        return "2L"
    if level in (Level.ORDER, Level.FAMILY):
        return "3L"
    return "4L"


@dataclass
class ModelConfig:
    """Architecture knobs. ``widths`` overrides :data:`HEAD_WIDTHS` per kind."""

    adapter_dim: int = 0
    widths: dict = field(default_factory=dict)
    dropout: dict = field(default_factory=dict)

    def head_widths(self, kind: str) -> tuple[int, ...]:
        return tuple(self.widths.get(kind, HEAD_WIDTHS[kind]))

    def head_dropout(self, kind: str) -> tuple[float, ...]:
        rates = tuple(self.dropout.get(kind, HEAD_DROPOUT[kind]))
        if len(rates) != len(self.head_widths(kind)) + 1:
            raise DimensionError(f"{kind}: need one dropout rate per linear layer")
        return rates


@dataclass(frozen=True)
class HeadSpec:
    level: Level
    kind: str
    layer_dims: tuple[int, ...]
    dropout_rates: tuple[float, ...]
    backbone_dim: int

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]


def head_specs(
    variant: Variant, counts: Sequence[int], backbone_dim: int, config: ModelConfig | None = None
) -> list[HeadSpec]:
    """Input dim of level l is backbone_dim + sum of class counts of its ancestors."""
    config = config or ModelConfig()
    specs = []
    for lv in variant.levels:
        kind = head_kind(lv, variant.flat)
        ancestors = 0 if variant.flat else sum(counts[k] for k in range(lv))
        dims = (backbone_dim + ancestors, *config.head_widths(kind), counts[lv])
        specs.append(HeadSpec(lv, kind, dims, config.head_dropout(kind), backbone_dim))
    return specs


class Head:
    """MLP ``input -> hidden... -> n`` with ReLU and inverted dropout."""

    def __init__(self, spec: HeadSpec, rng: np.random.Generator):
        self.spec = spec
        dims = spec.layer_dims
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self._pre: list[np.ndarray] = []
        self._masks: list[np.ndarray | None] = []

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        if x.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"{self.spec.level.label} head expects input dim {self.spec.input_dim}, got {x.shape[1]}"
            )
        rates = self.spec.dropout_rates
        bd = self.spec.backbone_dim
        first = dropout_mask((x.shape[0], bd), rates[0], training, rng)
        if first is not None:
            full = np.ones_like(x)
            full[:, :bd] = first
            first = full
            x = x * first
        self._masks = [first]
        self._pre = []
        h = x
        for i, layer in enumerate(self.layers):
            a = layer.forward(h)
            if i == len(self.layers) - 1:
                return a
            self._pre.append(a)
            m = dropout_mask(a.shape, rates[i + 1], training, rng)
            self._masks.append(m)
            h = relu(a) if m is None else relu(a) * m
        raise AssertionError("unreachable")

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g)
            if i > 0:
                g = relu_backward(self._pre[i - 1], dropout_backward(self._masks[i], g))
        return dropout_backward(self._masks[0], g)


# masked softmax and fusion ----------------------------------------------


def _as_mask(mask) -> np.ndarray:
    if isinstance(mask, MaskRow):
        mask = mask.bits
    return np.asarray(mask).astype(bool)


def masked_softmax(logits: np.ndarray, mask=None) -> np.ndarray:
    """Softmax over the entries where ``mask`` is set; others get exactly 0.

    Works row-wise on 2-D input. ``mask=None`` means every entry is valid.
    """
    z = np.asarray(logits, dtype=np.float64)
    if mask is None:
        zm = z
    else:
        m = np.broadcast_to(_as_mask(mask), z.shape)
        if not np.all(m.any(axis=-1)):
            raise ContractViolation("no valid children: mask has no set bits")
        zm = np.where(m, z, -np.inf)
    e = np.exp(zm - zm.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse_features(
    backbone: np.ndarray, ancestor_probs: Sequence[np.ndarray], input_dim: int | None = None
) -> np.ndarray:
    """Concatenate backbone features with ancestor distributions, coarse to fine."""
    parts = [np.asarray(backbone, dtype=np.float64)]
    parts += [np.asarray(p, dtype=np.float64) for p in ancestor_probs]
    x = np.concatenate(parts, axis=-1)
    if input_dim is not None and x.shape[-1] != input_dim:
        raise DimensionError(f"fused feature length {x.shape[-1]} != head input dim {input_dim}")
    return x


# the cascade -------------------------------------------------------------


@dataclass
class LevelOutput:
    level: Level
    logits: np.ndarray
    probs: np.ndarray
    mask: np.ndarray | None

    @property
    def masked_logits(self) -> np.ndarray:
        if self.mask is None:
            return self.logits
        return np.where(self.mask, self.logits, -np.inf)


MaskSource = Callable[[Level, list], "np.ndarray | None"]


class CascadeModel:
    def __init__(
        self,
        variant: Variant | str,
        counts: Sequence[int],
        feature_dim: int,
        config: ModelConfig | None = None,
        seed: int = 0,
        taxonomy_checksum: str = "",
    ):
        self.variant = Variant.parse(variant)
        self.counts = tuple(int(c) for c in counts)
        self.feature_dim = int(feature_dim)
        self.config = config or ModelConfig()
        self.seed = seed
        self.taxonomy_checksum = taxonomy_checksum
        rng = make_rng(seed)
        self.adapter = (
            Linear(feature_dim, self.config.adapter_dim, rng) if self.config.adapter_dim else None
        )
        self.backbone_dim = self.config.adapter_dim or self.feature_dim
        self.specs = head_specs(self.variant, self.counts, self.backbone_dim, self.config)
        self.heads = {s.level: Head(s, rng) for s in self.specs}
        self._cache: dict = {}

    @classmethod
    def for_tree(cls, variant, tree: TaxonomyTree, feature_dim: int, **kw) -> "CascadeModel":
        return cls(variant, tree.counts, feature_dim, taxonomy_checksum=tree.checksum, **kw)

    @property
    def levels(self) -> tuple[Level, ...]:
        return self.variant.levels

    @property
    def layers(self) -> list[Linear]:
        out = [self.adapter] if self.adapter is not None else []
        for lv in self.levels:
            out.extend(self.heads[lv].layers)
        return out

    # forward ------------------------------------------------------------

    def embed(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise DimensionError(
                f"expected features of shape (batch, {self.feature_dim}), got {features.shape}"
            )
        if self.adapter is None:
            return features
        a = self.adapter.forward(features)
        self._cache["adapter_pre"] = a
        return relu(a)

    def head_logits(
        self, level: Level, backbone: np.ndarray, ancestor_probs: Sequence[np.ndarray],
        training: bool = False, rng=None,
    ) -> np.ndarray:
        head = self.heads[level]
        ancestors = [] if self.variant.flat else list(ancestor_probs)
        x = fuse_features(backbone, ancestors, head.spec.input_dim)
        return head.forward(x, training, rng)

    def forward(
        self,
        features: np.ndarray,
        mask_source: MaskSource | Mapping[Level, np.ndarray | None] | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> dict[Level, LevelOutput]:
        """Evaluate the heads coarse to fine.

        ``mask_source`` maps each level to a (batch x n_level) boolean mask, or is
        a callable ``(level, outputs_so_far) -> mask``. ``None`` as a mask (and
        for the coarsest head always) means unrestricted softmax.
        """
        f = self.embed(features)
        outputs: dict[Level, LevelOutput] = {}
        probs: list[np.ndarray] = []
        for i, lv in enumerate(self.levels):
            mask = None
            if i > 0:
                if callable(mask_source):
                    mask = mask_source(lv, list(outputs.values()))
                elif mask_source is not None:
                    if lv not in mask_source:
                        raise ContractViolation(f"missing mask for level {lv.label}")
                    mask = mask_source[lv]
            z = self.head_logits(lv, f, probs, training, rng)
            p = masked_softmax(z, mask)
            outputs[lv] = LevelOutput(lv, z, p, None if mask is None else _as_mask(mask))
            probs.append(p)
        self._cache["outputs"] = outputs
        return outputs

    def backward(self, grad_probs: Mapping[Level, np.ndarray]) -> np.ndarray:
        """Backpropagate gradients w.r.t. each level's probabilities.

        Accumulates parameter gradients and returns the gradient w.r.t. the
        input features.
        """
        outputs: dict[Level, LevelOutput] = self._cache["outputs"]
        gp = {lv: np.zeros_like(out.probs) for lv, out in outputs.items()}
        for lv, g in grad_probs.items():
            gp[lv] = gp[lv] + g
        g_f = None
        for i in range(len(self.levels) - 1, -1, -1):
            lv = self.levels[i]
            g_z = softmax_backward(outputs[lv].probs, gp[lv])
            g_x = self.heads[lv].backward(g_z)
            bd = self.backbone_dim
            g_f = g_x[:, :bd] if g_f is None else g_f + g_x[:, :bd]
            if not self.variant.flat:
                offset = bd
                for k in self.levels[:i]:
                    n = self.counts[k]
                    gp[k] += g_x[:, offset : offset + n]
                    offset += n
        if self.adapter is not None:
            g_f = self.adapter.backward(relu_backward(self._cache["adapter_pre"], g_f))
        return g_f

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    # parameters ---------------------------------------------------------

    def named_layers(self) -> dict[str, Linear]:
        out = {}
        if self.adapter is not None:
            out["adapter"] = self.adapter
        for lv in self.levels:
            for i, layer in enumerate(self.heads[lv].layers):
                out[f"heads/{lv.label}/{i}"] = layer
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {
            f"{name}/{p}": arr
            for name, layer in self.named_layers().items()
            for p, arr in layer.params().items()
        }

    def grads(self) -> dict[str, np.ndarray]:
        return {
            f"{name}/{p}": arr
            for name, layer in self.named_layers().items()
            for p, arr in layer.grads().items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        assign_arrays(self.state(), arrays)

    def definition(self) -> dict:
        return {
            "variant": self.variant.value,
            "feature_dim": self.feature_dim,
            "backbone_dim": self.backbone_dim,
            "counts": list(self.counts),
            "config": asdict(self.config),
            "seed": self.seed,
            "taxonomy_checksum": self.taxonomy_checksum,
            "heads": [
                {
                    "level": s.level.label,
                    "kind": s.kind,
                    "layer_dims": list(s.layer_dims),
                    "dropout": list(s.dropout_rates),
                }
                for s in self.specs
            ],
        }

    def save(self, path: str | Path, extra_meta: Mapping | None = None) -> None:
        meta = {"model": self.definition(), **(extra_meta or {})}
        save_arrays(path, self.state(), meta)

    @classmethod
    def load(cls, path: str | Path, tree: TaxonomyTree | None = None) -> "CascadeModel":
        arrays, meta = load_arrays(path)
        try:
            d = meta["model"]
        except KeyError:
            raise DataError(f"{path}: checkpoint carries no model definition") from None
        if tree is not None and d["taxonomy_checksum"] != tree.checksum:
            raise DataError(
                f"{path}: model was built for taxonomy {d['taxonomy_checksum']}, "
                f"got {tree.checksum}"
            )
        cfg = d["config"]
        config = ModelConfig(cfg["adapter_dim"], cfg.get("widths", {}), cfg.get("dropout", {}))
        model = cls(d["variant"], d["counts"], d["feature_dim"], config, d["seed"], d["taxonomy_checksum"])
        model.load_state(arrays)
        return model


def transferable(a: CascadeModel, b: CascadeModel) -> list[str]:
    """Layer names present in both models with identical parameter shapes."""
    la, lb = a.named_layers(), b.named_layers()
    return [
        name
        for name in la
        if name in lb
        and la[name].weight.shape == lb[name].weight.shape
        and la[name].bias.shape == lb[name].bias.shape
    ]
