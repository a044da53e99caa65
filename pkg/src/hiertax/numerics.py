"""Small float64 autodiff-by-hand core: linear layers, ReLU, dropout, softmax, AdamW.

Arrays are plain numpy float64 matrices (batch x features). Every layer keeps
what it needs for its own backward pass; there is no general graph.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from hiertax.errors import DataError, DimensionError, DivergenceError

DTYPE = np.float64


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


class Linear:
    """Affine map ``y = x @ W.T + b`` with gradient and AdamW moment buffers.

    Weights start uniform in +-sqrt(6 / (n_in + n_out)), biases at zero; with
    no rng everything starts at zero.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = n_in, n_out
        bound = np.sqrt(6.0 / (n_in + n_out))
        if rng is None:
            self.weight = np.zeros((n_out, n_in), dtype=DTYPE)
        else:
            self.weight = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.bias = np.zeros(n_out, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.m_weight = np.zeros_like(self.weight)
        self.v_weight = np.zeros_like(self.weight)
        self.m_bias = np.zeros_like(self.bias)
        self.v_bias = np.zeros_like(self.bias)
        self.steps = 0
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"linear layer expects (batch, {self.n_in}) input, got {x.shape}"
            )
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        self.grad_weight += grad_out.T @ self._x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grad(self) -> None:
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def grads(self) -> dict[str, np.ndarray]:
        return {"weight": self.grad_weight, "bias": self.grad_bias}


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def dropout_mask(
    shape: tuple[int, ...], rate: float, training: bool, rng: np.random.Generator | None
) -> np.ndarray | None:
    """Inverted-dropout scale mask, or ``None`` when dropout is a no-op."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(
    x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    mask = dropout_mask(x.shape, rate, training, rng)
    return (x if mask is None else x * mask), mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax, row-wise. Zero-probability entries get 0."""
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


@dataclass
class AdamWConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adamw_step(
    layer: Linear,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update of ``layer`` in place."""
    for g in (layer.grad_weight, layer.grad_bias):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergence: non-finite gradient")
    layer.steps += 1
    t = layer.steps
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in (
        (layer.weight, layer.grad_weight, layer.m_weight, layer.v_weight),
        (layer.bias, layer.grad_bias, layer.m_bias, layer.v_bias),
    ):
        p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, layers: list[Linear], config: AdamWConfig | None = None):
        self.layers = layers
        self.config = config or AdamWConfig()
        self.lr = self.config.lr

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def step(self) -> None:
        c = self.config
        for layer in self.layers:
            adamw_step(layer, self.lr, c.beta1, c.beta2, c.eps, c.weight_decay)


# gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> dict[str, bool]:
        return {k: v < self.tolerance for k, v in self.max_rel_error.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradient_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients to central differences of ``loss_fn``.

    ``params`` are perturbed in place and restored; ``loss_fn`` must be
    deterministic and read the current parameter values.
    """
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {a.shape} != param shape {p.shape}")
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        err = relative_error(a, num)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report


# checkpoints -------------------------------------------------------------

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps (byte-stable)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", _FIXED_DATE), buf.getvalue())
        if meta is not None:
            text = json.dumps(meta, sort_keys=True, indent=1)
            zf.writestr(zipfile.ZipInfo("__meta__.json", _FIXED_DATE), text)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, meta = {}, {}
    try:
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                data = zf.read(name)
                if name == "__meta__.json":
                    meta = json.loads(data)
                elif name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return arrays, meta


def assign_arrays(targets: Mapping[str, np.ndarray], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``targets`` in place; any key or shape mismatch fails."""
    missing = sorted(set(targets) - set(arrays))
    extra = sorted(set(arrays) - set(targets))
    if missing or extra:
        raise DimensionError(f"checkpoint keys differ: missing={missing} unexpected={extra}")
    for key, dst in targets.items():
        src = arrays[key]
        if src.shape != dst.shape:
            raise DimensionError(f"{key}: checkpoint shape {src.shape} != model shape {dst.shape}")
        dst[...] = src
