import numpy as np
import pytest

from hiertax.data import SyntheticSpec, generate_synthetic
from hiertax.model import CascadeModel, ModelConfig
from hiertax.taxonomy import TaxonomyTree

# Orders of the masking worked example, with their classes and logits.
DIATOM_ORDERS = [
    ("Naviculales", "Bacillariophyceae", 4.2),
    ("Eunotiales", "Bacillariophyceae", 2.8),
    ("Cymbellales", "Bacillariophyceae", 1.5),
    ("Mastogloiales", "Bacillariophyceae", 0.9),
    ("Cocconeidales", "Bacillariophyceae", 0.3),
    ("Thalassiosirales", "Coscinodiscophyceae", 3.1),
    ("Melosirales", "Coscinodiscophyceae", 1.2),
    ("Fragilariales", "Fragilariophyceae", 2.5),
    ("Tabellariales", "Fragilariophyceae", 0.8),
]
DIATOM_ORDER_PROBS = [0.730, 0.180, 0.049, 0.027, 0.015]

TINY_WIDTHS = {"2L": [6], "3L": [6, 5], "4L": [7, 6, 5]}


def diatom_paths():
    paths = []
    for order, cls, _ in DIATOM_ORDERS:
        for k in range(2):
            paths.append((cls, order, f"{order}-fam", f"{order}-gen", f"{order}-sp{k}"))
    return paths


@pytest.fixture
def diatom_tree():
    return TaxonomyTree.from_name_paths(diatom_paths())


def random_tree(seed, counts=None, max_species=50):
    rng = np.random.default_rng(seed)
    if counts is None:
        c = [int(rng.integers(1, 4))]
        for _ in range(4):
            c.append(int(min(max_species, c[-1] + rng.integers(0, 4))))
        counts = tuple(c)
    ds = generate_synthetic(
        SyntheticSpec(level_counts=counts, dim=2, samples_per_species=(1, 1), seed=seed)
    )
    return ds.tree


def tiny_model(variant, tree, dim=4, seed=0, adapter=0):
    return CascadeModel.for_tree(
        variant, tree, dim, config=ModelConfig(adapter_dim=adapter, widths=TINY_WIDTHS), seed=seed
    )


def random_batch(tree, dim, batch, rng):
    """Features and valid label paths for a batch drawn from ``tree``."""
    species = rng.integers(0, tree.n(4), size=batch)
    return rng.normal(size=(batch, dim)), tree.species_paths[species].copy()


def cascade_gradient_report(model, tree, x, y, tolerance=1e-4):
    """Finite-difference check of the teacher-forced weighted focal loss."""
    from hiertax.numerics import gradient_check
    from hiertax.training import batch_loss

    weights = [1.0 + 0.1 * i for i in range(len(model.levels))]
    batch_loss(model, tree, x, y, weights)
    analytic = {k: v.copy() for k, v in model.grads().items()}

    def loss():
        return batch_loss(model, tree, x, y, weights, backward=False)[0]

    return gradient_check(loss, model.state(), analytic, tolerance=tolerance)
