"""Hierarchy-aware classification over a fixed five-level taxonomy."""

from hiertax.taxonomy import Level, TaxonomyTree, build_tree, filter_min_samples
from hiertax.model import CascadeModel, ModelConfig, Variant, masked_softmax
from hiertax.data import Dataset, SplitSpec, SyntheticSpec, generate_synthetic, stratified_split
from hiertax.training import TrainConfig, fit, progressive_chain
from hiertax.inference import decode_beam, decode_greedy, decode_levelwise, flat_lookup
from hiertax.evaluation import distance_stats, error_propagation, per_level_metrics

__version__ = "0.1.0"
