"""Histogram-based, leaf-wise gradient boosted trees."""
from .binning import BinnedData, FeatureBins, build_histograms, quantile_boundaries
from .booster import GbdtModel, GbdtParams, fit, predict
from .tree import Split, Tree, find_best_split, grow_tree, partition

__all__ = [
    "BinnedData", "FeatureBins", "GbdtModel", "GbdtParams", "Split", "Tree",
    "build_histograms", "find_best_split", "fit", "grow_tree", "partition", "predict", "quantile_boundaries",
]
