"""Desk-scale DeepCluster lab: numpy convnets, clustering diagnostics, IA sampling."""
from .clustering import KMeansResult, kmeans, pseudo_labels
from .data import ImageDataset, Phase, Split, TransformSpec, apply_transforms, load_dataset, load_idx, sobel
from .errors import ConfigError, DataFormatError, DatasetNotFoundError, DeepClusterError, NonFiniteError
from .features import FeatureMatrix, PcaModel, extract_features, fit_pca, l2_normalize, postprocess, whiten
from .ia_select import IaDistribution, rank_candidates, sample_ia
from .metrics import accuracy, cycle_consistency, ia, nmi
from .nn import Network, NetworkConfig, OptimizerState, backward, build_network, forward, reset_head, sgd_step
from .pipeline import (CycleRecord, ProbeResult, RunConfig, RunLog, fmnist_config, halt_sweep, linear_probe,
                       run_deepcluster, sweep)

__version__ = "0.1.0"
