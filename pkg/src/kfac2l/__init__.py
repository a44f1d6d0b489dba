"""KFAC and two-level KFAC natural-gradient training at desk scale."""
from .fisher import FisherOracle
from .kfac import KfacBlock, build_blocks, damping_pi, estimate_factors, kfac_apply_inverse
from .network import ConvSpec, DenseSpec, Network, backward, forward, sample_targets
from .optim import OptimizerConfig, Problem, RunRecord, grid_search, train

__version__ = "0.1.0"
