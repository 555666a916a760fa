"""Top-k sparsified message passing on heterogeneous circuit graphs."""

from .drelu import CbsrMatrix, drelu_backward, drelu_forward
from .graph import EDGE_TYPES, CsrAdjacency, HeteroGraph, SyntheticSpec, generate_synthetic, load, save
from .kernels import dr_spmm_backward, dr_spmm_forward, max_merge, max_merge_backward
from .model import TrainConfig, init_network, network_forward, train
from .scheduler import PipelineInputs, profile_k, run_pipeline

__version__ = "0.1.0"
