"""Non-backtracking spectral estimation for long low-rank matrices from sparse samples."""

from .estimator import ModelParams, compute_gamma_matrix, compute_params, predict_gamma
from .harness import InstanceSpec, SolverSpec, run_instance
from .nbt_operator import TwoPathSet, apply_B, apply_B_transpose, enumerate_two_paths
from .sparse_core import ObservedMatrix, build_graph, ingest, prune_degree_one
from .spectral import arnoldi_topk, classify_spectrum, eigenpairs
from .synth import GroundTruth, SampleSpec, gen_rank_r, sample_observed, unfold_tensor_cp

__version__ = "0.1.0"
