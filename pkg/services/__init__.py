"""
HLSIRM - Services Package
"""
from services.clustering import select_k, spectral_cluster
from services.data_service import load_dataset, recode, simulate_dataset
from services.evaluate import classification_metrics, convergence_diagnostics, posterior_predictive
from services.postprocess import align_chain, interaction_adjusted, procrustes_rotation
from services.sampler import run_chain

__all__ = [
    # Data
    "load_dataset",
    "recode",
    "simulate_dataset",
    # Sampling
    "run_chain",
    # Post-processing
    "procrustes_rotation",
    "align_chain",
    "interaction_adjusted",
    # Clustering
    "spectral_cluster",
    "select_k",
    # Evaluation
    "posterior_predictive",
    "classification_metrics",
    "convergence_diagnostics",
]
