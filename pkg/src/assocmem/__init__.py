"""Training dynamics of a linear associative memory under cross-entropy."""

__version__ = "0.1.0"

from .model import (EmbeddingSet, MarginVector, TaskSpec, correlated_pair_embeddings, dense_hessian,
                    grad, hessian_vector_product, loss, margins, orthonormal_embeddings, predict,
                    predict_all, scores, sphere_embeddings, zero_one_loss)
from .particles import CorrelationData, ParticleState, correlations, particle_update, project
from .dynamics import DynamicsConfig, TrajectoryRecord, gd_run, gf_run, make_rng, run, sgd_run, sgf_run
from .closed_form import (BinaryOrthogonalInstance, TwoTokenInstance, binary_margin_closed, lambert_w0,
                          spike_lower_bound)
from .analysis import GridSpec, PhaseSpec, excess_risk, landscape, phase_diagram, sharpness

__all__ = [
    "__version__",
    "EmbeddingSet", "MarginVector", "TaskSpec", "correlated_pair_embeddings", "dense_hessian", "grad",
    "hessian_vector_product", "loss", "margins", "orthonormal_embeddings", "predict", "predict_all", "scores",
    "sphere_embeddings", "zero_one_loss",
    "CorrelationData", "ParticleState", "correlations", "particle_update", "project",
    "DynamicsConfig", "TrajectoryRecord", "gd_run", "gf_run", "make_rng", "run", "sgd_run", "sgf_run",
    "BinaryOrthogonalInstance", "TwoTokenInstance", "binary_margin_closed", "lambert_w0", "spike_lower_bound",
    "GridSpec", "PhaseSpec", "excess_risk", "landscape", "phase_diagram", "sharpness",
]
