"""Graph neural network forecasting for per-individual EMA time series."""
from .autodiff import Adam, Tensor
from .data import IndividualSeries, RawCohort, SyntheticSpec, generate_synthetic, load_cohort, preprocess
from .experiments import ExperimentPlan, ExperimentReport, percent_change, run_experiment, write_report
from .graphs import Graph, build_graph, graph_correlation, normalize, sparsify
from .models import FAMILIES, ModelConfig, build_model, extract_learned_graph
from .training import EvalRecord, TrainConfig, evaluate, mse, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tensor", "IndividualSeries", "RawCohort", "SyntheticSpec", "generate_synthetic", "load_cohort",
    "preprocess", "ExperimentPlan", "ExperimentReport", "percent_change", "run_experiment", "write_report", "Graph",
    "build_graph", "graph_correlation", "normalize", "sparsify", "FAMILIES", "ModelConfig", "build_model",
    "extract_learned_graph", "EvalRecord", "TrainConfig", "evaluate", "mse", "train",
]
