"""Sparse dynamics and learned nonholonomic constraints for OOD prediction."""

from .config import PipelineConfig, default_config
from .datasets import DatasetBundle, GenerationConfig, generate_bundle, load_bundle, save_bundle
from .evaluation import STANDARD_MODELS, EvalReport, evaluate
from .gp import GpConfig, IgpModel, ScalarGp, fit, fit_igp
from .manifold import ManifoldConfig, ManifoldModel, build_constraint_dataset, eval_constraint, train_manifold
from .metric import DiagonalPseudometric, MetricConfig, extract_mask, train_pseudometric
from .project import predict_projected, project, project_batch
from .systems import PlanarQuadrotor, Unicycle, make_system, rollout

__version__ = "0.1.0"
