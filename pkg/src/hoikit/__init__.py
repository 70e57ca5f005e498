"""Metric-scale 4D human-object interaction reconstruction toolkit."""

__version__ = "0.1.0"

from .body_model import BodyState, Skeleton, default_skeleton
from .contact_opt import LossWeights, OptimizerConfig, TrajectoryOptimizer, TrajectoryState, optimize_trajectory
from .depth_align import DepthAligner, HumanDepthAligner
from .geometry import CameraIntrinsics, RigidTransform, Rotation, TriMesh
from .hypothesis_select import HypothesisSelector, SelectionConfig, select_sequence
from .io_ingest import SequenceBundle, load_manifest, write_manifest
from .metrics import EvalReport, evaluate_sequence
from .scale_search import ScaleSearch, estimate_scale
from .synth_bench import SuiteConfig, SynthConfig, generate_sequence, run_benchmark

__all__ = [
    "BodyState", "CameraIntrinsics", "DepthAligner", "EvalReport", "HumanDepthAligner", "HypothesisSelector",
    "LossWeights", "OptimizerConfig", "RigidTransform", "Rotation", "ScaleSearch", "SelectionConfig",
    "SequenceBundle", "Skeleton", "SuiteConfig", "SynthConfig", "TrajectoryOptimizer", "TrajectoryState", "TriMesh",
    "default_skeleton", "estimate_scale", "evaluate_sequence", "generate_sequence", "load_manifest",
    "optimize_trajectory", "run_benchmark", "select_sequence", "write_manifest",
]
