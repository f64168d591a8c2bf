"""Route recovery from noisy, sparsely sampled GPS traces.

A chain-structured conditional random field scores road-state candidates per
observation and feasible routes per gap; exact dynamic programming decodes
the most likely route. The package also ships a synthetic benchmark
generator, a training/evaluation pipeline, and a batch CLI.
"""

from .crf_engine import (
    Assignment,
    CrfModel,
    MatchResult,
    TrainConfig,
    TrainReport,
    load_model,
    log_likelihood_and_gradient,
    log_partition,
    log_score,
    match,
    save_model,
    train,
    viterbi,
)
from .evaluation import ErrorTaxonomy, EvalReport, categorize_errors, emit_report, error_rates
from .features import (
    FeatureCatalog,
    FilterConfig,
    Scaler,
    apply_scaler,
    base_complex_catalog,
    base_simple_catalog,
    default_catalog,
    fit_scaler,
    path_features,
    point_features,
)
from .geometry import GeoPoint, PlanePoint, Projection
from .lattice import LabeledLattice, Lattice, LatticeConfig, build_lattice, label_lattice
from .road_network import (
    Path,
    RoadNetwork,
    RoadState,
    feasible_paths,
    load_network,
    nearest_road_states,
)
from .synthgen import GenConfig, gen_dataset, gen_network, gen_trajectory
from .trajectory_io import (
    GroundTruth,
    Observation,
    Trajectory,
    downsample_even,
    load_ground_truth,
    parse_observations,
    split_train_test,
)

__version__ = "0.1.0"
