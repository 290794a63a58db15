"""Hierarchical temporal residual networks for multitemporal land-cover
classification, with a class-driven loss that ties fine predictions to their
coarse ancestors."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("hcrnet")
except PackageNotFoundError:
    __version__ = "0.0.0"

from .errors import (ConfigError, FormatError, HcrError, InputError,
                     MetricError, NumericError, ParseError, ShapeError,
                     SplitError, TaxonomyError, UsageError)
from .estimator import HierarchicalCubeClassifier
from .gradcheck import finite_difference_check
from .hierarchy import (LEVELS, LossWeights, Taxonomy, TransitionMatrix,
                        Transitions, aggregate_labels, build_transition,
                        flat_taxonomy, load_taxonomy, parse_taxonomy,
                        penalty_nll, project_probabilities, reproject_logits,
                        save_taxonomy, total_loss)
from .hpo import (Dimension, SearchSpace, Trial, log_uniform, run_search,
                  sample_prior, tpe_suggest, uniform)
from .metrics import (ClassScores, ConfusionMatrix, confusion, format_scores,
                      hierarchical_report, score_confusion, scores_to_csv)
from .model import (ModelConfig, Network, build_network, load_network,
                    save_network)
from .optim import Adam
from .rasters import (NODATA, check_cube, check_labels, read_cube,
                      read_labels, write_cube, write_labels)
from .sampling import (PatchIndex, draw_patches, empirical_priors,
                       oversampling_weights, patch_entropy, split_patches)
from .synthetic import (ClassSpec, SceneSpec, default_scene_spec,
                        load_scene_config, parse_scene_config,
                        sample_sparse_labels, save_scene_config,
                        synthesize_scene)
from .tensor import Parameter, Tensor, no_grad
from .train import (SceneData, TrainConfig, TrainHistory, derive_class_weights,
                    evaluate_validation, finetune, predict_map, train,
                    weighted_validation_loss)

__all__ = [name for name in dir() if not name.startswith("_")]
