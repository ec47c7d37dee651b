"""Skeleton-based action recognition with spatial-temporal graph convolutions.

Submodules: :mod:`stgcn.graph` (skeleton graph and partition strategies),
:mod:`stgcn.data` (OpenPose ingestion and dataset files), :mod:`stgcn.net`
(model, gradients, checkpoints), :mod:`stgcn.train` (SGD loop, evaluation,
synthetic data) and :mod:`stgcn.cli`.
"""
from .data import (
    DatasetManifest,
    InputNorm,
    SkeletonClip,
    SkeletonFrame,
    SkeletonTemplate,
    assemble_clip,
    compute_template,
    export_tensor,
    import_tensor,
    joint_recognition_rate,
    load_manifest,
    normalize_coordinates,
    pad_or_trim,
    parse_openpose_frame,
    quality_filter,
    split_dataset,
)
from .errors import ConfigurationError, DimensionError, FormatError, InputError, StgcnError, TruncationError
from .graph import Strategy, build_adjacency, build_openpose18_graph, label_map, neighbor_set, normalize_partitions, partitioned_adjacency
from .net import (
    ModelConfig,
    ModelParams,
    backward,
    finite_difference_check,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    spatial_graph_conv,
    temporal_conv,
)
from .train import TrainConfig, TrainHistory, evaluate, lr_schedule, prepare_model, sgd_step, synthetic_dataset

# the training loop itself is stgcn.train.train; re-exporting it here would shadow the submodule

__version__ = "0.1.0"
