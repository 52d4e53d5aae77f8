"""Convolutional fusion networks on a small deterministic numpy engine.

Side branches (1x1 convolution + global average pooling) hang off the
pooling layers of a plain CNN trunk, get stacked with the main-branch
feature, and are fused by a sum, shared-filter, or locally-connected
module before a single classifier.  The package ships the graph builders,
a reverse-mode engine with gradient oracles, the SGD trainer, data
pipelines, a transfer-evaluation harness, and the ``cfnet`` CLI.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, gcn_normalize, load_cifar10, load_cifar100, make_synthetic
from .engine import backward, forward, forward_features
from .fusion import (
    FusionParams,
    fuse_conv,
    fuse_lc,
    fuse_sum,
    fusion_param_count,
    init_lc,
    prediction_strategy_audit,
    stack_branches,
)
from .gradcheck import grad_check
from .graph import (
    GraphSpec,
    NodeSpec,
    build_cfn_cifar,
    build_generic_cfn,
    build_plain_cifar_cnn,
    init_params,
    param_breakdown,
    param_count,
)
from .train import TrainConfig, evaluate, lr_schedule, sgd_step, train
from .transfer import (
    FeatureMatrix,
    extract_fused_features,
    knn_retrieve,
    linear_probe,
    mean_ap,
    ns_score,
    rank_feature_maps,
)

__version__ = "0.1.0"
