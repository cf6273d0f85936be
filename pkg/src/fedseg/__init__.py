"""Desk-scale federated learning simulator for breast-lesion segmentation.

Trains a miniature attention U-Net across simulated non-IID clients with
proximally regularized local updates, evaluating the aggregated global model
after every round.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    DEFAULT_PLAN,
    AugmentationConfig,
    Label,
    PartitionPlan,
    Sample,
    augment,
    build_partition,
    generate_phantom,
    load_bus_directory,
    train_test_split,
)
from .fedcore import (  # noqa: F401
    Adam,
    ClientState,
    FedConfig,
    GlobalState,
    RoundReport,
    aggregate,
    local_train,
    run_federation,
    run_round,
)
from .metrics import (  # noqa: F401
    ConfusionCounts,
    MetricsRow,
    confusion,
    metrics_from_counts,
    soft_dice_loss,
)
from .model import AttentionUNet, ModelConfig  # noqa: F401
from .tensor import Tensor, grad_check, no_grad  # noqa: F401
