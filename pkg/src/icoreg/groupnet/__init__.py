from .losses import (
    DESC_WEIGHT,
    descriptor_loss,
    descriptor_loss_grad,
    equivariant_loss,
    equivariant_loss_grad,
    invariant_loss,
    invariant_loss_grad,
    loss_residual,
    residual_loss_grad,
    residual_target,
)
from .network import (
    ConvLayer,
    DegenerateFeatureError,
    DenseLayer,
    NetworkWeights,
    RegressorWeights,
    embed,
    embed_prefix,
    extract_group_feature,
    group_conv,
    init_weights,
    pool_descriptor,
    regress_residual,
    regressor_input,
)
from .train import TrainConfig, TrainingDivergedError, TrainingPair, train_embedder, train_regressor
from .weights_io import WeightsFormatError, load_weights, save_weights
