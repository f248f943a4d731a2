"""Parameter-efficient binary polyp segmentation.

EfficientNetB0 encoder truncated to strides 8/16/32, a full-scale-connected
partial decoder built from asymmetric convolution and squeeze-and-excitation
blocks, plus the data/training/evaluation pipeline and a parameter auditor.
"""

from .blocks import (
    AsymmetricConvBlock,
    ChannelReduce,
    SqueezeExcitation,
    block_param_count,
    resample,
)
from .data import (
    Sample,
    SplitSpec,
    augment_offline,
    load_dataset,
    preprocess,
    split_samples,
)
from .encoder import EncoderConfig, EncoderFeatures, EfficientNetB0Encoder, encoder_param_count, load_encoder
from .exceptions import CheckpointError, ConfigError
from .metrics import MetricsReport, dice, evaluate, iou, segmentation_loss
from .model import (
    EffiSegNet,
    ModelConfig,
    ParameterAudit,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import Adam, EarlyStopper, TrainConfig, adam_step, train

__version__ = "0.1.0"
