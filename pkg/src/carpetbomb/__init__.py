"""carpetbomb: universal task-agnostic adversarial patches that disrupt
encoder feature maps, with feature forensics and multi-task evaluation."""

from .core import (
    FeatureMask,
    Image,
    Noise,
    NoiseBudget,
    Patch,
    PixelMask,
    Placement,
    apply_noise,
    apply_patch,
    clip_unit,
    derive_feature_mask,
    load_attack,
    load_noise,
    load_patch,
    make_pixel_mask,
    save_noise,
    save_patch,
)
from .errors import CarpetError, CraftRuntimeError, PlacementError, ValidationError
from .evaluate import (
    Box,
    EvalConfig,
    EvalReport,
    average_precision,
    eval_classification,
    eval_detection_contextual,
    eval_segmentation,
    iou,
    nms,
)
from .forge import (
    CraftConfig,
    LossTrace,
    NoiseCraftConfig,
    craft_carpet_patch,
    craft_feature_noise_tmifgsm,
    craft_forced,
    craft_task_patch,
)
from .forensics import (
    ChannelDistanceProfile,
    FrequencyBins,
    ImpactMap,
    channel_distance_profile,
    checkpoint_drift,
    frequency_bins,
    relative_profile,
    spatial_impact_map,
    top_attacked_channels,
)
from .losses import (
    CombinedLossConfig,
    FeatureTargetSpec,
    combined_loss,
    feature_loss,
    task_loss,
)
from .models import (
    ModelHandle,
    available_backbones,
    build_model,
    extract_features,
    input_gradient,
    load_checkpoint_sequence,
    task_forward,
)

from . import toy  # noqa: F401  (registers the desk-scale adapter)
from . import zoo  # noqa: F401  (registers the full-scale adapters)

__version__ = "0.1.0"
