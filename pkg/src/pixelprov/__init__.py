"""pixelprov: AI-generated-image detection with per-pixel source attribution.

Builds forged training corpora from authentic images, trains a dual-decoder
segmentation/classification network with reverse cross-attention, and
evaluates robustness under JPEG degradation.
"""

from .datapipe import (
    AugmentPolicy,
    Manifest,
    ManifestError,
    Sample,
    SampleRecord,
    augment,
    center_crop,
    epoch_subsample,
    random_crop,
    with_val_holdout,
)
from .estimator import AIImageDetector, check_images, check_labels, check_masks
from .evalkit import (
    EvalReport,
    accuracy,
    emit_report,
    parse_delimited,
    per_source_report,
    robustness_sweep,
    seg_metrics,
)
from .forge import (
    FormatError,
    LabelConfig,
    MaskPair,
    Rect,
    SourceCategory,
    assign_labels,
    blend_inpaint,
    copy_move,
    decode_jpeg,
    forge_dataset,
    jpeg_align,
    splice,
    synth_inpaint_stub,
    target_masks,
)
from .model import (
    DetectorNet,
    EncoderConfig,
    MultiScaleFeatures,
    PredictionBundle,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    LossWeights,
    NumericsError,
    TrainConfig,
    early_stop_check,
    fit,
    seg_loss,
    total_loss,
    train_epoch,
)

__version__ = "0.1.0"
