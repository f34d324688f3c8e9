"""Key-based access control for object detection models.

A detector trained with a secret key permutes the channels of selected
feature maps on every forward pass.  Queries made with the same key recover
full accuracy; queries made without the key (or with a wrong key) see a
model whose selected activations are scrambled relative to what it learned.
The package also ships the block-wise pixel-shuffling baseline that encrypts
input images instead of feature maps, a toy multi-scale detector plus
synthetic data to exercise both at desk scale, and VOC-style mAP scoring.
"""

from featlock.keyed_transforms import (
    SecretKey,
    PermutationVector,
    derive_permutation,
    apply_permutation,
    invert_permutation,
    encrypt_image,
    decrypt_image,
)
from featlock.detector import (
    DetectorConfig,
    Detection,
    KeyedDetector,
    build_model,
    generate_priors,
    decode_and_nms,
    save_checkpoint,
    load_checkpoint,
)
from featlock.data import (
    Sample,
    SynthSpec,
    VocRecord,
    generate_dataset,
    parse_voc_annotation,
    resize_and_normalize,
    augment,
)
from featlock.training import TrainConfig, match_priors, multibox_loss, smooth_l1, train, grad_check
from featlock.evaluation import EvalReport, iou, average_precision, evaluate
from featlock.attacks import AttackSuiteResult, run_plain, run_wrong_keys, site_sweep, shf_sweep

__version__ = "0.1.0"

__all__ = [
    "SecretKey",
    "PermutationVector",
    "derive_permutation",
    "apply_permutation",
    "invert_permutation",
    "encrypt_image",
    "decrypt_image",
    "DetectorConfig",
    "Detection",
    "KeyedDetector",
    "build_model",
    "generate_priors",
    "decode_and_nms",
    "save_checkpoint",
    "load_checkpoint",
    "Sample",
    "SynthSpec",
    "VocRecord",
    "generate_dataset",
    "parse_voc_annotation",
    "resize_and_normalize",
    "augment",
    "TrainConfig",
    "match_priors",
    "multibox_loss",
    "smooth_l1",
    "train",
    "grad_check",
    "EvalReport",
    "iou",
    "average_precision",
    "evaluate",
    "AttackSuiteResult",
    "run_plain",
    "run_wrong_keys",
    "site_sweep",
    "shf_sweep",
]
