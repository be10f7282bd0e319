"""Torch-side export adapter for the protoscope evaluation engine.

The adapter runs part-prototype torch models, writes interchange bundles
(tensor containers plus a JSON manifest), and forwards engine-generated
perturbed images.  It talks to the engine exclusively through files and the
``protoscope`` command line; it never imports the engine.
"""

from .export import (
    AdapterConfig,
    artifacts_from_features,
    export_bundle,
    forward_on_perturbed,
    register_saliency_method,
    resolve_saliency_method,
    saliency_for_sample,
    tap_features,
    upsample_bicubic,
)
from .interchange import (
    AdapterError,
    decode_tensor,
    encode_tensor,
    read_tensor,
    write_tensor,
)
from .models import (
    MODEL_KINDS,
    BlobDataset,
    ClassSpecificProtoNet,
    IndirectProtoNet,
    SharedSlotProtoNet,
    build_model,
    load_checkpoint,
    make_blob_dataset,
    save_checkpoint,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "BlobDataset",
    "ClassSpecificProtoNet",
    "IndirectProtoNet",
    "MODEL_KINDS",
    "SharedSlotProtoNet",
    "artifacts_from_features",
    "build_model",
    "decode_tensor",
    "encode_tensor",
    "export_bundle",
    "forward_on_perturbed",
    "load_checkpoint",
    "make_blob_dataset",
    "read_tensor",
    "register_saliency_method",
    "resolve_saliency_method",
    "saliency_for_sample",
    "save_checkpoint",
    "tap_features",
    "train_model",
    "upsample_bicubic",
    "write_tensor",
]
