from .batches import ManifestDataset, batch_iter
from .images import ImageBuffer, load_image, resize_normalize
from .manifest import (
    LABELS,
    DatasetManifest,
    SampleRecord,
    TransformSpec,
    apply_transform,
    augment_plan,
    build_manifest,
    patient_split,
)

__all__ = [
    "LABELS",
    "DatasetManifest",
    "ImageBuffer",
    "ManifestDataset",
    "SampleRecord",
    "TransformSpec",
    "apply_transform",
    "augment_plan",
    "batch_iter",
    "build_manifest",
    "load_image",
    "patient_split",
    "resize_normalize",
]
