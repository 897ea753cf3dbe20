from .experiment import (
    ComponentSpec,
    ExperimentConfig,
    ExperimentResult,
    LabelVault,
    extract_features,
    load_models,
    run_experiment,
    score_entries,
)
from .manifest import ManifestEntry, assign_validation_split, build_contexts, load_manifest, write_manifest
from .segfuse import group_masks, segment_fuse
from .store import BUILTIN_FEATURES, FeatureRecord, FeatureSpec, FeatureStore, ingest_external_features

__all__ = [
    "BUILTIN_FEATURES", "ComponentSpec", "ExperimentConfig", "ExperimentResult", "FeatureRecord",
    "FeatureSpec", "FeatureStore", "LabelVault", "ManifestEntry", "assign_validation_split",
    "build_contexts", "extract_features", "group_masks", "ingest_external_features", "load_manifest",
    "load_models", "run_experiment", "score_entries", "segment_fuse", "write_manifest",
]
