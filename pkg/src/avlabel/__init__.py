"""avlabel: aggregate AV scan reports into family labels, confidence, and tags."""

__version__ = "0.1.0"

from .aliasing import AliasMap, AliasParams, CooccurrenceIndex, coocur, escore
from .confidence import (
    ConfidenceFeatures,
    DifficultyModel,
    extract_features,
    score,
    threshold_filter,
    train_model,
)
from .errors import LabelerError
from .ibcc import (
    InferenceInstance,
    SparsePosterior,
    build_instance,
    plurality_vote,
    run_inference,
    variational_lower_bound,
)
from .dense_ref import dense_oracle
from .parsing import DetectionParser, LexicalCategory, Rulebook, tokenize
from .pipeline import (
    GroundTruth,
    LabelOutput,
    PipelineConfig,
    evaluate,
    load_ground_truth,
    run_pipeline,
)
from .reports import ScanReport, load_reports, normalize_report
from .synth import scaling_probe, synth_generate
from .taxonomy import Taxonomy, finalize_category, finalize_taxonomy
from .votes import AVClusterMap, TagThresholds, collapse_correlated, normalize_tag

__all__ = [
    "AliasMap",
    "AliasParams",
    "AVClusterMap",
    "ConfidenceFeatures",
    "CooccurrenceIndex",
    "DetectionParser",
    "DifficultyModel",
    "GroundTruth",
    "InferenceInstance",
    "LabelOutput",
    "LabelerError",
    "LexicalCategory",
    "PipelineConfig",
    "Rulebook",
    "ScanReport",
    "SparsePosterior",
    "TagThresholds",
    "Taxonomy",
    "build_instance",
    "collapse_correlated",
    "coocur",
    "dense_oracle",
    "escore",
    "evaluate",
    "extract_features",
    "finalize_category",
    "finalize_taxonomy",
    "load_ground_truth",
    "load_reports",
    "normalize_report",
    "normalize_tag",
    "plurality_vote",
    "run_inference",
    "run_pipeline",
    "scaling_probe",
    "score",
    "synth_generate",
    "threshold_filter",
    "tokenize",
    "train_model",
    "variational_lower_bound",
]
