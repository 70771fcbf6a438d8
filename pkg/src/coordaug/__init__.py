"""Affinity-guided diffusion editing augmentation for object detection datasets.

One object per image is chosen by category affinity and size, re-rendered as a
related category through a DDIM invert-then-edit loop that keeps the rest of
the scene pinned to the original latents, and kept only if a classifier still
recognises the new category.
"""
from .affinity import (
    AffinityMatrix,
    EmbeddingTable,
    FileEmbeddingProvider,
    affinity_threshold,
    build_affinity_matrix,
    embed_categories,
)
from .alignment import align_step, bbox_to_latent_mask, decode_latent, edit_latent, encode_image
from .dataset_io import (
    CategorySet,
    DetectionSample,
    ObjectAnnotation,
    OutputEntry,
    load_dataset,
    write_dataset,
)
from .ddim import (
    NoiseSchedule,
    guided_epsilon,
    invert,
    invert_step,
    make_schedule,
    sample,
    sample_step,
)
from .errors import (
    BackendError,
    ConfigError,
    ConsistencyError,
    DatasetParseError,
    DegenerateMaskError,
    NumericError,
    ValidationError,
)
from .instance_filter import FilterDecision, LabelMap, crop_object, filter_instance
from .pipeline import PipelineConfig, RunReport, diversity_report, run_pipeline
from .strategy import (
    AugmentationPlan,
    ObjectScores,
    StrategyConfig,
    area_score,
    category_score,
    choose_target_category,
    sample_object,
    selection_probabilities,
)

__version__ = "0.1.0"
