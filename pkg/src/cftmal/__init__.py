"""Similarity-mined contrastive fine-tuning and few-shot multimodal
malware-family classification over precomputed embeddings."""

from .cft import AdapterHead, CftConfig, info_nce, refine, train_adapter
from .data import (
    AttributeRecord,
    Corpus,
    DescriptionRecord,
    FormatError,
    SyntheticSpec,
    generate_synthetic,
    load_attributes,
    load_embeddings,
    split_meta,
    write_embeddings,
)
from .distill import KdConfig, distilled_training, kd_loss
from .fusion import FusionModel, MultimodalSample, TeacherModel, init_fusion, init_teacher, teacher_train
from .meta import Episode, MamlConfig, build_pool, evaluate_few_shot, inner_adapt, maml_train, meta_step, sample_episode
from .metrics import AblationSettings, embedding_quality, project_2d, run_ablation, run_pipeline
from .mining import (
    ContrastiveSample,
    MiningConfig,
    NegativeSet,
    PositiveSelection,
    ShortageError,
    build_samples,
    mine_negatives,
    mine_random,
    select_positive,
    select_positives,
    similarity_histogram,
)
from .numeric import AdamWState, DenseLayer, ShapeError, adamw_init, adamw_step
from .similarity import SimilarityMatrix, ZeroNormWarning, cosine_similarity, mean_pool, pairwise_similarity

__version__ = "0.1.0"
