from .attention import (
    ATTENTION_VARIANTS,
    AttentionConfig,
    AttentionWeights,
    SegmentPlan,
    build_segment_plan,
    flash_mhsa,
    get_attention,
    naive_mhsa,
    sparse_flash_mhsa,
    sparse_mhsa,
)
from .encoder3d import LayerOutputs, ViTConfig, encode, make_student_config, make_teacher_config
from .errors import CheckpointError, NonFiniteLossError, RejectedInputError, SparseFlashError
from .tensor_core import OpCounter, Rng, Tape, Tensor, backward, count_ops

__all__ = [
    "ATTENTION_VARIANTS",
    "AttentionConfig",
    "AttentionWeights",
    "CheckpointError",
    "LayerOutputs",
    "NonFiniteLossError",
    "OpCounter",
    "RejectedInputError",
    "Rng",
    "SegmentPlan",
    "SparseFlashError",
    "Tape",
    "Tensor",
    "ViTConfig",
    "backward",
    "build_segment_plan",
    "count_ops",
    "encode",
    "flash_mhsa",
    "get_attention",
    "make_student_config",
    "make_teacher_config",
    "naive_mhsa",
    "sparse_flash_mhsa",
    "sparse_mhsa",
]
