"""Spatio-temporal video question answering: given a question, five
candidate answers, per-frame object features, and frame-aligned subtitles,
jointly predict the answer, the relevant temporal span, and the
attention-grounded object regions."""

from .types import (
    BoundingBox,
    ConceptAnnotation,
    FrameRecord,
    Hypothesis,
    ModelConfig,
    ObjectRegionFeature,
    QAExample,
    TimeSpan,
    validate_example,
)
from .ingest import (
    DatasetError,
    SynthSpec,
    align_subtitles,
    generate_synthetic_dataset,
    load_dataset,
    seconds_to_frame_idx,
    write_dataset,
)
from .model import (
    STAGE,
    BoxSelection,
    ExampleTensors,
    ModelOutput,
    SpanProposal,
    build_training_proposals,
    predict_boxes,
    propose_spans,
    qa_guided_attention,
    tensorize,
)
from .losses import (
    AttentionTarget,
    LossBreakdown,
    answer_cross_entropy,
    build_attention_targets,
    example_losses,
    lse_attention_loss,
    span_cross_entropy,
    total_loss,
)
from .metrics import (
    EvalReport,
    GroundingPrediction,
    GroundingTruth,
    QuestionRecord,
    answer_span_joint_accuracy,
    box_iou,
    grounding_map,
    qa_accuracy,
    qa_accuracy_by_question_type,
    span_iou,
    temporal_miou,
)
from .trainer import (
    CheckpointError,
    build_model,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
