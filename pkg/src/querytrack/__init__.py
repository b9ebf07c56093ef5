"""Desk-scale end-to-end multi-object tracker with query propagation."""

from .backbone import BackboneConfig, BackboneNeck, FeaturePyramid
from .boxes import BoundingBox, LabeledBox, convert, giou, iou
from .data import (
    MotBox,
    SequenceDescriptor,
    SyntheticScene,
    generate_synthetic,
    half_split,
    parse_gt,
    parse_results,
    synth_dataset,
    write_results,
)
from .decoder import DecoderConfig, DecoderOutput, DeformableDecoder, DetectQueryBank
from .encoder import EncoderMemory, HybridEncoder, sine_position_embedding
from .losses import LossBreakdown, LossWeights, cal_loss, detection_cost, focal_loss, frame_loss, stage1_loss, tala_assign
from .matching import MatchResult, hungarian
from .metrics import MetricReport, SequenceEval, clear_mot, evaluate_sequences, hota, idf1
from .model import Checkpoint, ModelConfig, TrackerModel, build_model, load_checkpoint, save_checkpoint
from .queries import QueryManager, QuerySet, TemporalAggregator, Thresholds, TrackInstance
from .training import RunConfig, SequenceData, TrainConfig, load_run_config, run_inference, train_stage1, train_stage2

__version__ = "0.1.0"
