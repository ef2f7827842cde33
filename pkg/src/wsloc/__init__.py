"""Weakly supervised event localisation for single-lead ECG-like signals.

Record-level label sets train a multiscale residual CNN whose per-sample
class map is collapsed by an aggregation layer; at inference the map itself
gives the timing of each event.
"""

from .aggregation import AggregationSpec, aggregate
from .dataset import LabelVocabulary, Segment, extract_beat_segments, extract_rhythm_segments, split_folds
from .metrics import ConfusionMatrix, class_metrics, overall_metrics
from .model import Model, ModelConfig, TrainParams, load_model, save_model, train
from .qrs import pan_tompkins
from .signal_io import read_record, write_record
from .synth import SynthSpec, generate

__version__ = "0.1.0"
