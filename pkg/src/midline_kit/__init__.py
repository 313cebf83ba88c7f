"""Brain midline estimation with row-wise distributions and midline shift derivation."""
from .data_model import (
    MidlineAnnotation, SlicePrediction, Study, StudyAnnotation, StudyPrediction,
    load_annotations, load_predictions, load_study, save_annotations, save_predictions, save_study,
)
from .mls import SliceMls, classify_significant, normal_midline, slice_mls, study_mls

__version__ = "0.1.0"
