"""detbound: object-detection evaluation, upper-bound AP, error diagnosis,
and invariance-analysis dataset generation."""

__version__ = "0.1.0"

from .datamodel import (  # noqa: F401
    Annotation,
    Box,
    Category,
    ClassificationRecord,
    ClassificationSet,
    Dataset,
    Detection,
    DetectionSet,
    ImageRecord,
    load_classifications,
    load_detections,
    load_ground_truth,
    validate,
)
from .errors import (  # noqa: F401
    CodecError,
    ConfigurationError,
    DetboundError,
    ParseError,
    ValidationError,
)
from .evaluator import EvalConfig, EvalSummary, evaluate  # noqa: F401
from .diagnosis import DiagnosisConfig, DiagnosisReport, diagnose  # noqa: F401
from .geometry import SamplerSpec, constraint_threshold, iou_box, sample_boxes  # noqa: F401
from .upperbound import (  # noqa: F401
    Strategy2Mode,
    accuracy_uap_correlation,
    build_uap_detections,
    strategy2_aggregate,
    top1_accuracy,
)
