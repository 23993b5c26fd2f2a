"""Caption-assisted geometric reasoning and keypoint-based caption evaluation."""

__version__ = "0.1.0"

from .keypoints import (  # noqa: E402
    ArityError,
    Dimension,
    ElementK,
    EntityRef,
    Keypoint,
    KeypointError,
    KeypointSet,
    KeypointSyntaxError,
    NumericalK,
    RelationFamily,
    RelationType,
    SpatialK,
    UnknownRelationError,
    canonicalize,
    parse_keypoint_document,
    serialize_keypoints,
)
from .matching import (  # noqa: E402
    BenchTable,
    DimensionScores,
    MatchResult,
    aggregate_scores,
    dimension_scores,
    equivalent,
    oracle_match,
    recall_score,
)
