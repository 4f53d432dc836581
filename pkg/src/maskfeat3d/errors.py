"""Exception types shared across the pipeline stages."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class SceneLoadError(PipelineError):
    """A required scene file is missing or unreadable."""


class SceneValidationError(PipelineError):
    """Loaded scene data violates a structural invariant."""


class ParameterError(PipelineError):
    """A parameter is outside its documented range."""


class ProposalFormatError(PipelineError):
    """Proposal file shape or content is invalid."""


class FrameDegenerateError(PipelineError):
    """A selected frame yields no usable projected pixels for a mask."""


class SegmentationError(PipelineError):
    """Every segmentation round failed for a (mask, frame) pair."""


class StoreError(PipelineError):
    """Feature store file is missing, truncated or inconsistent."""


class ProviderError(PipelineError):
    """An embedding provider or segmenter backend failed."""


class SimilarityError(PipelineError):
    """Cosine similarity is undefined (zero-norm operand)."""


class EvaluationError(PipelineError):
    """Evaluation inputs are inconsistent (e.g. unmapped category)."""


class StageError(PipelineError):
    """Wraps a fatal error with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
