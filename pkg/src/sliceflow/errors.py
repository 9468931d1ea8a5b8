"""Exception hierarchy for sliceflow.

Validation-type errors (bad user input or config) are distinguished from
runtime errors so the CLI can map them to exit code 2 vs 1.
"""


class SliceflowError(Exception):
    """Base class for all sliceflow errors."""


class ValidationError(SliceflowError):
    """Bad user-supplied value; mapped to CLI exit code 2."""


# --- tensor / kernel errors -------------------------------------------------

class ShapeMismatch(SliceflowError):
    """Operands have incompatible extents for the requested kernel."""


class InvalidParam(ValidationError):
    """Kernel parameter or attribute is structurally invalid."""


class ZeroNorm(SliceflowError):
    """Cosine similarity requested against an identically-zero tensor."""


# --- graph errors -----------------------------------------------------------

class InvalidGraph(SliceflowError):
    """Graph violates a structural invariant (cycle, dangling input, ...)."""


class InvalidConfig(ValidationError):
    """Model or run configuration violates its invariants."""


class NotAChain(SliceflowError):
    """Node segment is not a connected single-input chain in topo order."""


class ShapeInferenceFailure(SliceflowError):
    """Static shape inference could not determine a node's output shape."""


# --- slicer errors ----------------------------------------------------------

class BadSliceCount(ValidationError):
    """Slice count outside the valid range for the extent being sliced."""


class PlanShapeMismatch(SliceflowError):
    """Slice plan is incompatible with the tensor it is applied to."""


class IncompleteCover(SliceflowError):
    """Sub-features do not cover the parent tensor exactly."""


class OverlappingRegions(SliceflowError):
    """Sub-feature regions overlap."""


# --- executor / rehash errors -----------------------------------------------

class PipelineStall(SliceflowError):
    """Internal pipeline scheduling bug: a stage ran without its input."""


class BadThreshold(ValidationError):
    """Similarity threshold outside (0, 1]."""


class ScheduleMismatch(SliceflowError):
    """Step schedule does not match the run's step count."""


class TargetUnreachable(ValidationError):
    """No threshold yields the requested number of key steps."""
