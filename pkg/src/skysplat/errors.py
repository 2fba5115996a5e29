"""Exception types raised across the pipeline.

Class names double as the invariant labels printed by the CLI on exit code 2.
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


# --- tensor / manifest I/O ---

class MalformedHeader(PipelineError):
    pass


class ShapeMismatch(PipelineError):
    pass


class UnsupportedDtype(PipelineError):
    pass


class IoFailure(PipelineError):
    pass


class MissingField(PipelineError):
    pass


class DanglingPath(PipelineError):
    pass


class BadBBox(PipelineError):
    pass


# --- camera geometry ---

class BehindCamera(PipelineError):
    pass


class NonInvertibleK(PipelineError):
    pass


class NonPositiveScale(PipelineError):
    pass


class AllVerticesBehindCamera(PipelineError):
    pass


# --- background reconstruction ---

class EmptyResult(PipelineError):
    pass


class DegenerateInput(PipelineError):
    pass


class SolverDivergence(PipelineError):
    pass


# --- placement / scale alignment ---

class NoGroundDepth(PipelineError):
    pass


class NoValidBones(PipelineError):
    pass
