"""Exception types shared across the toolkit."""


class PrunekitError(Exception):
    """Base class for all toolkit errors."""


class StructuralError(PrunekitError):
    """A layer was fed a tensor whose shape violates its declared widths."""


class GraphValidationError(PrunekitError):
    """A graph failed validation; carries the list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("graph validation failed:\n" + "\n".join(self.violations))


class BundleIntegrityError(PrunekitError):
    """A saved model failed an integrity check on load."""


class PlanError(PrunekitError):
    """A pruning plan is inconsistent with the scores or model it targets."""


class TrainingDiverged(PrunekitError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class DataError(PrunekitError):
    """A dataset file or generator spec is malformed."""


class StageFailure(PrunekitError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
