"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so that callers (and
the CLI's exit-code mapping) can tell failure kinds apart without parsing
messages.
"""


class ProtoAbstainError(Exception):
    code = "error"


class ValidationError(ProtoAbstainError):
    """Bad user input: config values, shapes, alphabets, ranges."""

    code = "validation"


class ContainerError(ProtoAbstainError):
    code = "container"


class BadMagicError(ContainerError):
    code = "bad_magic"


class VersionMismatchError(ContainerError):
    code = "version_mismatch"


class TruncatedPayloadError(ContainerError):
    code = "truncated_payload"


class DimensionMismatchError(ContainerError):
    code = "dimension_mismatch"


class LabelOutOfRangeError(ContainerError):
    code = "label_out_of_range"


class SequenceOverflowError(ValidationError):
    code = "sequence_overflow"


class NonFiniteLossError(ProtoAbstainError):
    code = "non_finite_loss"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SplitOverlapError(ProtoAbstainError):
    code = "split_overlap"


class MeasurementRequired(ProtoAbstainError):
    """Raised when genetic data is needed but was not supplied.

    ``decision`` holds the partially filled decision record.
    """

    code = "measurement_required"

    def __init__(self, message, decision=None):
        super().__init__(message)
        self.decision = decision
