"""Exception types shared across the protocol and evaluation modules."""


class ClbcError(Exception):
    """Base class for all protocol errors."""


class UnsupportedValue(ClbcError, ValueError):
    """A value has no canonical encoding under the pinned ruleset."""


class NegativeTurn(ClbcError, ValueError):
    pass


class ZeroOptions(ClbcError, ValueError):
    """Empty policy-valid option set; the task was authored wrong."""


class UnknownIntent(ClbcError, KeyError):
    pass


class UnknownEpoch(ClbcError, KeyError):
    pass


class BadWeights(ClbcError, ValueError):
    pass


class BadParams(ClbcError, ValueError):
    pass


class BadM(ClbcError, ValueError):
    pass


class MissingTurn(ClbcError, IndexError):
    pass


class EpochMismatch(ClbcError, ValueError):
    """Evidence from one audit epoch was presented under another."""


class EmptyCatalogs(ClbcError, ValueError):
    pass


class NoFeasibleStrategy(ClbcError):
    pass


class InsufficientSamples(ClbcError, ValueError):
    pass


class InsufficientSeeds(ClbcError, ValueError):
    pass


class TooLargeToEnumerate(ClbcError, ValueError):
    pass


class PolicyError(ClbcError, ValueError):
    """Policy document is malformed or its detached digest does not match."""


class PipelineFailure(ClbcError):
    """Reason-coded abort of a pipeline stage."""

    reason = "pipeline-failure"

    def __init__(self, message: str, artifact: str | None = None):
        super().__init__(f"{self.reason}: {message}")
        self.artifact = artifact


class StaleArtifact(PipelineFailure):
    reason = "stale-artifact"


class PolicyHashDrift(PipelineFailure):
    reason = "policy-hash-drift"


class MalformedSummary(PipelineFailure):
    reason = "malformed-summary"


class ThresholdError(PipelineFailure):
    reason = "suspicious-threshold"
