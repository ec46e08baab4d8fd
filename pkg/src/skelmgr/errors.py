"""Exception hierarchy shared by all skelmgr modules."""


class SkelmgrError(Exception):
    pass


# application graph

class MalformedSkeleton(SkelmgrError, ValueError):
    pass


class StaleDelta(SkelmgrError):
    pass


class WouldMalform(SkelmgrError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnknownTarget(SkelmgrError, KeyError):
    pass


class KeyClassMismatch(SkelmgrError):
    pass


class MetadataTypeError(SkelmgrError, TypeError):
    pass


# rules and consensus

class UnknownRule(SkelmgrError, KeyError):
    pass


class StaleDecision(SkelmgrError):
    pass


class MissingSubstitute(SkelmgrError):
    pass


# managers

class InsufficientResources(SkelmgrError):
    pass


class DuplicateConcern(SkelmgrError, ValueError):
    pass


# simulation

class ActionFailure(SkelmgrError):
    pass


class NoFreeResource(ActionFailure):
    pass


class RemoveLastWorker(ActionFailure):
    pass


class UnplacedNode(SkelmgrError):
    pass


class ScenarioError(SkelmgrError, ValueError):
    pass
