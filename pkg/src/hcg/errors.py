"""Exception types shared across the package."""


class HcgError(Exception):
    """Base class for all errors raised by hcg."""


class OutOfRange(HcgError, ValueError):
    pass


class DuplicateEdge(HcgError, ValueError):
    pass


class InfeasibleSpec(HcgError, ValueError):
    pass


class FormatVersionMismatch(HcgError):
    pass


class CorruptSection(HcgError):
    pass


class BadK(HcgError, ValueError):
    pass


class ShapeMismatch(HcgError, ValueError):
    pass


class PlanMismatch(HcgError, ValueError):
    pass


class TapeMismatch(HcgError, ValueError):
    pass


class BadThresholds(HcgError, ValueError):
    pass


class NoFeasibleK(HcgError, ValueError):
    pass


class TooFewSamples(HcgError, ValueError):
    pass
