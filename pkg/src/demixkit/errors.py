"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`DemixError`. The CLI
maps the three families below onto its exit codes (usage 1, data 2,
numerical 3).
"""

from __future__ import annotations


class DemixError(Exception):
    exit_code = 2


class UsageError(DemixError, ValueError):
    exit_code = 1


class DataError(DemixError, ValueError):
    exit_code = 2


class NumericalError(DemixError, ArithmeticError):
    exit_code = 3


class ShapeError(UsageError):
    pass


class SegmentTooShortError(DataError):
    pass


class DegenerateBatchError(UsageError):
    pass


class BackwardError(UsageError):
    pass


class WavFormatError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class ProvenanceError(DataError):
    pass
