"""Error hierarchy with fixed process exit codes.

Every error class carries a distinct exit code so the CLI's exit-code
contract is stable across releases.
"""


class FmpruneError(Exception):
    exit_code = 1


# tensorio
class MalformedHeader(FmpruneError):
    exit_code = 10


class UnsupportedDtype(FmpruneError):
    exit_code = 11


class TruncatedData(FmpruneError):
    exit_code = 12


class ShapeMismatch(FmpruneError):
    exit_code = 13


class MissingFile(FmpruneError):
    exit_code = 14


class IoFailure(FmpruneError):
    exit_code = 15


# graph
class SchemaError(FmpruneError):
    exit_code = 20


class ChannelMismatch(FmpruneError):
    exit_code = 21


class CycleDetected(FmpruneError):
    exit_code = 22


class GroupInconsistency(FmpruneError):
    exit_code = 23


class DanglingLayer(FmpruneError):
    exit_code = 24


# stats
class DegenerateSpatial(FmpruneError):
    exit_code = 30


class KTooLarge(FmpruneError):
    exit_code = 31


# select
class EmptyPool(FmpruneError):
    exit_code = 40


class MissingActivations(FmpruneError):
    exit_code = 41


# surgery
class MissingWeights(FmpruneError):
    exit_code = 50
