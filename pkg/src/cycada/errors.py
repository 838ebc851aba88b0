"""Exception taxonomy shared across the package.

Each CLI-visible category maps to a distinct process exit code so scripts
can tell configuration mistakes, bad data, and training failures apart.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_REPORT = 5


class CycadaError(Exception):
    """Base class for all package-raised errors."""

    exit_code = 1


class ConfigError(CycadaError):
    """Invalid configuration: schema violation, bad override, unusable output dir."""

    exit_code = EXIT_CONFIG


class DataError(CycadaError):
    """Dataset problems: missing files, corrupt payloads, hash mismatches."""

    exit_code = EXIT_DATA


class IdxFormatError(DataError):
    """Malformed IDX container (bad magic, truncation, dim mismatch)."""


class IntegrityError(DataError):
    """Checksum or payload-size verification failed."""


class TrainingAbort(CycadaError):
    """A training stage could not complete."""

    exit_code = EXIT_TRAINING


class TrainingDiverged(TrainingAbort):
    """Non-finite loss encountered; carries the offending term's name."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        msg = f"non-finite value in loss term '{term}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class StaleCacheError(TrainingAbort):
    """A cached translated dataset no longer matches its generator checkpoint."""


class FrozenModelError(CycadaError):
    """Attempted parameter update on a frozen model handle."""

    exit_code = EXIT_TRAINING


class ReportError(CycadaError):
    """Report generation failed (e.g. no completed runs)."""

    exit_code = EXIT_REPORT
