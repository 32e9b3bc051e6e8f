"""Named errors raised across the multisys pipeline"""


class MultisysError(Exception):
    """Base class for every error the pipeline raises on purpose"""


class SchemaError(MultisysError, ValueError):
    """A schema, system definition or generator spec is invalid"""


class ConfigError(MultisysError, ValueError):
    """The run configuration failed validation"""


class CohortFileNotFoundError(MultisysError, FileNotFoundError):
    pass


class CohortFormatError(MultisysError, ValueError):
    pass


class HeaderNotFoundError(MultisysError, KeyError):
    """A schema entry references a header that is not in the CSV file"""

    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ''


class AllMissingColumnError(MultisysError, ValueError):
    pass


class MissingAnalyteError(MultisysError, KeyError):
    """A threshold rule references a column the matrix does not have"""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class EmptyCohortError(MultisysError, ValueError):
    pass


class ClassTooSmallError(MultisysError, ValueError):
    pass


class InvalidRatiosError(MultisysError, ValueError):
    pass


class SingleClassError(MultisysError, ValueError):
    pass


class DegenerateInputError(MultisysError, ValueError):
    pass


class WidthMismatchError(MultisysError, ValueError):
    pass


class UnsupportedOutputError(MultisysError, TypeError):
    pass


class MalformedModelError(MultisysError, ValueError):
    pass


class DegenerateFeatureError(MultisysError, ValueError):
    pass


class FoldEvaluationError(MultisysError):
    """Wraps a fitter failure with the id of the fold it happened in"""

    def __init__(self, fold, cause):
        self.fold = fold
        self.cause = cause
        super().__init__(f"fold {fold}: {type(cause).__name__}: {cause}")


class MissingArtifactError(MultisysError, FileNotFoundError):
    pass


class ConfigHashMismatchError(MultisysError):
    pass


class MalformedArtifactError(MultisysError, ValueError):
    """An upstream artifact exists but lacks the columns or keys a consumer needs"""
