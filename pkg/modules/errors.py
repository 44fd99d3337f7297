"""Exceptions raised by the fusion library.

Every error carries a short ``code`` so that the management commands can
print a single machine-parsable line before exiting.
"""


class PWRFError(Exception):
    code = 'E_PWRF'

    def __str__(self):
        # commands print one line per error
        return ' '.join(super().__str__().split())


class DimensionError(PWRFError):
    code = 'E_DIMENSION'


class ContractError(PWRFError):
    code = 'E_CONTRACT'


class ConfigError(PWRFError):
    code = 'E_CONFIG'


class NonFiniteError(PWRFError):
    code = 'E_NONFINITE'


class TrainingDivergedError(PWRFError):
    code = 'E_DIVERGED'


class CheckpointError(PWRFError):
    code = 'E_CHECKPOINT'


class EmptyGroundTruthWarning(UserWarning):
    """Raised through ``warnings`` when a metric meets a ground truth with no
    positive pixels and falls back to its defined value."""
