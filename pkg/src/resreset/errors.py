"""Exception hierarchy.

Every error carries a machine-readable ``category`` so the CLI can report a
stable error class without parsing messages.
"""


class ResResetError(Exception):
    category = "error"


class ConfigError(ResResetError):
    category = "config"

    def __init__(self, message, key_path=None):
        super().__init__(message if key_path is None else f"{key_path}: {message}")
        self.key_path = key_path


class MissingKey(ConfigError):
    category = "missing_key"


class NegativeRate(ConfigError):
    category = "negative_rate"


class InconsistentChi(ConfigError):
    category = "inconsistent_chi"


class InvalidPulse(ResResetError):
    category = "invalid_pulse"


# cavity dynamics
class StepTooLarge(ResResetError):
    category = "step_too_large"


class NonFiniteAmplitude(ResResetError):
    category = "non_finite_amplitude"


class NonlinearRegime(ResResetError):
    category = "nonlinear_regime"


class GridMismatch(ResResetError):
    category = "grid_mismatch"


class NonPositiveSample(ResResetError):
    category = "non_positive_sample"


class TooFewPoints(ResResetError):
    category = "too_few_points"


# qubit / detector
class NonHermitianInput(ResResetError):
    category = "non_hermitian"


class EnvelopeTooShort(ResResetError):
    category = "envelope_too_short"


class PoorLinearity(ResResetError):
    category = "poor_linearity"


# readout
class MissingState(ResResetError):
    category = "missing_state"


class FitDiverged(ResResetError):
    category = "fit_diverged"


# optimizer
class NoBracketFound(ResResetError):
    category = "no_bracket"


class MaxIterExceeded(ResResetError):
    category = "max_iter"


class NonFiniteObjective(ResResetError):
    category = "non_finite_objective"


# depletion
class OverlapViolation(ResResetError):
    category = "overlap_violation"


class DetectorSaturated(ResResetError):
    category = "detector_saturated"


class SingularSystem(ResResetError):
    category = "singular_system"


# qec
class NoEvent(ResResetError):
    category = "no_event"


class TruncatedAfterEvent(ResResetError):
    category = "truncated_after_event"


class InvalidBranchWeights(ResResetError):
    category = "invalid_branch_weights"


class PhotonRegimeViolation(ResResetError):
    category = "photon_regime"


class EnvelopeMissing(ResResetError):
    category = "envelope_missing"


class NonConvergent(ResResetError):
    category = "non_convergent"


class UnknownSubcommand(ResResetError):
    category = "unknown_subcommand"
