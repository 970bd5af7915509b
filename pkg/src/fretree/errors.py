"""Exception and warning types shared across the package."""


class FretreeError(Exception):
    """Base class for all package errors."""


class ParameterError(FretreeError, ValueError):
    """Invalid distribution or model parameters."""


class DomainError(FretreeError, ValueError):
    """Argument outside the domain of an operation."""


class InfiniteMeanError(FretreeError, ValueError):
    """The distribution has no finite first moment (shape >= 1)."""


class EstimationError(FretreeError, RuntimeError):
    """Parameter estimation failed (no residual bracket, degenerate input)."""


class DegenerateEstimateError(EstimationError):
    """Estimation produced an unusable parameter set, e.g. epsilon >= median."""


class FitError(FretreeError, ValueError):
    """A quantile-table fit could not be performed."""


class BuildError(FretreeError, RuntimeError):
    """Scenario-tree construction failed at a specific node."""


class InputError(FretreeError, ValueError):
    """Malformed input to a transport or distance computation."""


class InfeasibleError(FretreeError, RuntimeError):
    """A stage subproblem has an empty feasible set."""


class UnboundedError(FretreeError, RuntimeError):
    """A stage subproblem is unbounded."""


class ContractError(FretreeError, ValueError):
    """A model does not declare a property an algorithm relies on."""


class DualSolveError(FretreeError, RuntimeError):
    """The worst-case dual solve failed to satisfy its invariants."""


class ConfigError(FretreeError, ValueError):
    """Invalid configuration file or value."""


class ConvergenceWarning(UserWarning):
    """An iterative method stopped at its iteration cap."""


class FitWarning(UserWarning):
    """A value-function fit was rank deficient and fell back to a pseudo-inverse."""


class NodeLookupError(FretreeError, KeyError):
    """A node id does not exist in the tree."""
