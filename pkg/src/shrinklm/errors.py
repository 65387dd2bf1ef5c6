"""Exception types shared across the toolkit.

Two failure families matter for callers (and for CLI exit codes):
validation problems (bad inputs, bad files, infeasible requests) and
numerical problems (non-convergence, divergence, loss of definiteness).
"""


class ValidationError(ValueError):
    """Input, configuration, or artifact fails a stated precondition."""


class NumericalError(RuntimeError):
    """A numerical routine failed: non-convergence, NaN loss, bad pivot."""
