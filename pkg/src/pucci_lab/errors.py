"""Exception hierarchy shared by the solvers and the command-line front end."""

from __future__ import annotations


class PucciLabError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(PucciLabError, ValueError):
    """Invalid parameters or inputs supplied by the caller."""


class NonSymmetricError(ConfigError):
    pass


class SingularPointError(ConfigError):
    """An operator with a coefficient singularity was evaluated at the origin."""


class IntegrationError(PucciLabError):
    """The ODE integrator gave up; ``state`` holds the last valid (r, y)."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class SupercriticalError(PucciLabError):
    """No positive Dirichlet solution exists: the shot never crosses zero."""


class InvalidBracketError(ConfigError):
    pass


class InvalidBaseError(PucciLabError):
    """A base profile fails its residual check."""


class GridError(PucciLabError):
    def __init__(self, message, epsilon=None):
        super().__init__(message)
        self.epsilon = epsilon


class DivergenceError(PucciLabError):
    """Newton or policy iteration failed to converge; ``history`` holds residuals."""

    def __init__(self, message, history=None, epsilon=None, s=None):
        super().__init__(message)
        self.history = list(history or [])
        self.epsilon = epsilon
        self.s = s


class PositivityError(DivergenceError):
    """An iterate lost positivity or collapsed onto the trivial solution."""


class HomotopyError(PucciLabError):
    def __init__(self, message, s=None):
        super().__init__(message)
        self.s = s
