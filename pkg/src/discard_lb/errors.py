"""Exception hierarchy.

``DomainError`` subclasses signal that the requested system has no
meaningful equilibrium (or no admitted jobs); the CLI maps them to exit
code 2.  Parameter/config validation failures are ``ValueError``s.
"""


class DomainError(Exception):
    pass


class UnstableSystem(DomainError):
    pass


class SingularSystem(DomainError):
    pass


class DegenerateLoss(DomainError):
    pass


class OutOfDomain(DomainError, ValueError):
    pass


class InvalidParams(ValueError):
    pass


class InvalidConfig(ValueError):
    pass
