"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Unknown architecture, unresolvable library member, bad experiment config."""


class IntegrityError(RuntimeError):
    """Stored artifact does not match its checksum or content address."""


class TicketNotFoundError(LookupError):
    pass


class TicketValidationError(ValueError):
    """Stored ticket is internally inconsistent (e.g. mask count vs ratio)."""


class TrainingError(RuntimeError):
    pass
