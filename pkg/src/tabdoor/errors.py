"""Exception hierarchy shared by every module."""


class TabdoorError(Exception):
    """Base class for all library errors."""


class ConfigError(TabdoorError):
    """Invalid configuration: unknown keys, bad parameters, unknown presets."""


class SchemaError(TabdoorError):
    """A dataset or file does not match the declared schema."""


class ParseError(TabdoorError):
    """A cell could not be parsed into its declared kind."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(TabdoorError):
    """A value violates a declared constraint (category set, bounds, labels)."""


class StateError(TabdoorError):
    """An object was used before it was ready (e.g. apply before fit)."""


class ShapeError(TabdoorError):
    """Array shapes do not line up."""


class TrainingError(TabdoorError):
    """Training diverged; carries the diagnostics needed to reproduce it."""

    def __init__(self, message, epoch=None, batch=None, lr=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


class PoisonBudgetError(TabdoorError):
    """An injection schedule exceeds the configured poison fraction."""


class IntegrityError(TabdoorError):
    """A result artifact does not match the hash recorded in its manifest."""
