"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Argument violates a documented precondition."""


class GenerationError(RuntimeError):
    """Synthetic data could not be produced under the requested constraints."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    """Checkpoint failed verification (corrupt, wrong version, wrong config)."""


class NumericAbort(RuntimeError):
    """Non-finite values appeared in a loss, gradient or parameter."""

    def __init__(self, message: str, epoch: int | None = None, iteration: int | None = None):
        self.epoch = epoch
        self.iteration = iteration
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
