from __future__ import annotations


class SdlyapError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class DefinitionError(SdlyapError, ValueError):
    """A function, model or certificate definition is malformed."""


class ExpressionError(DefinitionError):
    pass


class ParseError(ExpressionError):
    def __init__(self, message: str, offset: int, text: str = "") -> None:
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class UnknownFunctionError(ParseError):
    pass


class UnboundVariableError(ExpressionError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unbound variable {name}")


class NumericDomainError(ExpressionError, ArithmeticError):
    pass


class NotDifferentiableError(ExpressionError):
    pass


class InputError(SdlyapError, ValueError):
    """Parameters or input signals outside what an operation accepts."""


class SpecError(InputError):
    def __init__(self, message: str, path: str = "") -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class BracketError(InputError):
    pass


class InversionError(SdlyapError):
    pass


class SamplingError(SdlyapError):
    pass


class InsufficientDataError(SdlyapError):
    pass


class SimulationError(SdlyapError):
    pass
