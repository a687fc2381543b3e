"""Exception types shared across the package."""


class ConceptMILError(Exception):
    """Base class for all package errors."""


class ShapeError(ConceptMILError, ValueError):
    pass


class DegenerateInputError(ConceptMILError, ValueError):
    pass


class NumericError(ConceptMILError, ArithmeticError):
    pass


class ContractError(ConceptMILError, RuntimeError):
    pass


class ValidationError(ConceptMILError, ValueError):
    pass


class ParseError(ConceptMILError, ValueError):
    pass


class ConfigError(ConceptMILError, ValueError):
    pass


class UndefinedMetricError(ConceptMILError, ValueError):
    pass


class EmptyBagError(ConceptMILError, ValueError):
    pass


class TrainingDivergedError(ConceptMILError, RuntimeError):
    pass
