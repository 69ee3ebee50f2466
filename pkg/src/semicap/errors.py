"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class SemicapError(Exception):
    pass


class ShapeError(SemicapError, ValueError):
    pass


class ContractError(SemicapError, ValueError):
    pass


class ConfigError(SemicapError, ValueError):
    pass


class DataError(SemicapError, ValueError):
    pass


class UnseenConceptError(DataError, KeyError):
    def __init__(self, concept, word=None):
        self.concept = concept
        self.word = word
        label = f"{concept}" if word is None else f"{concept} ({word!r})"
        super().__init__(f"concept {label} has no centroid")

    def __str__(self):
        return self.args[0]


class DivergenceError(SemicapError, ArithmeticError):
    pass


class NonFiniteError(DivergenceError):
    def __init__(self, message, node_index=None, op=None):
        super().__init__(message)
        self.node_index = node_index
        self.op = op
