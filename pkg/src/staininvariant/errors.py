"""Exception types raised across the toolkit."""


class StainError(Exception):
    """Base class for domain errors (mapped to CLI exit code 2)."""


class InsufficientTissue(StainError):
    def __init__(self, n_tissue: int, required: int):
        super().__init__(
            f"insufficient tissue: {n_tissue} tissue pixels, need at least {required}"
        )
        self.n_tissue = n_tissue
        self.required = required


class DegenerateColor(StainError):
    pass


class ZeroColumn(StainError):
    pass


class ZeroMaxConcentration(StainError):
    pass


class ShapeMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


class UnmappedLabel(KeyError):
    def __init__(self, label: str):
        super().__init__(label)
        self.label = label

    def __str__(self) -> str:
        return f"label {self.label!r} is neither mapped nor on the drop list"
