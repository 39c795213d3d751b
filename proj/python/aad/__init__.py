"""Python access to the aad core library."""

from ._aad import (
    DEFAULT_HASH_SEED,
    DIMENSIONS,
    DimensionMismatch,
    Error,
    Item,
    Model,
    NumericalError,
    ParseError,
    Questionnaire,
    ValidationError,
    generate_synthetic,
    hash_embed,
    macro_f1,
    mean_row_entropy,
    sign_test_p,
)

__all__ = [
    "DEFAULT_HASH_SEED",
    "DIMENSIONS",
    "DimensionMismatch",
    "Error",
    "Item",
    "Model",
    "NumericalError",
    "ParseError",
    "Questionnaire",
    "ValidationError",
    "generate_synthetic",
    "hash_embed",
    "macro_f1",
    "mean_row_entropy",
    "sign_test_p",
]
