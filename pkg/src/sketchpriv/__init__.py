"""Distinct-count sketches and tools for measuring how much they leak."""

from sketchpriv.sketches import (
    DEFAULT_SALT,
    Algo,
    HashValue,
    Salt,
    Sketch,
    add,
    build,
    deserialize,
    empty,
    estimate,
    hash_element,
    is_ignored,
    merge,
    serialize,
    theoretical_rse,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SALT",
    "Algo",
    "HashValue",
    "Salt",
    "Sketch",
    "add",
    "build",
    "deserialize",
    "empty",
    "estimate",
    "hash_element",
    "is_ignored",
    "merge",
    "serialize",
    "theoretical_rse",
]
