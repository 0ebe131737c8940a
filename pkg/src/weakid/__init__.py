"""Weak-form sparse PDE identification with rational-network surrogates."""

from weakid.library import LibrarySpec, LibraryTerm, MultiIndex, default_library, format_pde, parse_term

__all__ = [
    "LibrarySpec",
    "LibraryTerm",
    "MultiIndex",
    "default_library",
    "format_pde",
    "parse_term",
]

__version__ = "0.1.0"
