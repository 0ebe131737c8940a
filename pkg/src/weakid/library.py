"""Library of candidate PDE terms of the form D^alpha (u^k).

Terms are written with the grammar ``D_t^a D_x^b U^k``; omitted exponents
mean 1 and omitted operators mean order 0. The constant term is ``1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPACE_AXES = ("x", "y", "z")


class TermParseError(ValueError):
    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Derivative orders: one for time, one per spatial axis."""

    time: int = 0
    space: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.time < 0 or any(s < 0 for s in self.space):
            raise ValueError(f"negative derivative order in {self}")

    @property
    def order(self) -> int:
        return self.time + sum(self.space)

    @property
    def sign(self) -> int:
        """(-1)^|alpha|, the integration-by-parts sign."""
        return -1 if self.order % 2 else 1

    @property
    def dim(self) -> int:
        return len(self.space)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.time, *self.space)


@dataclass(frozen=True)
class LibraryTerm:
    derivative: MultiIndex
    power: int = 1

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("monomial power must be non-negative")

    def __str__(self) -> str:
        return format_term(self)


@dataclass(frozen=True)
class LibrarySpec:
    lhs: LibraryTerm
    rhs: tuple[LibraryTerm, ...]

    def __post_init__(self):
        keys = [(t.derivative, t.power) for t in self.rhs]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate terms in library")
        dims = {t.derivative.dim for t in (self.lhs, *self.rhs)}
        if len(dims) != 1:
            raise ValueError("all terms must share the spatial dimension")

    @classmethod
    def from_strings(cls, lhs: str, rhs: Iterable[str]) -> "LibrarySpec":
        return cls(parse_term(lhs), tuple(parse_term(s) for s in rhs))

    @property
    def n_terms(self) -> int:
        return len(self.rhs)

    @property
    def dim(self) -> int:
        return self.lhs.derivative.dim

    def multi_indices(self) -> list[MultiIndex]:
        """Distinct multi-indices used by the LHS and RHS, in first-seen order."""
        seen: dict[MultiIndex, None] = {}
        for term in (self.lhs, *self.rhs):
            seen.setdefault(term.derivative, None)
        return list(seen)

    def max_order(self) -> int:
        return max(max(t.derivative.as_tuple()) for t in (self.lhs, *self.rhs))

    def term_strings(self) -> list[str]:
        return [format_term(t) for t in self.rhs]


DEFAULT_RHS = (
    "1", "U", "D_x U", "D_x^2 U", "D_x^3 U", "D_x^4 U",
    "U^2", "D_x U^2", "D_x^2 U^2", "D_x^3 U^2",
    "U^3", "D_x U^3", "D_x^2 U^3",
)


def default_library() -> LibrarySpec:
    return LibrarySpec.from_strings("D_t U", DEFAULT_RHS)


@dataclass
class CoefficientVector:
    values: np.ndarray
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).copy()
        if self.active is None:
            self.active = np.ones(self.values.shape, dtype=bool)
        self.active = np.asarray(self.active, dtype=bool).copy()
        self.values[~self.active] = 0.0

    def __len__(self):
        return len(self.values)


_TOKEN = re.compile(r"D_([a-z])(?:\^(\d+))?|U(?:\^(\d+))?|(1)")


def parse_term(text: str, dim: int = 1) -> LibraryTerm:
    """Parse ``D_t^a D_x^b U^k`` (or ``1``) into a LibraryTerm."""
    time = 0
    space = [0] * dim
    seen_axes: set[str] = set()
    power = None
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos == len(text):
            break
        if power is not None:
            raise TermParseError("trailing input after function", text, pos)
        m = _TOKEN.match(text, pos)
        if m is None:
            raise TermParseError("unexpected character", text, pos)
        axis, order, upow, one = m.groups()
        if axis is not None:
            if axis in seen_axes:
                raise TermParseError(f"repeated operator D_{axis}", text, pos)
            seen_axes.add(axis)
            n = int(order) if order is not None else 1
            if axis == "t":
                time = n
            elif axis in SPACE_AXES[:dim]:
                space[SPACE_AXES.index(axis)] = n
            else:
                raise TermParseError(f"unknown axis {axis!r}", text, pos)
        elif one is not None:
            power = 0
        else:
            power = int(upow) if upow is not None else 1
        pos = m.end()
    if power is None:
        raise TermParseError("missing function (U, U^k or 1)", text, len(text))
    return LibraryTerm(MultiIndex(time, tuple(space)), power)


def format_term(term: LibraryTerm) -> str:
    parts = []
    alpha = term.derivative
    for name, n in (("t", alpha.time), *zip(SPACE_AXES, alpha.space)):
        if n == 1:
            parts.append(f"D_{name}")
        elif n > 1:
            parts.append(f"D_{name}^{n}")
    if term.power == 0:
        parts.append("1")
    elif term.power == 1:
        parts.append("U")
    else:
        parts.append(f"U^{term.power}")
    return " ".join(parts)


def format_pde(spec: LibrarySpec, xi: CoefficientVector | Sequence[float], digits: int = 4) -> str:
    """Render an identified PDE, e.g. ``D_t U = 0.1013(D_x^2 U) - 0.5065(D_x U^2)``."""
    if not isinstance(xi, CoefficientVector):
        xi = CoefficientVector(np.asarray(xi, dtype=float))
    out = f"{format_term(spec.lhs)} ="
    first = True
    for term, value, on in zip(spec.rhs, xi.values, xi.active):
        if not on or value == 0.0:
            continue
        mag = f"{abs(value):.{digits}f}({format_term(term)})"
        if first:
            out += f" -{mag}" if value < 0 else f" {mag}"
            first = False
        else:
            out += f" - {mag}" if value < 0 else f" + {mag}"
    if first:
        out += " 0"
    return out


def monomial_eval(power: int, values) -> np.ndarray:
    """Elementwise u^k with 0^0 = 1."""
    if power < 0:
        raise ValueError("power must be non-negative")
    values = np.asarray(values, dtype=np.float64)
    if power == 0:
        return np.ones_like(values)
    return values**power
