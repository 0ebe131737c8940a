"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records primitive operations in execution order. Each record
keeps its operand indices, attributes and cached forward value, so the tape can
be replayed from its leaves and swept backwards once to obtain the gradient of
a scalar output with respect to every parameter leaf.

Only first derivatives with respect to parameters are supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from weakid import _kernels

DIV_GUARD = 1e-30


class NonFiniteError(FloatingPointError):
    """A primitive produced inf or nan."""

    def __init__(self, primitive: str, epoch=None, detail: str = ""):
        where = f" (epoch {epoch})" if epoch is not None else ""
        super().__init__(f"non-finite value produced by '{primitive}'{where}{detail}")
        self.primitive = primitive
        self.epoch = epoch


class DivisionGuardError(ArithmeticError):
    pass


class LayoutError(ValueError):
    pass


class ParamVector:
    """Flat float64 parameter storage with named, contiguous groups."""

    def __init__(self, data: np.ndarray, groups: Mapping[str, tuple[int, tuple[int, ...]]]):
        self.data = np.asarray(data, dtype=np.float64)
        self.groups = dict(groups)
        self._check_partition()

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        groups, chunks, offset = {}, [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            groups[name] = (offset, arr.shape)
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, groups)

    def _check_partition(self):
        expected = 0
        for name, (offset, shape) in sorted(self.groups.items(), key=lambda kv: kv[1][0]):
            if offset != expected:
                raise LayoutError(f"group {name!r} starts at {offset}, expected {expected}")
            expected += int(np.prod(shape, dtype=int))
        if expected != self.data.size:
            raise LayoutError(f"groups cover {expected} entries, vector has {self.data.size}")

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.groups[name]
        size = int(np.prod(shape, dtype=int))
        return self.data[offset:offset + size].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def names(self) -> list[str]:
        return list(self.groups)

    def slice(self, name: str) -> slice:
        offset, shape = self.groups[name]
        return slice(offset, offset + int(np.prod(shape, dtype=int)))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.groups == other.groups and self.data.size == other.data.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.groups)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(data, dtype=np.float64), self.groups)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.groups)

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} entries, groups={list(self.groups)})"


# --------------------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _guard(denominator: np.ndarray, primitive: str):
    if np.min(np.abs(denominator), initial=np.inf) < DIV_GUARD:
        raise DivisionGuardError(f"'{primitive}' denominator magnitude below {DIV_GUARD}")


def _add_f(a, b):
    return a + b


def _add_b(g, out, a, b):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


def _sub_f(a, b):
    return a - b


def _sub_b(g, out, a, b):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b))


def _mul_f(a, b):
    return a * b


def _mul_b(g, out, a, b):
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _div_f(a, b):
    _guard(b, "div")
    return a / b


def _div_b(g, out, a, b):
    ga = g / b
    return _unbroadcast(ga, np.shape(a)), _unbroadcast(-ga * out, np.shape(b))


def _neg_f(a):
    return -a


def _neg_b(g, out, a):
    return (-g,)


def _exp_f(a):
    return np.exp(a)


def _exp_b(g, out, a):
    return (g * out,)


def _pow_f(a, *, p):
    return a**p


def _pow_b(g, out, a, *, p):
    if p == 0:
        return (np.zeros_like(a),)
    if p == 1:
        return (g,)
    if p == 2:
        return (2.0 * g * a,)
    return (g * p * a ** (p - 1),)


def _sum_f(a, *, axis=None):
    return np.sum(a, axis=axis)


def _sum_b(g, out, a, *, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(a)).copy(),)


def _affine_f(x, w, b):
    return x @ w + b


def _affine_b(g, out, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _matmul_f(a, b):
    return a @ b


def _matmul_b(g, out, a, b):
    if np.ndim(b) == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _rational_f(x, num, den):
    out, qmin = _kernels.rational_forward(x, num, den)
    if qmin < DIV_GUARD:
        raise DivisionGuardError(f"'rational' denominator magnitude below {DIV_GUARD}")
    return out


def _rational_b(g, out, x, num, den):
    return _kernels.rational_backward(g, x, num, den)


def _stack_f(*arrays, axis=0):
    return np.stack(arrays, axis=axis)


def _stack_b(g, out, *arrays, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


def _reshape_f(a, *, shape):
    return np.reshape(a, shape)


def _reshape_b(g, out, a, *, shape):
    return (np.reshape(g, np.shape(a)),)


def _take_f(a, *, index):
    return a[index]


def _take_b(g, out, a, *, index):
    full = np.zeros_like(a)
    np.add.at(full, index, g)
    return (full,)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "div": (_div_f, _div_b),
    "neg": (_neg_f, _neg_b),
    "exp": (_exp_f, _exp_b),
    "power": (_pow_f, _pow_b),
    "sum": (_sum_f, _sum_b),
    "affine": (_affine_f, _affine_b),
    "matmul": (_matmul_f, _matmul_b),
    "rational": (_rational_f, _rational_b),
    "stack": (_stack_f, _stack_b),
    "reshape": (_reshape_f, _reshape_b),
    "take": (_take_f, _take_b),
}


# --------------------------------------------------------------------------- tape


@dataclass
class Record:
    op: str
    operands: tuple[int, ...]
    value: np.ndarray
    attrs: dict
    param: str | None = None


class Tape:
    def __init__(self, epoch=None):
        self.records: list[Record] = []
        self.epoch = epoch
        self.layout: ParamVector | None = None
        self.output: int | None = None

    def __len__(self):
        return len(self.records)

    def leaf(self, value, param: str | None = None) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        op = "param" if param is not None else "const"
        self.records.append(Record(op, (), value, {}, param))
        return Var(self, len(self.records) - 1)

    def const(self, value) -> "Var":
        return self.leaf(value)

    def apply(self, op: str, *operands, **attrs) -> "Var":
        idx = tuple(self._index(o) for o in operands)
        fwd, _ = PRIMITIVES[op]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = fwd(*(self.records[i].value for i in idx), **attrs)
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, self.epoch)
        self.records.append(Record(op, idx, value, attrs))
        return Var(self, len(self.records) - 1)

    def _index(self, operand) -> int:
        if isinstance(operand, Var):
            if operand.tape is not self:
                raise LayoutError("operand recorded on a different tape")
            return operand.index
        return self.const(operand).index

    def replay(self) -> np.ndarray:
        """Recompute every record from the leaves; returns the output value."""
        values: list[np.ndarray] = []
        for rec in self.records:
            if rec.op in ("param", "const"):
                values.append(rec.value)
            else:
                fwd, _ = PRIMITIVES[rec.op]
                values.append(np.asarray(fwd(*(values[i] for i in rec.operands), **rec.attrs)))
        return values[self.output if self.output is not None else -1]

    def gradients(self, output: int | None = None) -> dict[int, np.ndarray]:
        """Backward sweep; returns the adjoint of every parameter leaf."""
        out = self.output if output is None else output
        if out is None:
            raise LayoutError("tape has no output")
        if np.ndim(self.records[out].value) != 0:
            raise LayoutError("backward requires a scalar output")
        adj: dict[int, np.ndarray] = {out: np.ones(())}
        leaves: dict[int, np.ndarray] = {}
        for i in range(out, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            rec = self.records[i]
            if rec.op == "param":
                leaves[i] = g
                continue
            if rec.op == "const":
                continue
            _, vjp = PRIMITIVES[rec.op]
            grads = vjp(g, rec.value, *(self.records[j].value for j in rec.operands), **rec.attrs)
            for j, gj in zip(rec.operands, grads):
                if self.records[j].op == "const":
                    continue
                if j in adj:
                    adj[j] = adj[j] + gj
                else:
                    adj[j] = gj
        return leaves


class Var:
    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.records[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, p):
        return self.tape.apply("power", self, p=p)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __getitem__(self, index):
        return self.tape.apply("take", self, index=index)

    def sum(self, axis=None):
        return self.tape.apply("sum", self, axis=axis)

    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return self.tape.apply("reshape", self, shape=shape)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


def exp(a: Var) -> Var:
    return a.tape.apply("exp", a)


def affine(x, w: Var, b: Var) -> Var:
    return w.tape.apply("affine", x, w, b)


def rational(x: Var, num: Var, den: Var) -> Var:
    return num.tape.apply("rational", x, num, den)


def stack(items, axis: int = 0) -> Var:
    tape = next(v.tape for v in items if isinstance(v, Var))
    return tape.apply("stack", *items, axis=axis)


# --------------------------------------------------------------------------- public API


def forward(expr: Callable[[dict[str, Var], Tape], Var | float], params: ParamVector,
            epoch=None) -> tuple[float, Tape]:
    """Evaluate ``expr`` on taped parameter leaves.

    ``expr`` receives a mapping from group name to leaf variable plus the tape,
    and returns a scalar Var (or a plain number for a constant expression).
    """
    tape = Tape(epoch)
    tape.layout = params
    leaves = {name: tape.leaf(params[name].copy(), param=name) for name in params.names()}
    result = expr(leaves, tape)
    if not isinstance(result, Var):
        result = tape.const(result)
    if np.ndim(result.value) != 0:
        raise LayoutError(f"expression must be scalar, got shape {result.shape}")
    tape.output = result.index
    return float(result.value), tape


def backward(tape: Tape, layout: ParamVector | None = None) -> ParamVector:
    """Gradient of the tape's scalar output, laid out like the forward parameters."""
    layout = layout if layout is not None else tape.layout
    if layout is None:
        raise LayoutError("no parameter layout available")
    if tape.layout is not None and not tape.layout.same_layout(layout):
        raise LayoutError("tape was recorded against a different parameter layout")
    grad = layout.zeros_like()
    for idx, g in tape.gradients().items():
        name = tape.records[idx].param
        if name not in layout:
            raise LayoutError(f"tape parameter {name!r} missing from layout")
        grad[name] = grad[name] + np.broadcast_to(g, layout[name].shape)
    return grad


def value_and_grad(expr, params: ParamVector, epoch=None) -> tuple[float, ParamVector, Tape]:
    value, tape = forward(expr, params, epoch)
    return value, backward(tape), tape
