"""Assembly of the weak-form linear system A(U) xi = b(U) and its loss.

Row k integrates the surrogate against the k-th weight function:

    A[k, m] = (-1)^|alpha_m| * sum_n (D^alpha_m w_k)(node_n) * quad_n * U(node_n)^p_m
    b[k]    = (-1)^|alpha_0| * sum_n (D^alpha_0 w_k)(node_n) * quad_n * U(node_n)^p_0

so no derivative of U is ever needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from weakid import autodiff as ad
from weakid.library import LibrarySpec, LibraryTerm, MultiIndex
from weakid.network import NetworkConfig, evaluate, evaluate_taped
from weakid.weights import MasterWeight, WeightFunction, WeightTables, map_from_master


@dataclass
class WeakSystem:
    A: np.ndarray
    b: np.ndarray
    ids: np.ndarray

    @property
    def shape(self):
        return self.A.shape

    def drop(self, weight_id: int) -> "WeakSystem":
        keep = self.ids != weight_id
        return WeakSystem(self.A[keep], self.b[keep], self.ids[keep])


@dataclass
class StackedWeights:
    """Quadrature data for K weights: nodes (K*N, 1+d) and per-alpha (K, N) tables.

    Tables already include the trapezoid weights.
    """

    ids: np.ndarray
    nodes: np.ndarray
    tables: dict[MultiIndex, np.ndarray]

    @property
    def n_weights(self) -> int:
        return len(self.ids)

    @property
    def n_nodes(self) -> int:
        return next(iter(self.tables.values())).shape[1] if self.tables else 0


class WeightCache:
    """Memoises per-weight tables built from the master weight."""

    def __init__(self, master: MasterWeight):
        self.master = master
        self._tables: dict[int, WeightTables] = {}

    def get(self, w: WeightFunction) -> WeightTables:
        tab = self._tables.get(w.id)
        if tab is None:
            tab = map_from_master(self.master, w)
            self._tables[w.id] = tab
        return tab

    def retain(self, ids) -> None:
        keep = set(ids)
        self._tables = {k: v for k, v in self._tables.items() if k in keep}

    def stack(self, weights: Sequence[WeightFunction]) -> StackedWeights:
        tabs = [self.get(w) for w in weights]
        return stack_tables(tabs, list(self.master.tables))


def stack_tables(tabs: Sequence[WeightTables], alphas: Sequence[MultiIndex]) -> StackedWeights:
    ids = np.array([t.weight.id for t in tabs], dtype=np.int64)
    if not tabs:
        return StackedWeights(ids, np.zeros((0, 0)), {a: np.zeros((0, 0)) for a in alphas})
    nodes = np.concatenate([t.nodes for t in tabs])
    tables = {a: np.stack([t.tables[a] * t.quad for t in tabs]) for a in alphas}
    return StackedWeights(ids, nodes, tables)


def _column(u_pows: dict, term: LibraryTerm, table: np.ndarray, u):
    p = term.power
    if p == 0:
        # constant integrand: no dependence on U
        return term.derivative.sign * table.sum(axis=1)
    if p not in u_pows:
        u_pows[p] = u if p == 1 else u**p
    return (u_pows[p] * (term.derivative.sign * table)).sum(axis=1)


def weak_matrices(u, stacked: StackedWeights, library: LibrarySpec):
    """A and b from surrogate values ``u`` of shape (K, N); numpy arrays or taped Vars."""
    u_pows: dict = {}
    cols = [_column(u_pows, term, stacked.tables[term.derivative], u) for term in library.rhs]
    b = _column(u_pows, library.lhs, stacked.tables[library.lhs.derivative], u)
    if isinstance(u, ad.Var):
        return ad.stack(cols, axis=1), b
    return np.stack(cols, axis=1), np.asarray(b)


def assemble(params, weights: Sequence[WeightFunction] | StackedWeights, library: LibrarySpec,
             config: NetworkConfig, master: MasterWeight | None = None, prefix: str = "") -> WeakSystem:
    """Evaluate U once per quadrature node and build the weak system (no taping)."""
    stacked = weights if isinstance(weights, StackedWeights) else WeightCache(master).stack(weights)
    K, N = stacked.n_weights, stacked.n_nodes
    u = evaluate(params, stacked.nodes, config, prefix).reshape(K, N)
    A, b = weak_matrices(u, stacked, library)
    return WeakSystem(A, b, stacked.ids.copy())


def assemble_from_function(fn, weights: Sequence[WeightFunction], library: LibrarySpec,
                           master: MasterWeight) -> WeakSystem:
    """Weak system for an arbitrary callable u(points) in place of the network."""
    stacked = WeightCache(master).stack(weights)
    u = np.asarray(fn(stacked.nodes), dtype=np.float64).reshape(stacked.n_weights, stacked.n_nodes)
    A, b = weak_matrices(u, stacked, library)
    return WeakSystem(A, b, stacked.ids.copy())


def assemble_taped(leaves: dict, stacked: StackedWeights, library: LibrarySpec, config: NetworkConfig,
                   prefix: str = "", monitor: list | None = None):
    """Taped A, b for the loss; U is evaluated once at all K*N nodes."""
    K, N = stacked.n_weights, stacked.n_nodes
    u = evaluate_taped(leaves, stacked.nodes, config, prefix, monitor).reshape(K, N)
    return weak_matrices(u, stacked, library)


def weak_loss(system: WeakSystem, xi) -> float:
    """||b - A xi||^2, summed over rows."""
    xi = getattr(xi, "values", xi)
    r = system.b - system.A @ np.asarray(xi, dtype=np.float64)
    return float(r @ r)


def residuals(system: WeakSystem, xi) -> np.ndarray:
    """Per-row |A xi - b| aligned with ``system.ids``."""
    xi = getattr(xi, "values", xi)
    return np.abs(system.A @ np.asarray(xi, dtype=np.float64) - system.b)


def least_squares_xi(system: WeakSystem) -> np.ndarray:
    """Plain least-squares solution of A xi = b via orthogonal factorisation."""
    return np.linalg.lstsq(system.A, system.b, rcond=None)[0]


MAGIC = b"WKIDWEAK"
VERSION = 1


def dump_system(path, system: WeakSystem, xi, epoch: int = -1) -> None:
    """Binary dump: magic, version, epoch, K, M, row-major A, b, residuals, int64 ids."""
    K, M = system.A.shape
    res = residuals(system, xi)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IiII", VERSION, epoch, K, M))
        fh.write(np.ascontiguousarray(system.A, dtype="<f8").tobytes())
        fh.write(system.b.astype("<f8").tobytes())
        fh.write(res.astype("<f8").tobytes())
        fh.write(system.ids.astype("<i8").tobytes())


def load_system(path) -> tuple[WeakSystem, np.ndarray, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a weak-system dump")
        version, epoch, K, M = struct.unpack("<IiII", fh.read(16))
        A = np.frombuffer(fh.read(8 * K * M), dtype="<f8").reshape(K, M).astype(np.float64)
        b = np.frombuffer(fh.read(8 * K), dtype="<f8").astype(np.float64)
        res = np.frombuffer(fh.read(8 * K), dtype="<f8").astype(np.float64)
        ids = np.frombuffer(fh.read(8 * K), dtype="<i8").astype(np.int64)
    return WeakSystem(A, b, ids), res, epoch
