"""Fully connected network with trainable type-(3, 2) rational activations."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from weakid import autodiff as ad
from weakid._kernels import min_abs_quadratic
from weakid.autodiff import NonFiniteError, ParamVector

# Least-squares type-(3,2) fit of leaky ReLU (slope 0.01) on [-1, 1], with the
# denominator's constant term pinned to 1. Reproduced by fit_reference_activation().
INIT_NUMERATOR = (0.04088082659336427, 0.5050000020940938, 1.2780359222955324, 0.8964622434575106)
INIT_DENOMINATOR = (1.0, 1.5602879798141678e-08, 1.7751727470606578)

LEAKY_SLOPE = 0.01
Q_MONITOR = 1e-6


@dataclass
class NetworkConfig:
    input_dim: int = 2
    hidden_layers: int = 5
    width: int = 40
    output_dim: int = 1
    # affine input map x -> scale * x + shift, per axis
    scale: tuple[float, ...] = (1.0, 1.0)
    shift: tuple[float, ...] = (0.0, 0.0)

    def __post_init__(self):
        self.scale = tuple(float(s) for s in self.scale)
        self.shift = tuple(float(s) for s in self.shift)
        if len(self.scale) != self.input_dim or len(self.shift) != self.input_dim:
            raise ValueError("normalisation map must have one entry per input axis")
        if any(s == 0 for s in self.scale):
            raise ValueError("normalisation scales must be nonzero")
        if self.hidden_layers < 1 or self.width < 1:
            raise ValueError("need at least one hidden layer of positive width")

    @classmethod
    def for_domain(cls, lo: Sequence[float], hi: Sequence[float], **kwargs) -> "NetworkConfig":
        """Config whose input map sends the box [lo, hi] onto [-1, 1]^n."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        scale = 2.0 / (hi - lo)
        shift = -1.0 - scale * lo
        return cls(input_dim=len(lo), scale=tuple(scale), shift=tuple(shift), **kwargs)

    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * np.asarray(self.scale) + np.asarray(self.shift)


def param_names(config: NetworkConfig, prefix: str = "") -> list[str]:
    names = []
    n_layers = len(config.layer_sizes()) - 1
    for i in range(n_layers):
        names += [f"{prefix}W{i}", f"{prefix}b{i}"]
        if i < n_layers - 1:
            names += [f"{prefix}num{i}", f"{prefix}den{i}"]
    return names


def init_arrays(config: NetworkConfig, seed=0, prefix: str = "") -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, rational activations at the reference fit."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = config.layer_sizes()
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{prefix}b{i}"] = np.zeros(fan_out)
        if i < len(sizes) - 2:
            arrays[f"{prefix}num{i}"] = np.array(INIT_NUMERATOR)
            arrays[f"{prefix}den{i}"] = np.array(INIT_DENOMINATOR)
    return arrays


def init_network(config: NetworkConfig, seed=0, prefix: str = "") -> ParamVector:
    return ParamVector.from_arrays(init_arrays(config, seed, prefix))


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def rational_activation(x, num, den):
    p = ((num[3] * x + num[2]) * x + num[1]) * x + num[0]
    q = (den[2] * x + den[1]) * x + den[0]
    return p / q


def _dense(h: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed summation order, so a row's result never depends on the batch it sits in
    out = np.broadcast_to(b, (h.shape[0], W.shape[1])).copy()
    for j in range(W.shape[0]):
        out += h[:, j:j + 1] * W[j]
    return out


def evaluate(params: ParamVector, points, config: NetworkConfig, prefix: str = "") -> np.ndarray:
    """U at a batch of (t, X) points; plain numpy, no taping.

    Each output depends only on its own point, bit for bit.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = config.normalize(points)
    n_layers = len(config.layer_sizes()) - 1
    for i in range(n_layers):
        h = _dense(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = rational_activation(h, params[f"{prefix}num{i}"], params[f"{prefix}den{i}"])
    out = h[:, 0]
    bad = ~np.isfinite(out)
    if bad.any():
        raise NonFiniteError("evaluate", detail=f" at point {points[np.argmax(bad)].tolist()}")
    return out


def evaluate_taped(leaves: dict, points: np.ndarray, config: NetworkConfig, prefix: str = "",
                   monitor: list | None = None) -> ad.Var:
    """Taped counterpart of :func:`evaluate`; returns a Var of shape (n,).

    When ``monitor`` is a list, layers whose activation denominator drops below
    1e-6 in magnitude are appended to it.
    """
    h = config.normalize(points)
    n_layers = len(config.layer_sizes()) - 1
    for i in range(n_layers):
        h = ad.affine(h, leaves[f"{prefix}W{i}"], leaves[f"{prefix}b{i}"])
        if i < n_layers - 1:
            num, den = leaves[f"{prefix}num{i}"], leaves[f"{prefix}den{i}"]
            if monitor is not None:
                qmin = min_abs_quadratic(h.value, den.value)
                if qmin < Q_MONITOR:
                    monitor.append((f"{prefix}den{i}", qmin))
            h = ad.rational(h, num, den)
    return h.reshape(-1)


def fit_reference_activation(n_points: int = 2001, n_starts: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares type-(3,2) rational fit of leaky ReLU on [-1, 1].

    Multistart nonlinear least squares with the denominator constant fixed at 1;
    only fits whose denominator stays positive on [-1, 1] are kept.
    """
    from scipy.optimize import least_squares

    x = np.linspace(-1.0, 1.0, n_points)
    target = np.where(x > 0, x, LEAKY_SLOPE * x)

    def residual(c):
        q = 1.0 + c[4] * x + c[5] * x * x
        return np.polyval(c[3::-1], x) / q - target

    best = None
    for s in range(n_starts):
        fit = least_squares(residual, np.random.default_rng(s).normal(size=6),
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        if np.all(1.0 + fit.x[4] * x + fit.x[5] * x * x > 0) and (best is None or fit.cost < best.cost):
            best = fit
    return best.x[:4].copy(), np.array([1.0, best.x[4], best.x[5]])


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"WKIDCKPT"
VERSION = 1


def save_checkpoint(path, params: ParamVector, meta: dict | None = None) -> None:
    """Header (magic, version, JSON layout + metadata) followed by the raw float64 array."""
    header = {
        "groups": {k: [off, list(shape)] for k, (off, shape) in params.groups.items()},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamVector, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    groups = {k: (off, tuple(shape)) for k, (off, shape) in header["groups"].items()}
    return ParamVector(data, groups), header["meta"]


def config_to_dict(config: NetworkConfig) -> dict:
    return asdict(config)
