"""Joint training of the surrogate networks and the shared PDE coefficients.

One epoch is one full-batch optimizer step.  The schedule is

    burn-in (Adam, no sparsity penalty)
    -> threshold
    -> sparsification (Adam, reweighted L^p penalty)
    -> threshold
    -> fine-tuning (L-BFGS, no penalty, early stop on the L^p value)

Every dataset gets its own network and its own weight functions; the
coefficient vector xi is shared between all of them.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from weakid import autodiff as ad
from weakid.autodiff import NonFiniteError, ParamVector
from weakid.data import Dataset
from weakid.library import CoefficientVector, LibrarySpec, format_pde
from weakid.network import NetworkConfig, evaluate, evaluate_taped, init_arrays, save_checkpoint
from weakid.optim import LBFGS, Adam
from weakid.weak_form import WeakSystem, WeightCache, assemble, assemble_taped, residuals
from weakid.weights import WeightFunction, default_radii, make_master, sample_random_weights

log = logging.getLogger(__name__)

BURN_IN = "burn-in"
SPARSIFY = "sparsification"
FINE_TUNE = "fine-tuning"
PHASES = (BURN_IN, SPARSIFY, FINE_TUNE)

XI = "xi"


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; ``checkpoint`` names the last good state."""

    def __init__(self, message: str, epoch: int, checkpoint: Path | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lambda_data: float = 1.0
    lambda_weak: float = 1.0
    # penalty weight used during sparsification; the other phases use 0
    lambda_lp: float = 2e-5
    p: float = 0.1
    delta: float = 1e-7
    n_random: int = 200
    resample_period: int = 20
    n_burn: int = 2000
    n_sparse: int = 2000
    n_tune: int = 1000
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lbfgs_history: int = 10
    lbfgs_max_line_search: int = 25
    # weight functions
    beta: float = 5.0
    nodes_per_axis: int = 40
    r_min: float | None = None
    r_max: float | None = None
    # network
    hidden_layers: int = 5
    width: int = 40
    normalize_columns: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_data", "lambda_weak", "lambda_lp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        for name in ("n_burn", "n_sparse", "n_tune", "n_random", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.resample_period < 1 or self.patience < 1:
            raise ValueError("resample_period and patience must be positive")
        if self.nodes_per_axis < 3:
            raise ValueError("nodes_per_axis must be at least 3")

    def lambda_lp_for(self, phase: str) -> float:
        return self.lambda_lp if phase == SPARSIFY else 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------- loss pieces


def data_loss(params: ParamVector, dataset: Dataset, config: NetworkConfig, prefix: str = "") -> float:
    """Full-batch mean squared error of the network against the samples."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    r = evaluate(params, dataset.points, config, prefix) - dataset.values
    return float(r @ r) / len(r)


def lp_loss(xi, eta) -> float:
    """sum eta_m xi_m^2 over the active entries."""
    values = np.asarray(getattr(xi, "values", xi), dtype=np.float64)
    active = getattr(xi, "active", np.ones(values.shape, dtype=bool))
    eta = np.asarray(eta, dtype=np.float64)
    return float(np.sum(np.where(active, eta * values * values, 0.0)))


def lp_value(xi, p: float) -> float:
    """The unpenalised quantity sum |xi_m|^p that the reweighting approximates."""
    values = np.asarray(getattr(xi, "values", xi), dtype=np.float64)
    return float(np.sum(np.abs(values[values != 0]) ** p))


def refresh_eta(xi, p: float, delta: float) -> np.ndarray:
    """eta_m = 1 / max(|xi_m|^(2 - p), delta), to be held fixed for an epoch."""
    values = np.asarray(getattr(xi, "values", xi), dtype=np.float64)
    return 1.0 / np.maximum(np.abs(values) ** (2.0 - p), delta)


def update_targeted_weights(res: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Ids of rows whose residual is strictly above mean + 2 * sample SD."""
    res = np.abs(np.asarray(res, dtype=np.float64))
    ids = np.asarray(ids)
    if res.size < 2:
        return ids[:0]
    threshold = res.mean() + 2.0 * res.std(ddof=1)
    return ids[res > threshold]


def threshold_xi(xi: CoefficientVector, delta: float, scale=None) -> CoefficientVector:
    """Mask entries with |xi_m| (times the optional column scale) below sqrt(delta)."""
    mag = np.abs(xi.values) if scale is None else np.abs(xi.values * scale)
    active = xi.active & ~(mag < np.sqrt(delta))
    if not active.any():
        log.warning("every coefficient fell below sqrt(delta); continuing with an empty PDE")
    return CoefficientVector(xi.values, active)


def adam_step(optimizer: Adam, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return optimizer.step(x, grad)


def lbfgs_step(optimizer: LBFGS, x: np.ndarray, fun, f0=None, g0=None):
    return optimizer.step(x, fun, f0, g0)


# --------------------------------------------------------------------------- state


@dataclass
class DatasetState:
    data: Dataset
    config: NetworkConfig
    prefix: str
    cache: WeightCache
    rng: np.random.Generator
    ids: itertools.count
    r_min: float
    r_max: float
    random: list[WeightFunction] = field(default_factory=list)
    targeted: list[WeightFunction] = field(default_factory=list)

    def rows(self) -> list[WeightFunction]:
        """Random and targeted weights, deduplicated by id (random first)."""
        seen = set()
        out = []
        for w in itertools.chain(self.random, self.targeted):
            if w.id not in seen:
                seen.add(w.id)
                out.append(w)
        return out


@dataclass
class TrainState:
    params: ParamVector
    xi_active: np.ndarray
    eta: np.ndarray
    scale: np.ndarray
    datasets: list[DatasetState]
    phase: str = BURN_IN
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def xi(self) -> CoefficientVector:
        return CoefficientVector(self.params[XI], self.xi_active)

    def networks(self) -> list[ParamVector]:
        out = []
        for ds in self.datasets:
            names = [n for n in self.params.names() if n.startswith(ds.prefix)]
            out.append(ParamVector.from_arrays({n[len(ds.prefix):]: self.params[n] for n in names}))
        return out


@dataclass
class TrainResult:
    xi: CoefficientVector
    networks: list[ParamVector]
    history: list[dict]
    pde: str
    epochs_per_phase: dict[str, int]
    library: LibrarySpec
    aborted: bool = False

    def coefficient_table(self) -> list[tuple[str, float, bool]]:
        return [(t, float(v), bool(a)) for t, v, a in
                zip(self.library.term_strings(), self.xi.values, self.xi.active)]


def resample_random_weights(state: TrainState, n_random: int, beta: float) -> None:
    """Replace every dataset's random set with fresh draws; targeted sets are kept."""
    for ds in state.datasets:
        ds.random = sample_random_weights(ds.data.domain, n_random, ds.r_min, ds.r_max,
                                          seed=ds.rng, beta=beta, ids=ds.ids)
        ds.cache.retain(w.id for w in ds.rows())


def init_state(config: TrainConfig, datasets: Sequence[Dataset], library: LibrarySpec) -> TrainState:
    if not datasets:
        raise ValueError("need at least one dataset")
    if library.n_terms == 0:
        raise ValueError("library has no right-hand-side terms")
    seeds = np.random.SeedSequence(config.seed).spawn(len(datasets))
    arrays = {}
    states = []
    for j, (data, ss) in enumerate(zip(datasets, seeds)):
        net_seed, master_seed, weight_seed = ss.spawn(3)
        prefix = f"d{j}."
        dom = data.domain
        net = NetworkConfig.for_domain(dom.lo, dom.hi, hidden_layers=config.hidden_layers, width=config.width)
        arrays.update(init_arrays(net, np.random.default_rng(net_seed), prefix))
        master = make_master(dom, library, config.nodes_per_axis,
                             seed=np.random.default_rng(master_seed), beta=config.beta)
        lo, hi = default_radii(dom)
        r_min = lo if config.r_min is None else config.r_min
        r_max = hi if config.r_max is None else config.r_max
        states.append(DatasetState(data, net, prefix, WeightCache(master), np.random.default_rng(weight_seed),
                                   itertools.count(), r_min, r_max))
    # xi starts at zero: the weak loss alone supplies its first gradient
    arrays[XI] = np.zeros(library.n_terms)
    params = ParamVector.from_arrays(arrays)
    M = library.n_terms
    return TrainState(params, np.ones(M, dtype=bool), np.ones(M), np.ones(M), states)


# --------------------------------------------------------------------------- the loss


class EpochLoss:
    """Loss and gradient at fixed weight sets, eta and penalty weight.

    The most recent evaluation's components and weak systems are kept for
    logging and targeted-weight selection.
    """

    def __init__(self, state: TrainState, library: LibrarySpec, config: TrainConfig, lambda_lp: float):
        self.state = state
        self.library = library
        self.config = config
        self.lambda_lp = lambda_lp
        self.stacked = [ds.cache.stack(ds.rows()) for ds in state.datasets]
        self.parts: dict = {}
        self.systems: list[WeakSystem] = []
        self.monitor: list = []

    def expression(self, leaves, tape):
        cfg = self.config
        xi = leaves[XI]
        total = 0.0
        parts = {"data": 0.0, "weak": 0.0}
        systems = []
        for ds, stacked in zip(self.state.datasets, self.stacked):
            pred = evaluate_taped(leaves, ds.data.points, ds.config, ds.prefix, self.monitor)
            r = pred - ds.data.values
            dl = (r * r).sum() * (1.0 / len(ds.data))
            A, b = assemble_taped(leaves, stacked, self.library, ds.config, ds.prefix, self.monitor)
            res = b - A @ xi
            wl = (res * res).sum()
            # grouped per dataset so that identical datasets add up exactly
            total = total + (cfg.lambda_data * dl + cfg.lambda_weak * wl)
            parts["data"] += float(dl.value)
            parts["weak"] += float(wl.value)
            systems.append(WeakSystem(A.value, b.value, stacked.ids.copy()))
        if self.lambda_lp > 0:
            weights = self.state.eta * self.state.scale**2 * self.state.xi_active
            pen = (xi * xi * weights).sum()
            total = total + self.lambda_lp * pen
        self.parts = parts
        self.systems = systems
        return total

    def value(self, x: np.ndarray) -> float:
        """Loss only, no backward sweep."""
        self.monitor = []
        value, _ = ad.forward(self.expression, self.state.params.with_data(x), epoch=self.state.epoch)
        return float(value)

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        params = self.state.params.with_data(x)
        self.monitor = []
        value, tape = ad.forward(self.expression, params, epoch=self.state.epoch)
        grad = ad.backward(tape, params).data
        if not np.isfinite(value):
            raise NonFiniteError("loss", self.state.epoch)
        sl = self.state.params.slice(XI)
        grad[sl] = np.where(self.state.xi_active, grad[sl], 0.0)
        for name, q in self.monitor:
            log.warning("epoch %d: rational denominator %s reached |q| = %.3g", self.state.epoch, name, q)
        return value, grad


# --------------------------------------------------------------------------- driver


def _column_scale(state: TrainState, library: LibrarySpec) -> np.ndarray:
    """Root-sum-square column norms of the current weak systems (all datasets)."""
    sq = None
    for ds in state.datasets:
        system = assemble(state.params, ds.cache.stack(ds.rows()), library, ds.config, prefix=ds.prefix)
        col = (system.A**2).sum(axis=0)
        sq = col if sq is None else sq + col
    scale = np.sqrt(sq)
    return np.where(scale > 0, scale, 1.0)


class _Logger:
    def __init__(self, out_dir: Path | None):
        self.fh = None
        if out_dir is not None:
            self.fh = open(out_dir / "epochs.log", "w")

    def write(self, line: str) -> None:
        log.info(line)
        if self.fh is not None:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _checkpoint(state: TrainState, out_dir: Path | None, name: str) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / name
    meta = {"epoch": state.epoch, "phase": state.phase, "xi_active": state.xi_active.tolist(),
            "eta": state.eta.tolist()}
    save_checkpoint(path, state.params, meta)
    return path


def run_training(config: TrainConfig, datasets: Sequence[Dataset], library: LibrarySpec,
                 out_dir=None, log_every: int = 1) -> TrainResult:
    """Run the three-phase schedule and return the identified PDE.

    With ``out_dir`` set, the epoch log, periodic checkpoints and a final
    checkpoint are written there.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = init_state(config, datasets, library)
    logger = _Logger(out_dir)
    last_good = _checkpoint(state, out_dir, "checkpoint_last_good.bin")
    counts = {ph: 0 for ph in PHASES}
    t_start = time.time()

    def epoch_start(phase: str):
        if state.epoch % config.resample_period == 0:
            resample_random_weights(state, config.n_random, config.beta)
        if config.normalize_columns:
            state.scale = _column_scale(state, library)
        state.eta = refresh_eta(state.xi.values * state.scale, config.p, config.delta)
        return EpochLoss(state, library, config, config.lambda_lp_for(phase))

    def epoch_end(phase: str, loss: EpochLoss, value: float):
        nonlocal last_good
        xi = state.params[XI]
        for ds, system in zip(state.datasets, loss.systems):
            chosen = set(update_targeted_weights(residuals(system, xi), system.ids).tolist())
            by_id = {w.id: w for w in ds.rows()}
            ds.targeted = [by_id[i] for i in sorted(chosen)]
            ds.cache.retain(w.id for w in ds.rows())
        rec = {
            "epoch": state.epoch,
            "phase": phase,
            "loss": value,
            "data": loss.parts["data"],
            "weak": loss.parts["weak"],
            "lp": lp_value(state.xi, config.p),
            "active": int(state.xi_active.sum()),
            "K": int(sum(s.n_weights for s in loss.stacked)),
        }
        state.history.append(rec)
        counts[phase] += 1
        if log_every and state.epoch % log_every == 0:
            logger.write(
                f"epoch={rec['epoch']} phase={phase} data={rec['data']:.6e} weak={rec['weak']:.6e} "
                f"lp={rec['lp']:.6e} active={rec['active']} K={rec['K']}")
        state.epoch += 1
        if out_dir is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            _checkpoint(state, out_dir, f"checkpoint_{state.epoch:06d}.bin")
        last_good = _checkpoint(state, out_dir, "checkpoint_last_good.bin") if out_dir is not None else None

    def mask_xi():
        sl = state.params.slice(XI)
        state.params.data[sl] = np.where(state.xi_active, state.params.data[sl], 0.0)

    def transition():
        xi = threshold_xi(state.xi, config.delta, state.scale if config.normalize_columns else None)
        state.xi_active = xi.active & state.xi_active
        mask_xi()

    try:
        adam = Adam(len(state.params), config.lr, config.beta1, config.beta2, config.eps)
        sl = state.params.slice(XI)
        xi_positions = np.arange(len(state.params))[sl]
        for phase, n_epochs in ((BURN_IN, config.n_burn), (SPARSIFY, config.n_sparse)):
            state.phase = phase
            if phase == SPARSIFY:
                transition()
            for _ in range(n_epochs):
                loss = epoch_start(phase)
                value, grad = loss(state.params.data)
                state.params = state.params.with_data(adam_step(adam, state.params.data, grad))
                adam.reset(xi_positions[~state.xi_active])
                mask_xi()
                epoch_end(phase, loss, value)

        state.phase = FINE_TUNE
        transition()
        lbfgs = LBFGS(history=config.lbfgs_history, max_line_search=config.lbfgs_max_line_search)
        best, stale = -np.inf, 0
        for _ in range(config.n_tune):
            loss = epoch_start(FINE_TUNE)
            # the weight sets change between epochs, so the old curvature pairs
            # still describe a nearby function; keep them
            value, grad = loss(state.params.data)
            step = lbfgs_step(lbfgs, state.params.data, loss, value, grad)
            state.params = state.params.with_data(step.x)
            mask_xi()
            epoch_end(FINE_TUNE, loss, value)
            current = lp_value(state.xi, config.p)
            if current > best:
                best, stale = current, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.write(f"fine-tuning stopped at epoch {state.epoch}: L^p value flat for "
                                 f"{config.patience} epochs")
                    break
    except (NonFiniteError, ad.DivisionGuardError) as exc:
        logger.write(f"aborted at epoch {state.epoch}: {exc}")
        logger.close()
        raise TrainingAborted(str(exc), state.epoch, last_good) from exc

    mask_xi()
    xi = state.xi
    result = TrainResult(xi, state.networks(), state.history, format_pde(library, xi), counts, library)
    logger.write(f"finished after {state.epoch} epochs in {time.time() - t_start:.1f}s: {result.pde}")
    logger.close()
    if out_dir is not None:
        _checkpoint(state, out_dir, "checkpoint_final.bin")
    return result


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def result_summary(result: TrainResult, config: TrainConfig) -> dict:
    return {
        "pde": result.pde,
        "coefficients": [{"term": t, "value": v, "active": a} for t, v, a in result.coefficient_table()],
        "epochs_per_phase": result.epochs_per_phase,
        "config": config_dict(config),
        "seed": config.seed,
    }


def write_report(path, result: TrainResult, config: TrainConfig, extra: dict | None = None) -> None:
    summary = result_summary(result, config)
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
