"""Optimizer steps, the training loop, early stopping and grid search."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import twolevel as tl
from .fisher import FisherOracle
from .kfac import NonSPDFactorError, build_blocks, kfac_apply_inverse
from .linalg import solve_spd
from .network import Network, backward, forward, loss_value, per_sample_loss, sample_targets
from .rng import STREAM_INIT, STREAM_SHUFFLE, STREAM_TARGETS, generator

SGD = "SGD"
SGD_MOMENTUM = "SGD-MOMENTUM"
ADAM = "ADAM"
KFAC = "KFAC"
EXACT_NGD = "EXACT-NGD"
NICO = "NICO"
SPECTRAL = "SPECTRAL"
RESIDU = "RESIDU"
KRY_NICO = "KRY-NICO"
KRY_RESIDU = "KRY-RESIDU"
PREVIOUS = "PREVIOUS"
TAYLOR = "TAYLOR"

COARSE_KIND = {
    NICO: tl.NICOLAIDES,
    SPECTRAL: tl.SPECTRAL,
    RESIDU: tl.RESIDUALS,
    KRY_NICO: tl.KRYLOV_NICO,
    KRY_RESIDU: tl.KRYLOV_RESIDU,
    PREVIOUS: tl.NICOLAIDES,
    TAYLOR: tl.TAYLOR,
}
TWO_LEVEL = tuple(COARSE_KIND)
CURVATURE = (KFAC, EXACT_NGD) + TWO_LEVEL
FIRST_ORDER = (SGD, SGD_MOMENTUM, ADAM)
METHODS = FIRST_ORDER + CURVATURE

FULL_GRID = tuple(10.0 ** k for k in range(-4, 5))


class Diverged(RuntimeError):
    def __init__(self, message: str, record: Optional["RunRecord"] = None):
        super().__init__(message)
        self.record = record


class NoViableConfig(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    lr: float = 1e-2
    damping: float = 1e-2
    weight_decay: float = 1e-3
    taylor_order: int = 2
    krylov_width: int = 2
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.lr < 0 or self.damping < 0 or self.weight_decay < 0:
            raise ValueError("lr, damping and weight_decay must be non-negative")

    @property
    def uses_damping(self) -> bool:
        return self.method in CURVATURE


@dataclass
class StepDiagnostics:
    epoch: int
    step: int
    loss: float                       # mini-batch loss before the update
    gap: Optional[float] = None
    residual_norm: Optional[float] = None
    seconds: float = 0.0


@dataclass
class RunRecord:
    method: str
    config: OptimizerConfig
    losses: list[float] = field(default_factory=list)   # losses[e]: full training loss after e epochs
    steps: list[StepDiagnostics] = field(default_factory=list)
    status: str = "ok"
    seconds: float = 0.0

    @property
    def epochs_completed(self) -> int:
        return max(len(self.losses) - 1, 0)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    @property
    def best_loss(self) -> float:
        return min(self.losses) if self.losses else math.nan

    def gaps(self) -> list[float]:
        return [s.gap for s in self.steps if s.gap is not None]

    def epochs_to_reach(self, threshold: float) -> Optional[int]:
        """First epoch count whose loss is at or below ``threshold``."""
        for e, value in enumerate(self.losses):
            if value <= threshold:
                return e
        return None


def _check_finite(loss: float, what: str = "loss"):
    if not math.isfinite(loss):
        raise Diverged(f"non-finite {what}: {loss}")


def step_kfac2l(net: Network, batch: tuple[np.ndarray, np.ndarray], config: OptimizerConfig,
                rng: np.random.Generator, epoch: int = 0, step: int = 0) -> tuple[np.ndarray, StepDiagnostics]:
    """One curvature step (KFAC, exact NGD, or a two-level variant).

    The gradient uses the true targets; the Fisher estimate, the Kronecker
    factors and every coarse-space product share one backward pass on targets
    sampled from the model. Weight decay enters the gradient before
    preconditioning.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    z, cache = forward(net, x)
    batch_loss = float(np.mean(per_sample_loss(net.loss, z, y)))
    _check_finite(batch_loss)
    _, grad = backward(net, cache, y, outputs=z)
    grad = grad + config.weight_decay * net.theta

    y_model = sample_targets(cache, z, rng)
    backward(net, cache, y_model, outputs=z)
    oracle = FisherOracle(net, cache, config.damping)
    diag = StepDiagnostics(epoch=epoch, step=step, loss=batch_loss)

    if config.method == EXACT_NGD:
        F = oracle.explicit_fim()
        delta = solve_spd(F + config.damping * np.eye(net.p), grad)
    else:
        blocks = build_blocks(net, cache, config.damping)
        delta = kfac_apply_inverse(blocks, grad)
        if config.method in TWO_LEVEL:
            r = oracle.residual(grad, delta)
            R0 = tl.build_space(COARSE_KIND[config.method], blocks, oracle, r,
                                taylor_order=config.taylor_order, krylov_width=config.krylov_width)
            op = tl.coarse_operator(oracle, R0)
            if config.method == PREVIOUS:
                beta = tl.beta_tko(op, R0, grad)
            else:
                beta = tl.beta_star(op, R0, r)
            delta = tl.apply_correction(delta, R0, beta)
            diag.gap = tl.gap(op, R0, beta, r)
            diag.residual_norm = float(np.linalg.norm(r))
    if not np.all(np.isfinite(delta)):
        raise Diverged("non-finite update direction")
    diag.seconds = time.perf_counter() - t0
    return net.theta - config.lr * delta, diag


def _gradient(net: Network, batch, config: OptimizerConfig) -> tuple[np.ndarray, float]:
    x, y = batch
    z, cache = forward(net, x)
    batch_loss = float(np.mean(per_sample_loss(net.loss, z, y)))
    _check_finite(batch_loss)
    _, grad = backward(net, cache, y, outputs=z)
    return grad + config.weight_decay * net.theta, batch_loss


def step_sgd(net: Network, batch, config: OptimizerConfig, state: dict) -> np.ndarray:
    """Plain or heavy-ball SGD. ``state`` carries the momentum buffer."""
    grad, state["loss"] = _gradient(net, batch, config)
    if config.method == SGD_MOMENTUM:
        buf = state.get("momentum")
        buf = grad.copy() if buf is None else config.momentum * buf + grad
        state["momentum"] = buf
        grad = buf
    return net.theta - config.lr * grad


def step_adam(net: Network, batch, config: OptimizerConfig, state: dict) -> np.ndarray:
    """Bias-corrected Adam; ``state`` holds ``m``, ``v`` and the step count ``t``."""
    grad, state["loss"] = _gradient(net, batch, config)
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.get("t", 0) + 1
    m = b1 * state.get("m", np.zeros_like(grad)) + (1 - b1) * grad
    v = b2 * state.get("v", np.zeros_like(grad)) + (1 - b2) * grad * grad
    state.update(t=t, m=m, v=v)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return net.theta - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


CONTINUE = "continue"
STOP = "stop"


def early_stopping(history: Sequence[float], patience: int = 10) -> str:
    """Stop once the running best has not strictly decreased for ``patience`` epochs."""
    if not history:
        raise ValueError("empty loss history")
    best = math.inf
    since = 0
    for value in history:
        if value < best:
            best, since = value, 0
        else:
            since += 1
    return STOP if since >= patience else CONTINUE


@dataclass
class Problem:
    """A training set plus the architecture to fit on it."""

    layers: Sequence
    loss: str
    inputs: np.ndarray
    targets: np.ndarray
    batch_size: int

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        if not 1 <= self.batch_size <= len(self.inputs):
            raise ValueError(f"batch size {self.batch_size} must lie in [1, {len(self.inputs)}]")

    def make_net(self, seed: int) -> Network:
        return Network(self.layers, self.loss).init_params(generator(seed, STREAM_INIT))


def train(problem: Problem, config: OptimizerConfig, epochs: int, patience: Optional[int] = 10,
          on_epoch: Optional[Callable[[RunRecord], None]] = None) -> RunRecord:
    """Train from the seeded initialization for up to ``epochs`` epochs.

    Raises :class:`Diverged` (carrying the partial record) if a loss or an
    update stops being finite.
    """
    net = problem.make_net(config.seed)
    target_rng = generator(config.seed, STREAM_TARGETS)
    shuffle_rng = generator(config.seed, STREAM_SHUFFLE)
    record = RunRecord(method=config.method, config=config)
    state: dict = {}
    n = len(problem.inputs)
    B = problem.batch_size
    start = time.perf_counter()
    step = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        if epochs > 0:
            record.losses.append(loss_value(net, problem.inputs, problem.targets))
        try:
            _check_finite(record.losses[-1] if record.losses else 0.0)
            for epoch in range(epochs):
                order = shuffle_rng.permutation(n)
                for lo in range(0, n, B):
                    idx = order[lo:lo + B]
                    batch = (problem.inputs[idx], problem.targets[idx])
                    if config.method in CURVATURE:
                        theta, diag = step_kfac2l(net, batch, config, target_rng, epoch, step)
                    else:
                        t0 = time.perf_counter()
                        stepper = step_adam if config.method == ADAM else step_sgd
                        theta = stepper(net, batch, config, state)
                        diag = StepDiagnostics(epoch, step, state["loss"], seconds=time.perf_counter() - t0)
                    if not np.all(np.isfinite(theta)):
                        raise Diverged("non-finite parameters")
                    net.theta = theta
                    record.steps.append(diag)
                    step += 1
                current = loss_value(net, problem.inputs, problem.targets)
                _check_finite(current)
                record.losses.append(current)
                if on_epoch is not None:
                    on_epoch(record)
                if patience is not None and early_stopping(record.losses, patience) == STOP:
                    record.status = "early-stopped"
                    break
        except Diverged as exc:
            record.status = "diverged"
            record.seconds = time.perf_counter() - start
            exc.record = record
            raise
        except (np.linalg.LinAlgError, NonSPDFactorError) as exc:
            # singular coarse systems / non-SPD damped factors at absurd hyper-parameters
            record.status = "diverged"
            record.seconds = time.perf_counter() - start
            raise Diverged(f"{type(exc).__name__}: {exc}", record) from exc
    record.seconds = time.perf_counter() - start
    return record


@dataclass
class GridCell:
    lr: float
    damping: Optional[float]
    best_loss: float
    status: str
    record: Optional[RunRecord] = None


def grid_search(problem: Problem, base: OptimizerConfig, lrs: Sequence[float] = FULL_GRID,
                dampings: Sequence[float] = FULL_GRID, epochs: int = 100,
                patience: Optional[int] = 10) -> tuple[OptimizerConfig, RunRecord, list[GridCell]]:
    """Exhaustive search over learning rate (and damping for curvature methods).

    The winner has the lowest running-best training loss; ties go to the
    smaller learning rate, then the smaller damping.
    """
    damp_values: Sequence[Optional[float]] = dampings if base.uses_damping else [None]
    cells: list[GridCell] = []
    for lr, lam in itertools.product(sorted(lrs), sorted(damp_values, key=lambda d: -1 if d is None else d)):
        cfg = replace(base, lr=lr) if lam is None else replace(base, lr=lr, damping=lam)
        try:
            rec = train(problem, cfg, epochs, patience)
        except Diverged as exc:
            cells.append(GridCell(lr, lam, math.inf, "diverged", exc.record))
            continue
        cells.append(GridCell(lr, lam, rec.best_loss, rec.status, rec))
    viable = [c for c in cells if c.status != "diverged" and math.isfinite(c.best_loss)]
    if not viable:
        raise NoViableConfig(f"every grid cell diverged for {base.method}")
    best = min(viable, key=lambda c: (c.best_loss, c.lr, -1.0 if c.damping is None else c.damping))
    return best.record.config, best.record, cells
