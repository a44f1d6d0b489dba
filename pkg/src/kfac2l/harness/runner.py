"""Run orchestration and CSV logging."""
from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from ..network import Network
from ..optim import (CURVATURE, Diverged, GridCell, NoViableConfig, OptimizerConfig, Problem, RunRecord,
                     grid_search, train)
from .config import ConfigError, ExperimentConfig
from .data import load_dataset

log = logging.getLogger(__name__)

CSV_HEADER = ("run_id", "method", "epoch", "step", "loss", "gap", "residual_norm", "seconds")
GRID_HEADER = ("method", "lr", "damping", "best_loss", "status")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows: Iterable[tuple], header=CSV_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def epoch_rows(run_id: str, record: RunRecord, record_time: bool = False) -> list[tuple]:
    """One row per completed epoch ``e``: the training loss entering the epoch,
    the step count at that point, and the worst gap / mean residual norm over
    the epoch's steps."""
    rows = []
    by_epoch: dict[int, list] = {}
    for s in record.steps:
        by_epoch.setdefault(s.epoch, []).append(s)
    step = 0
    for e in range(record.epochs_completed):
        steps = by_epoch.get(e, [])
        gaps = [s.gap for s in steps if s.gap is not None]
        res = [s.residual_norm for s in steps if s.residual_norm is not None]
        secs = sum(s.seconds for s in steps) if record_time else None
        rows.append((run_id, record.method, e, step, record.losses[e],
                     max(gaps) if gaps else None, sum(res) / len(res) if res else None, secs))
        step += len(steps)
    return rows


def step_rows(run_id: str, record: RunRecord, record_time: bool = False) -> list[tuple]:
    return [(run_id, record.method, s.epoch, s.step, s.loss, s.gap, s.residual_norm,
             s.seconds if record_time else None) for s in record.steps]


def write_run_log(directory: Path, run_id: str, record: Optional[RunRecord], record_time: bool = False) -> Path:
    path = Path(directory) / f"{run_id}.csv"
    rows = epoch_rows(run_id, record, record_time) if record is not None else []
    _write_atomic(path, _csv_text(rows))
    if record is not None and record.method in CURVATURE and any(s.gap is not None for s in record.steps):
        _write_atomic(Path(directory) / f"{run_id}.steps.csv", _csv_text(step_rows(run_id, record, record_time)))
    return path


def write_grid_log(directory: Path, name: str, method: str, cells: list[GridCell]) -> Path:
    path = Path(directory) / f"{name}__{method}__grid.csv"
    rows = [(method, c.lr, c.damping, c.best_loss if c.status != "diverged" else None, c.status) for c in cells]
    _write_atomic(path, _csv_text(rows, GRID_HEADER))
    return path


def build_problem(cfg: ExperimentConfig) -> Problem:
    layers = cfg.model.build_layers()
    probe = Network(layers, cfg.model.loss)
    data = load_dataset(cfg.data, probe.in_size, probe.out_size, cfg.model.loss, cfg.data_seed,
                        Path(cfg.base_dir))
    if cfg.data.batch_size > len(data.inputs):
        raise ConfigError(f"batch size {cfg.data.batch_size} exceeds dataset size {len(data.inputs)}")
    return Problem(layers, cfg.model.loss, data.inputs, data.targets, cfg.data.batch_size)


def run_id(cfg: ExperimentConfig, method: str) -> str:
    return f"{cfg.name}__{method}__seed{cfg.seed}"


@dataclass
class MethodResult:
    method: str
    run_id: str
    config: Optional[OptimizerConfig] = None
    record: Optional[RunRecord] = None
    cells: list[GridCell] = field(default_factory=list)
    error: Optional[str] = None
    log_path: Optional[Path] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_method(cfg: ExperimentConfig, problem: Problem, method: str, search: bool) -> MethodResult:
    rid = run_id(cfg, method)
    base = cfg.optimizer_config(method)
    res = MethodResult(method, rid, base)
    patience = cfg.patience
    try:
        if search:
            best, record, cells = grid_search(problem, base, cfg.grid.lr, cfg.grid.damping, cfg.epochs, patience)
            res.config, res.record, res.cells = best, record, cells
        else:
            res.record = train(problem, base, cfg.epochs, patience)
    except Diverged as exc:
        res.error = f"diverged: {exc}"
        res.record = exc.record
    except NoViableConfig as exc:
        res.error = f"no viable config: {exc}"
    return res


def run_experiment(cfg: ExperimentConfig, threads: int = 1, search: Optional[bool] = None,
                   write_logs: bool = True) -> list[MethodResult]:
    """Train every configured method and write one CSV per run.

    With ``search`` (default: the config's ``grid_search``) each method is
    grid-searched first and the winning cell's run is the one logged; the
    winning cell already used the experiment seed and epoch budget, so it is
    the final run. A failed run keeps its partial log next to a ``.failed``
    marker.
    """
    search = cfg.grid_search if search is None else search
    problem = build_problem(cfg)
    out_dir = Path(cfg.output_dir)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_run_method, cfg, problem, m, search) for m in cfg.methods]
        results = [f.result() for f in futures]
    if write_logs:
        for res in results:
            if search and res.cells:
                write_grid_log(out_dir, cfg.name, res.method, res.cells)
            res.log_path = write_run_log(out_dir, res.run_id, res.record, cfg.record_time)
            marker = out_dir / f"{res.run_id}.csv.failed"
            if res.ok:
                if marker.exists():
                    marker.unlink()
            else:
                _write_atomic(marker, res.error + "\n")
    for res in results:
        if res.ok:
            log.info("%s: final loss %.6g (lr=%g, damping=%g)", res.method, res.record.final_loss,
                     res.config.lr, res.config.damping)
        else:
            log.warning("%s: %s", res.method, res.error)
    return results
