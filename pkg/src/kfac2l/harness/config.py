"""Experiment configuration files (TOML).

Example::

    name = "autoencoder"
    seed = 0
    epochs = 30
    methods = ["SGD", "KFAC", "NICO"]
    grid_search = true

    [model]
    loss = "squared_error"
    input_shape = [16]
    layers = [
      { kind = "dense", units = 8, activation = "tanh" },
      { kind = "dense", units = 16 },
    ]

    [data]
    source = "synthetic-autoencoder"
    n_samples = 256
    batch_size = 32

    [optimizer]
    lr = 0.1
    damping = 0.01

    [optimizer.overrides.SGD]
    lr = 0.5

    [grid]
    lr = [0.01, 0.1, 1.0]
    damping = [0.001, 0.01, 0.1]
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..network import ACTIVATIONS, LOSSES, ConvSpec, DenseSpec
from ..optim import METHODS, FULL_GRID, OptimizerConfig
from .data import SOURCES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    units: int = 0          # dense output width
    channels: int = 0       # conv output channels
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    activation: str = "identity"


@dataclass(frozen=True)
class ModelSpec:
    loss: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerConfig, ...]

    def build_layers(self) -> list:
        """Resolve layer configs into concrete specs, threading shapes through the stack."""
        shape = tuple(self.input_shape)
        out = []
        for k, lc in enumerate(self.layers):
            if lc.kind == "dense":
                d_in = 1
                for s in shape:
                    d_in *= s
                out.append(DenseSpec(d_in, lc.units, lc.activation))
                shape = (lc.units,)
            else:
                if len(shape) != 3:
                    raise ConfigError(f"layer {k}: conv layers need a (channels, height, width) input, got {shape}")
                spec = ConvSpec(shape[0], lc.channels, lc.kernel, shape[1:], lc.stride, lc.padding, lc.activation)
                out.append(spec)
                shape = (lc.channels, *spec.out_hw)
        return out


@dataclass(frozen=True)
class DataSpec:
    source: str
    batch_size: int
    n_samples: int = 0               # 0: keep every sample
    path: str = ""
    labels_path: str = ""
    autoencoder: bool = False
    n_targets: int = 1
    noise: float = 0.1
    latent: int = 3
    separation: float = 0.5
    seed: int = -1                   # -1: use the experiment seed


@dataclass(frozen=True)
class OptimizerDefaults:
    lr: float = 1e-2
    damping: float = 1e-2
    weight_decay: float = 1e-3
    taylor_order: int = 2
    krylov_width: int = 2
    momentum: float = 0.9
    overrides: dict = field(default_factory=dict)   # method -> {field: value}


@dataclass(frozen=True)
class GridSpec:
    lr: tuple[float, ...] = FULL_GRID
    damping: tuple[float, ...] = FULL_GRID


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelSpec
    data: DataSpec
    methods: tuple[str, ...]
    seed: int = 0
    epochs: int = 100
    patience: int = 10
    grid_search: bool = False
    output_dir: str = "runs"
    record_time: bool = False
    optimizer: OptimizerDefaults = OptimizerDefaults()
    grid: GridSpec = GridSpec()
    base_dir: str = field(default=".", compare=False)

    def optimizer_config(self, method: str, seed: Optional[int] = None) -> OptimizerConfig:
        o = self.optimizer
        values = dict(lr=o.lr, damping=o.damping, weight_decay=o.weight_decay, taylor_order=o.taylor_order,
                      krylov_width=o.krylov_width, momentum=o.momentum)
        values.update(o.overrides.get(method, {}))
        return OptimizerConfig(method=method, seed=self.seed if seed is None else seed, **values)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed < 0 else self.data.seed

    def resolve(self, path: str) -> Path:
        return Path(self.base_dir) / path


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"[{where}] has unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return tuple(int(x) for x in v)


def from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    raw = dict(raw)
    try:
        model_raw = dict(raw.pop("model"))
        data_raw = dict(raw.pop("data"))
    except KeyError as exc:
        raise ConfigError(f"missing required table [{exc.args[0]}]") from None
    layers = []
    for k, lr in enumerate(model_raw.pop("layers", [])):
        lr = dict(lr)
        if "kernel" in lr:
            lr["kernel"] = _pair(lr["kernel"])
        lc = _build(LayerConfig, lr, f"model.layers[{k}]")
        if lc.kind not in ("dense", "conv"):
            raise ConfigError(f"model.layers[{k}]: kind must be 'dense' or 'conv'")
        if lc.activation not in ACTIVATIONS:
            raise ConfigError(f"model.layers[{k}]: unknown activation {lc.activation!r}")
        if (lc.kind == "dense" and lc.units < 1) or (lc.kind == "conv" and lc.channels < 1):
            raise ConfigError(f"model.layers[{k}]: layer width must be positive")
        layers.append(lc)
    if not layers:
        raise ConfigError("model.layers is empty")
    model_raw["input_shape"] = tuple(int(s) for s in model_raw.get("input_shape", ()))
    model = _build(ModelSpec, {**model_raw, "layers": tuple(layers)}, "model")
    if model.loss not in LOSSES:
        raise ConfigError(f"model.loss must be one of {LOSSES}")
    data = _build(DataSpec, data_raw, "data")
    if data.source not in SOURCES:
        raise ConfigError(f"data.source must be one of {SOURCES}")
    if data.batch_size < 1:
        raise ConfigError("data.batch_size must be positive")
    if data.n_samples and data.batch_size > data.n_samples:
        raise ConfigError(f"batch size {data.batch_size} exceeds dataset size {data.n_samples}")
    opt_raw = dict(raw.pop("optimizer", {}))
    opt_raw["overrides"] = {m: dict(v) for m, v in opt_raw.get("overrides", {}).items()}
    optimizer = _build(OptimizerDefaults, opt_raw, "optimizer")
    for m in optimizer.overrides:
        if m not in METHODS:
            raise ConfigError(f"optimizer.overrides: unknown method {m!r}")
    grid_raw = {k: tuple(float(x) for x in v) for k, v in raw.pop("grid", {}).items()}
    grid = _build(GridSpec, grid_raw, "grid")
    raw["methods"] = tuple(raw.get("methods", ()))
    for m in raw["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if not raw["methods"]:
        raise ConfigError("methods list is empty")
    cfg = _build(ExperimentConfig, {**raw, "model": model, "data": data, "optimizer": optimizer,
                                    "grid": grid, "base_dir": base_dir}, "top level")
    if cfg.epochs < 0 or cfg.patience < 1:
        raise ConfigError("epochs must be >= 0 and patience >= 1")
    try:
        model.build_layers()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    for key in ("path", "labels_path"):
        value = getattr(data, key)
        if value and not cfg.resolve(value).exists():
            raise ConfigError(f"data.{key} {value!r} does not exist")
    if data.source in ("idx", "csv") and not data.path:
        raise ConfigError(f"data.source {data.source!r} needs data.path")
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d.pop("base_dir")
    d["methods"] = list(cfg.methods)
    d["model"]["input_shape"] = list(cfg.model.input_shape)
    d["model"]["layers"] = [{**asdict(lc), "kernel": list(lc.kernel)} for lc in cfg.model.layers]
    d["grid"] = {k: list(v) for k, v in d["grid"].items()}
    if not d["optimizer"]["overrides"]:
        del d["optimizer"]["overrides"]
    return d


def loads(text: str, base_dir: str = ".") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(raw, base_dir)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def load(path_or_preset: str) -> ExperimentConfig:
    """Read a config file, or a shipped preset when given a bare preset name."""
    path = Path(path_or_preset)
    if not path.exists() and (PRESET_DIR / f"{path_or_preset}.toml").exists():
        path = PRESET_DIR / f"{path_or_preset}.toml"
    if not path.exists():
        raise ConfigError(f"no config file or preset named {path_or_preset!r}")
    return loads(path.read_text(), base_dir=str(path.parent))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
