"""Experiment configuration: parsing, validation and resolved echo.

Configs are TOML (or JSON with the same structure)::

    [dataset]
    source = "synthetic"          # or "idx"
    kind = "concentric_rings"
    n = 1000
    split = [0.8, 0.1, 0.1]
    batch_size = 32

    [model]
    sizes = [2, 16, 16, 2]

    [optimizer]
    lr = 0.05

    [dsd]
    phases = [
      {kind = "dense", epochs = 50},
      {kind = "sparse", sparsity = 0.3, epochs = 10},
      {kind = "redense", epochs = 10},
    ]

    [convergence]
    patience = 5

    [harness]
    seeds = [0, 1]
    output_dir = "runs/rings"

Every key is checked before training starts; unknown keys are errors.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Dataset, load_idx, make_synthetic, split
from .errors import ConfigError
from .flow import DENSE, REDENSE, SPARSE, ConvergenceSpec, Phase, PhasePlan, TrainData
from .network import FULLY_CONNECTED, InitSpec, LayerSpec, Network, init, mlp_layers
from .optim import OptimizerSpec
from .pruning import prunable_layers
from .stats import ALTERNATIVES

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = ("dataset", "model", "optimizer", "dsd", "convergence", "harness", "llr")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    kind: str = "concentric_rings"
    n: int = 1000
    noise_std: float = 0.1
    data_seed: int = 0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    batch_size: int = 64
    drop_last: bool = False
    normalize: bool = False


@dataclass
class ModelConfig:
    sizes: list[int] | None = None
    activation: str = "relu"
    dropout: float = 0.0
    layers: list[dict] | None = None
    init: str = "scaled_gaussian"
    init_scale: float = 1.0
    init_seed: int = 0


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    schedule: str = "per_phase_constant"
    step_factor: float | None = None
    step_every: int | None = None


@dataclass
class DsdConfig:
    phases: list[dict] = field(default_factory=list)
    excluded_layers: list[str] | None = None
    from_checkpoint: bool = False


@dataclass
class ConvergenceConfig:
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100


@dataclass
class HarnessConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    bins: int = 64
    checkpoint_every: int = 0
    alternative: str = "two-sided"
    early_stop_retrain: bool = True


@dataclass
class LlrConfig:
    # [[epochs, lr], ...]; empty means mirror the DSD retrain phases
    lr_sequence: list[list] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dsd: DsdConfig = field(default_factory=DsdConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    llr: LlrConfig = field(default_factory=LlrConfig)
    base_dir: str = "."

    # ------------------------------------------------------------ builders

    def layer_specs(self) -> list[LayerSpec]:
        m = self.model
        if m.layers is not None:
            return _explicit_layers(m.layers)
        return mlp_layers(list(m.sizes), m.activation, m.dropout)

    def build_network(self) -> Network:
        m = self.model
        return init(Network(self.layer_specs()), InitSpec(m.init, m.init_scale, m.init_seed))

    def optimizer_spec(self) -> OptimizerSpec:
        o = self.optimizer
        return OptimizerSpec(o.lr, o.momentum, o.nesterov, o.weight_decay, o.schedule,
                             o.step_factor, o.step_every)

    def convergence_spec(self) -> ConvergenceSpec:
        c = self.convergence
        return ConvergenceSpec(c.patience, c.min_delta, c.max_epochs)

    def excluded_layers(self) -> tuple[str, ...]:
        if self.dsd.excluded_layers is not None:
            return tuple(self.dsd.excluded_layers)
        # the first layer stays dense unless the config says otherwise
        first = prunable_layers(Network(self.layer_specs()))
        return tuple(first[:1])

    def phases(self) -> list[Phase]:
        return [Phase(p["kind"], p["epochs"], p.get("lr"), p.get("sparsity")) for p in self.dsd.phases]

    def plan(self, seed: int, from_checkpoint: bool | None = None) -> PhasePlan:
        fc = self.dsd.from_checkpoint if from_checkpoint is None else from_checkpoint
        phases = self.phases()
        if fc:
            # a checkpointed baseline replaces the leading dense phase
            while phases and phases[0].kind == DENSE:
                phases = phases[1:]
        return PhasePlan(phases, seed=seed, excluded_layers=self.excluded_layers(), from_checkpoint=fc)

    def llr_blocks(self) -> list[tuple[int, float]]:
        if self.llr.lr_sequence:
            return [(int(e), float(lr)) for e, lr in self.llr.lr_sequence]
        plan = PhasePlan(self.phases(), excluded_layers=self.excluded_layers()).resolved(self.optimizer.lr)
        return [(p.epochs, p.lr) for p in plan.phases if p.kind in (SPARSE, REDENSE)]

    def load_data(self) -> TrainData:
        d = self.dataset
        if d.source == "synthetic":
            ds = make_synthetic(d.kind, d.n, d.noise_std, d.data_seed)
            parts = split(ds, d.split, d.split_seed)
        else:
            ds = load_idx(self._path(d.images), self._path(d.labels))
            if d.limit is not None:
                ds = ds.head(d.limit)
            if d.test_images is not None:
                test = load_idx(self._path(d.test_images), self._path(d.test_labels), ds.class_count)
                parts = split(ds, d.split, d.split_seed) + (test,)
            else:
                parts = split(ds, d.split, d.split_seed)
        train, val, test = parts
        if d.normalize:
            train, val, test = _standardize(train, val, test)
        return TrainData(train, val, test, d.batch_size, d.drop_last)

    def _path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    # ---------------------------------------------------------------- echo

    def to_dict(self) -> dict:
        out = {s: asdict(getattr(self, s)) for s in SECTIONS}
        out["dsd"]["excluded_layers"] = list(self.excluded_layers())
        if self.dsd.phases:
            resolved = PhasePlan(self.phases(), from_checkpoint=True).resolved(self.optimizer.lr)
            out["dsd"]["phases"] = [
                {k: v for k, v in asdict(p).items() if v is not None} for p in resolved.phases
            ]
        out["llr"]["lr_sequence"] = [list(b) for b in self.llr_blocks()] if self.dsd.phases else []
        return out

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd[sd == 0] = 1.0
    return tuple(Dataset((d.features - mu) / sd, d.labels, d.class_count) for d in (train, *others))


def _explicit_layers(rows: list[dict]) -> list[LayerSpec]:
    layers = []
    for i, row in enumerate(rows):
        where = f"model.layers[{i}]"
        if not isinstance(row, dict):
            raise ConfigError(f"{where}: expected a table")
        _reject_unknown(row, {"kind", "name", "in_dim", "out_dim", "activation", "drop_prob", "prunable"}, where)
        kind = row.get("kind", FULLY_CONNECTED)
        name = row.get("name") or (f"fc{i + 1}" if kind == FULLY_CONNECTED else f"drop{i + 1}")
        try:
            layers.append(LayerSpec(
                kind, name,
                int(row.get("in_dim", 0)), int(row.get("out_dim", 0)),
                row.get("activation", "none"), float(row.get("drop_prob", 0.0)),
                bool(row.get("prunable", kind == FULLY_CONNECTED)),
            ))
        except ConfigError as e:
            raise ConfigError(f"{where}: {e}") from None
    return layers


# ------------------------------------------------------------- validation


def _reject_unknown(table: dict, allowed, where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _check_type(value, hint, name: str):
    """Validate ``value`` against a field annotation; ints widen to float."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _check_type(value, inner, name)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        (inner,) = typing.get_args(hint) or (typing.Any,)
        return [_check_type(v, inner, f"{name}[{i}]") for i, v in enumerate(value)]
    if hint is typing.Any or hint is dict:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def _section(cls, table: dict, name: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    fields = asdict(cls())
    _reject_unknown(table, fields, f"[{name}]")
    hints = typing.get_type_hints(cls)
    values = {k: _check_type(v, hints[k], f"{name}.{k}") for k, v in table.items()}
    return cls(**{**fields, **values})


_PHASE_KEYS = {"kind", "epochs", "lr", "sparsity"}


def _check_phases(phases, where="dsd.phases") -> None:
    if not isinstance(phases, list):
        raise ConfigError(f"{where}: expected a list of tables")
    for i, p in enumerate(phases):
        at = f"{where}[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(f"{at}: expected a table")
        _reject_unknown(p, _PHASE_KEYS, at)
        if "kind" not in p or "epochs" not in p:
            raise ConfigError(f"{at}: needs kind and epochs")
        if not isinstance(p["epochs"], int) or isinstance(p["epochs"], bool):
            raise ConfigError(f"{at}.epochs: expected an integer, got {p['epochs']!r}")
        for key in ("lr", "sparsity"):
            v = p.get(key)
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{at}.{key}: expected a number, got {v!r}")
            if v is not None:
                p[key] = float(v)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every cross-module invariant; raises ConfigError."""
    d, m, h = cfg.dataset, cfg.model, cfg.harness
    if d.source not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'idx', got {d.source!r}")
    if d.source == "idx":
        if not d.images or not d.labels:
            raise ConfigError("dataset.images and dataset.labels are required for source = 'idx'")
        if (d.test_images is None) != (d.test_labels is None):
            raise ConfigError("dataset.test_images and dataset.test_labels go together")
        for key in ("images", "labels", "test_images", "test_labels"):
            p = getattr(d, key)
            if p is not None and not cfg._path(p).exists():
                raise ConfigError(f"dataset.{key}: file not found: {cfg._path(p)}")
        if d.limit is not None and d.limit < 2:
            raise ConfigError(f"dataset.limit must be >= 2, got {d.limit}")
    if d.source == "synthetic" and d.kind not in ("two_gaussians", "concentric_rings"):
        raise ConfigError(f"dataset.kind: unknown synthetic kind {d.kind!r}")
    want = 2 if d.test_images is not None else 3
    if len(d.split) != want:
        raise ConfigError(f"dataset.split needs {want} fractions, got {len(d.split)}")
    if any(not isinstance(f, (int, float)) or f <= 0 for f in d.split) or abs(sum(d.split) - 1) > 1e-9:
        raise ConfigError(f"dataset.split must be positive fractions summing to 1, got {d.split}")
    if d.batch_size < 1:
        raise ConfigError(f"dataset.batch_size must be positive, got {d.batch_size}")
    if d.source == "synthetic":
        expected_train = d.n - sum(round(f * d.n) for f in d.split[1:])
        if d.batch_size > expected_train:
            raise ConfigError(f"dataset.batch_size {d.batch_size} exceeds the training split ({expected_train})")

    if (m.sizes is None) == (m.layers is None):
        raise ConfigError("model needs exactly one of 'sizes' or 'layers'")
    specs = cfg.layer_specs()
    Network(specs)  # dimension chaining
    InitSpec(m.init, m.init_scale, m.init_seed)
    cfg.optimizer_spec()
    cfg.convergence_spec()

    names = {l.name for l in specs}
    for name in cfg.dsd.excluded_layers or ():
        if name not in names:
            raise ConfigError(f"dsd.excluded_layers: no layer named {name!r}")
    if cfg.dsd.phases:
        PhasePlan(cfg.phases(), from_checkpoint=cfg.dsd.from_checkpoint).validate()
    if not h.seeds:
        raise ConfigError("harness.seeds must not be empty")
    if len(set(h.seeds)) != len(h.seeds):
        raise ConfigError(f"harness.seeds must be distinct, got {h.seeds}")
    if h.bins < 1:
        raise ConfigError(f"harness.bins must be >= 1, got {h.bins}")
    if h.checkpoint_every < 0:
        raise ConfigError(f"harness.checkpoint_every must be >= 0, got {h.checkpoint_every}")
    if h.alternative not in ALTERNATIVES:
        raise ConfigError(f"harness.alternative must be one of {ALTERNATIVES}")
    for i, block in enumerate(cfg.llr.lr_sequence):
        if (not isinstance(block, list) or len(block) != 2
                or not isinstance(block[0], int) or block[0] < 1
                or not isinstance(block[1], (int, float)) or block[1] < 0):
            raise ConfigError(f"llr.lr_sequence[{i}]: expected [epochs >= 1, lr >= 0], got {block!r}")
    return cfg


def from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    _reject_unknown(raw, SECTIONS, "config")
    kwargs: dict[str, typing.Any] = {}
    classes = {
        "dataset": DatasetConfig, "model": ModelConfig, "optimizer": OptimizerConfig,
        "dsd": DsdConfig, "convergence": ConvergenceConfig, "harness": HarnessConfig, "llr": LlrConfig,
    }
    for name, cls in classes.items():
        table = raw.get(name, {})
        if name == "dsd" and isinstance(table, dict):
            _check_phases(table.get("phases", []))
        kwargs[name] = _section(cls, table, name)
    return validate(ExperimentConfig(**kwargs, base_dir=str(base_dir)))


def load_config(path) -> ExperimentConfig:
    """Parse a ``.toml`` or ``.json`` config; relative data paths resolve
    against the config file's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw, base_dir=path.parent)
