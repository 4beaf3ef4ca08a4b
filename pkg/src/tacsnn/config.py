"""Declarative run configuration: YAML in, validated dataclasses out.

Validation errors name the offending field with a dotted path such as
``model.layers[1].k`` so a typo in a config file is easy to find.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .model import ARCHITECTURES, READOUTS, ModelConfig
from .neuron import RESETS, SURROGATES, LIFParams, SurrogateSpec
from .temporal import GROUPED, KINDS, TemporalOpConfig
from .train import LOSSES, SCHEDULES, TrainConfig

EXPERIMENTS = ("train", "sparsity_lab", "error_probe", "call_accounting")
DATASETS = ("mnist", "synth_gesture")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in (resources.files("tacsnn") / "presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> dict:
    path = resources.files("tacsnn") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError("preset", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return _parse(path.read_text(), f"preset {name}")


def load_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    return _parse(text, str(path))


def _parse(text: str, source: str) -> dict:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{source} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("", f"{source} must hold a mapping at the top level")
    return raw


# --- field readers -------------------------------------------------------------

class _Reader:
    """Pops typed fields from a mapping and complains about leftovers."""

    def __init__(self, data: Any, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path, "expected a mapping")
        self.data, self.path = dict(data), path

    def _where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, default, kind, check=None, message=""):
        value = self.data.pop(key, default)
        where = self._where(key)
        if value is None and default is None:
            return None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is float and isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            raise ConfigError(where, f"expected {kind.__name__}, got {value!r}")
        if check is not None and not check(value):
            raise ConfigError(where, message or f"invalid value {value!r}")
        return value

    def choice(self, key, default, options):
        return self.get(key, default, str, lambda v: v in options, f"must be one of {', '.join(options)}")

    def sub(self, key) -> "_Reader":
        return _Reader(self.data.pop(key, None), self._where(key))

    def items(self, key) -> list:
        value = self.data.pop(key, None)
        if value is None:
            return []
        if not isinstance(value, list):
            raise ConfigError(self._where(key), "expected a list")
        return value

    def done(self) -> None:
        if self.data:
            extra = sorted(self.data)[0]
            raise ConfigError(self._where(extra), "unknown field")


def _int_list(value, path: str, positive: bool = False) -> list[int]:
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a non-empty list of integers")
    for i, v in enumerate(value):
        if not isinstance(v, int) or isinstance(v, bool) or (positive and v < 1) or v < 0:
            raise ConfigError(f"{path}[{i}]", f"expected a {'positive' if positive else 'non-negative'} integer")
    return list(value)


# --- resolved configuration --------------------------------------------------------

@dataclass
class DataConfig:
    dataset: str = "mnist"
    n_train: int = 2000
    n_test: int = 1000
    size: int = 14
    seed: int = 1234
    generator: dict | None = None


@dataclass
class RunConfig:
    name: str
    experiment: str
    raw: dict
    seeds: list[int]
    model: ModelConfig | None = None
    train: TrainConfig | None = None
    data: DataConfig | None = None
    k_values: list[int] | None = None
    options: dict | None = None

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.raw)

    @property
    def operator(self) -> str:
        """Label of the temporal op: the first non-baseline kind, or baseline."""
        if self.model is None:
            return self.experiment
        kinds = [layer.kind for layer in self.model.layers if layer.kind != "baseline"]
        return kinds[0] if kinds else "baseline"

    @property
    def group_size(self) -> int:
        if self.model is None:
            return 1
        return max((layer.group_size for layer in self.model.layers), default=1)


def fingerprint(raw: dict) -> str:
    """SHA-256 of the canonical JSON form; any field change changes it."""
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(raw: dict, k: int | None = None, epochs: int | None = None,
                    seeds: list[int] | None = None) -> dict:
    """Command-line overrides; ``k`` retargets every grouped (tac / tac_tp) layer."""
    raw = copy.deepcopy(raw)
    if seeds is not None:
        raw["seeds"] = list(seeds)
    if epochs is not None:
        raw.setdefault("train", {})["epochs"] = epochs
    if k is not None:
        layers = (raw.get("model") or {}).get("layers") or []
        grouped = [layer for layer in layers if isinstance(layer, dict) and layer.get("kind") in GROUPED]
        if not grouped:
            raise ConfigError("model.layers", "--k needs at least one tac or tac_tp layer")
        for layer in grouped:
            layer["k"] = k
    return raw


def _neuron(r: _Reader, base: LIFParams) -> LIFParams:
    beta = r.get("beta", base.beta, float, lambda v: 0 < v < 1, "must lie in (0, 1)")
    v_th = r.get("v_th", base.v_th, float, lambda v: v > 0, "must be positive")
    reset = r.choice("reset", base.reset, RESETS)
    s = r.sub("surrogate")
    kind = s.choice("kind", base.surrogate.kind, SURROGATES)
    alpha = s.get("alpha", base.surrogate.alpha, float, lambda v: v > 0, "must be positive")
    s.done()
    r.done()
    return LIFParams(beta, v_th, SurrogateSpec(kind, alpha), reset)


def _model(r: _Reader) -> ModelConfig:
    arch = r.choice("architecture", "mnist_small", ARCHITECTURES)
    base = ModelConfig.preset(arch)
    overrides: dict[str, Any] = {}
    overrides["timesteps"] = r.get("timesteps", base.timesteps, int, lambda v: v >= 1, "must be >= 1")
    widths = r.data.pop("widths", None)
    if widths is not None:
        overrides["widths"] = tuple(_int_list(widths, r._where("widths"), positive=True))
    hidden = r.data.pop("hidden", None)
    if hidden is not None:
        overrides["hidden"] = tuple(_int_list(hidden, r._where("hidden"), positive=True)) if hidden else ()
    overrides["in_channels"] = r.get("in_channels", base.in_channels, int, lambda v: v >= 1, "must be >= 1")
    overrides["input_size"] = r.get("input_size", base.input_size, int, lambda v: v >= 1, "must be >= 1")
    overrides["padding"] = r.get("padding", base.padding, int, lambda v: v >= 0, "must be >= 0")
    overrides["voters"] = r.get("voters", base.voters, int, lambda v: v >= 1, "must be >= 1")
    overrides["readout"] = r.choice("readout", base.readout, READOUTS)
    overrides["neuron"] = _neuron(r.sub("neuron"), base.neuron)
    n_conv = len(overrides.get("widths", base.widths))
    layers = []
    for i, item in enumerate(r.items("layers")):
        lr = _Reader(item, f"{r._where('layers')}[{i}]")
        kind = lr.choice("kind", "baseline", KINDS)
        k = lr.get("k", 1, int, lambda v: v >= 1, "must be a positive integer")
        lr.done()
        try:
            layers.append(TemporalOpConfig(kind, k))
        except ValueError as exc:
            raise ConfigError(f"{r._where('layers')}[{i}].k", str(exc)) from None
    if layers and len(layers) != n_conv:
        raise ConfigError(r._where("layers"), f"{len(layers)} entries for {n_conv} conv layers")
    overrides["layers"] = layers or [TemporalOpConfig() for _ in range(n_conv)]
    r.done()
    try:
        return ModelConfig.preset(arch, **overrides)
    except ValueError as exc:
        raise ConfigError(r.path, str(exc)) from None


def _train(r: _Reader) -> TrainConfig:
    t = TrainConfig(
        epochs=r.get("epochs", 3, int, lambda v: v >= 1, "must be >= 1"),
        batch_size=r.get("batch_size", 32, int, lambda v: v >= 1, "must be >= 1"),
        learning_rate=r.get("learning_rate", 1e-3, float, lambda v: v >= 0, "must be >= 0"),
        schedule=r.choice("schedule", "cosine", SCHEDULES),
        t_max=r.get("t_max", None, int),
        loss=r.choice("loss", "ce_spike_count", LOSSES),
    )
    r.done()
    return t


def _data(r: _Reader) -> DataConfig:
    d = DataConfig(
        dataset=r.choice("dataset", "mnist", DATASETS),
        n_train=r.get("n_train", 2000, int, lambda v: v >= 1, "must be >= 1"),
        n_test=r.get("n_test", 1000, int, lambda v: v >= 1, "must be >= 1"),
        size=r.get("size", 14, int, lambda v: v >= 1, "must be >= 1"),
        seed=r.get("seed", 1234, int),
        generator=r.get("generator", {}, dict),
    )
    r.done()
    return d


def build(raw: dict, name: str = "custom") -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig`."""
    r = _Reader(raw, "")
    experiment = r.choice("experiment", "train", EXPERIMENTS)
    r.data.pop("name", None)
    r.data.pop("description", None)
    seeds = _int_list(r.data.pop("seeds", [0]), "seeds")
    cfg = RunConfig(name, experiment, copy.deepcopy(raw), seeds)
    if experiment == "train":
        cfg.model = _model(r.sub("model"))
        cfg.train = _train(r.sub("train"))
        cfg.data = _data(r.sub("data"))
        sweep = r.sub("sweep")
        k_values = sweep.data.pop("k_values", None)
        cfg.k_values = _int_list(k_values, "sweep.k_values", positive=True) if k_values is not None else None
        sweep.done()
        _check_compatible(cfg)
    else:
        cfg.options = r.data.pop("options", None) or {}
        if not isinstance(cfg.options, dict):
            raise ConfigError("options", "expected a mapping")
        if experiment == "call_accounting":
            cfg.model = _model(r.sub("model"))
    r.done()
    return cfg


def _check_compatible(cfg: RunConfig) -> None:
    m, d = cfg.model, cfg.data
    want = ("mnist", 1) if m.architecture == "mnist_small" else ("synth_gesture", 2)
    if d.dataset != want[0]:
        raise ConfigError("data.dataset", f"{m.architecture} expects {want[0]}, got {d.dataset}")
    if d.size != m.input_size:
        raise ConfigError("data.size", f"{d.size} does not match model.input_size {m.input_size}")
    if cfg.train.loss == "mse_rate_onehot" and m.readout != "voting":
        raise ConfigError("train.loss", "mse_rate_onehot needs the voting readout")
