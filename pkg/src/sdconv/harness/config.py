"""Flat ``key = value`` configuration files and the model/train/data configs.

Layer lists use indexed keys; when any ``layer.*`` key is present the
listed layers replace the preset's encoder entirely::

    # encoder
    layer.0.rate = 2
    layer.0.channels = 16
    layer.0.smoothing = SS
    train.initial_lr = 0.01
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

from sdconv.smoothing import METHODS

OUTPUT_LAYERS = ("largefov", "ss")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def parse_config(text: str) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    return flat


def load_config(path: Union[str, Path]) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(flat: Dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


def _convert(kind, key: str, value: str):
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def _fill(cls, flat: Dict[str, str], prefix: str, base=None):
    obj = base if base is not None else cls()
    updates = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        kind = type(getattr(obj, f.name))
        if key in flat:
            if kind not in (int, float, str, bool):
                raise ConfigError(f"{key} cannot be set directly")
            updates[f.name] = _convert(kind, key, flat[key])
    return replace(obj, **updates)


@dataclass(frozen=True)
class LayerConfig:
    rate: int = 2
    channels: int = 16
    kernel: int = 3
    smoothing: str = "none"
    bias: bool = True


@dataclass(frozen=True)
class ModelConfig:
    layers: Tuple[LayerConfig, ...] = ()
    output: str = "ss"
    classes: int = 4
    in_channels: int = 1
    largefov_rate: int = 12
    largefov_hidden: int = 16
    d_k: int = 16
    d_o: int = 16
    heads: int = 2
    window: int = 5

    def validate(self) -> "ModelConfig":
        if not self.layers:
            raise ConfigError("model needs at least one encoder layer")
        for i, layer in enumerate(self.layers):
            if layer.rate < 1 or layer.channels < 1 or layer.kernel < 1 or layer.kernel % 2 == 0:
                raise ConfigError(f"layer.{i}: rate/channels must be >= 1 and kernel odd")
            if layer.smoothing not in METHODS:
                raise ConfigError(f"layer.{i}.smoothing must be one of {METHODS}")
            if layer.rate == 1 and layer.smoothing != "none":
                raise ConfigError(f"layer.{i}: rate 1 admits no smoothing")
        if self.output not in OUTPUT_LAYERS:
            raise ConfigError(f"output must be one of {OUTPUT_LAYERS}, got {self.output!r}")
        if self.classes < 2 or self.in_channels < 1:
            raise ConfigError("classes must be >= 2 and in_channels >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 1")
        if min(self.d_k, self.d_o, self.heads, self.largefov_hidden, self.largefov_rate) < 1:
            raise ConfigError("attention and LargeFOV dimensions must be >= 1")
        return self

    def channel_chain(self) -> List[Tuple[int, int]]:
        chain, c = [], self.in_channels
        for layer in self.layers:
            chain.append((c, layer.channels))
            c = layer.channels
        return chain

    def with_smoothing(self, method: str) -> "ModelConfig":
        layers = tuple(replace(l, smoothing=method if l.rate >= 2 else "none") for l in self.layers)
        return replace(self, layers=layers)

    @classmethod
    def from_flat(cls, flat: Dict[str, str], base: "ModelConfig" = None) -> "ModelConfig":
        cfg = _fill(cls, flat, "model.", base)
        indices = sorted({int(k.split(".")[1]) for k in flat
                          if k.startswith("layer.") and k.split(".")[1].isdigit()})
        if indices:
            if indices != list(range(len(indices))):
                raise ConfigError(f"layer indices must be contiguous from 0, got {indices}")
            layers = tuple(_fill(LayerConfig, flat, f"layer.{i}.") for i in indices)
            cfg = replace(cfg, layers=layers)
        return cfg.validate()

    def to_flat(self) -> Dict[str, object]:
        flat: Dict[str, object] = {
            f"model.{f.name}": getattr(self, f.name) for f in fields(self) if f.name != "layers"
        }
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                flat[f"layer.{i}.{f.name}"] = getattr(layer, f.name)
        return flat


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 500
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 4
    crop: int = 32
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.initial_lr < 0:
            raise ConfigError("initial_lr must be >= 0")
        if self.power < 0:
            raise ConfigError("power must be >= 0")
        if self.max_iter < 1 or self.batch < 1 or self.crop < 1:
            raise ConfigError("max_iter, batch and crop must be >= 1")
        return self

    @classmethod
    def from_flat(cls, flat: Dict[str, str], base: "TrainConfig" = None) -> "TrainConfig":
        return _fill(cls, flat, "train.", base).validate()

    def to_flat(self) -> Dict[str, object]:
        return {f"train.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DataConfig:
    n: int = 200
    size: int = 64
    holdout: int = 40

    @classmethod
    def from_flat(cls, flat: Dict[str, str], base: "DataConfig" = None) -> "DataConfig":
        cfg = _fill(cls, flat, "data.", base)
        if cfg.holdout < 1 or cfg.n <= cfg.holdout:
            raise ConfigError("data.n must exceed data.holdout >= 1")
        return cfg

    def to_flat(self) -> Dict[str, object]:
        return {f"data.{f.name}": getattr(self, f.name) for f in fields(self)}


def _block(rate: int, count: int, channels: int, smoothing: str = "none") -> Tuple[LayerConfig, ...]:
    return tuple(LayerConfig(rate=rate, channels=channels, smoothing=smoothing) for _ in range(count))


def desk_model(smoothing: str = "SS") -> ModelConfig:
    """4 layers at r=2 then 2 at r=4, 16 channels, SS attention output layer."""
    layers = _block(2, 4, 16, smoothing) + _block(4, 2, 16, smoothing)
    return ModelConfig(layers=layers).validate()


def paper_encoder(smoothing: str = "none") -> ModelConfig:
    """Dilation structure of the last two ResNet-101 blocks (23 at r=2, 3 at r=4)."""
    layers = _block(2, 23, 2048, smoothing) + _block(4, 3, 2048, smoothing)
    return ModelConfig(layers=layers, output="largefov", classes=21, in_channels=1024).validate()


@dataclass(frozen=True)
class Preset:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


PRESETS = {
    "desk": lambda: Preset(desk_model()),
    "desk-baseline": lambda: Preset(desk_model("none")),
    "desk-gi": lambda: Preset(desk_model("GI")),
    "paper-encoder": lambda: Preset(paper_encoder()),
}


def resolve(preset: str = None, flat: Dict[str, str] = None) -> Preset:
    """Start from a named preset (default ``desk``) and apply config overrides."""
    name = preset or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]()
    flat = flat or {}
    known = {f"model.{f.name}" for f in fields(ModelConfig) if f.name != "layers"}
    known |= {f"train.{f.name}" for f in fields(TrainConfig)}
    known |= {f"data.{f.name}" for f in fields(DataConfig)}
    layer_keys = {f.name for f in fields(LayerConfig)}
    unknown = [
        k for k in flat
        if k not in known
        and not (k.count(".") == 2 and k.startswith("layer.")
                 and k.split(".")[1].isdigit() and k.split(".")[2] in layer_keys)
    ]
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return Preset(
        ModelConfig.from_flat(flat, base.model),
        TrainConfig.from_flat(flat, base.train),
        DataConfig.from_flat(flat, base.data),
    )
