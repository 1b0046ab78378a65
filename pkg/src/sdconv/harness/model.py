"""Segmentation model assembled from a :class:`ModelConfig`, plus its file format.

A saved model is a directory holding ``model.cfg`` (flat config),
``weights.bin`` (concatenated ``.t4`` tensors) and ``weights.manifest``
(one ``name offset dims...`` line per tensor).
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from sdconv.attention import AttentionParams
from sdconv.harness.config import ModelConfig, dump_config, load_config
from sdconv.layers import DilatedConv, ReLU, Sequential, SSAttention
from sdconv.tensor import ConvWeights, DilatedConvSpec, read_t4, write_t4


def _conv(kernel, rate, cin, cout, rng, bias=True, smoothing="none") -> DilatedConv:
    spec = DilatedConvSpec(kernel, rate, cin, cout, padding="same", bias=bias)
    bound = np.sqrt(6.0 / (cin * kernel * kernel))
    return DilatedConv(spec, ConvWeights.uniform(spec, rng, bound), smoothing)


def build_network(config: ModelConfig, rng: np.random.Generator) -> Sequential:
    config.validate()
    layers, names = [], []
    for i, ((cin, cout), lc) in enumerate(zip(config.channel_chain(), config.layers)):
        layers += [_conv(lc.kernel, lc.rate, cin, cout, rng, lc.bias, lc.smoothing), ReLU()]
        names += [f"enc{i}", f"enc{i}.relu"]
    c = config.layers[-1].channels
    if config.output == "largefov":
        layers += [
            _conv(3, config.largefov_rate, c, config.largefov_hidden, rng),
            ReLU(),
            _conv(1, 1, config.largefov_hidden, config.classes, rng),
        ]
        names += ["head.largefov", "head.relu", "head.proj"]
    else:
        att = AttentionParams.init(c, config.d_k, config.d_o, config.heads, config.window, rng)
        layers += [SSAttention(att), _conv(1, 1, att.out_channels, config.classes, rng)]
        names += ["head.attention", "head.proj"]
    return Sequential(layers, names)


class SegmentationModel:
    def __init__(self, config: ModelConfig, net: Sequential):
        self.config = config
        self.net = net

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "SegmentationModel":
        return cls(config, build_network(config, np.random.default_rng(seed)))

    def params(self) -> Dict[str, np.ndarray]:
        return self.net.params()

    def grads(self) -> Dict[str, np.ndarray]:
        return self.net.grads

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        return self.net.backward(grad_logits)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "model.cfg").write_text(dump_config(self.config.to_flat()), encoding="utf-8")
        lines = []
        offset = 0
        with open(directory / "weights.bin", "wb") as fh:
            for name, value in self.params().items():
                lines.append(f"{name} {offset} {' '.join(map(str, value.shape))}")
                offset += write_t4(fh, _as4d(value))
        (directory / "weights.manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SegmentationModel":
        directory = Path(directory)
        config = ModelConfig.from_flat(load_config(directory / "model.cfg"))
        model = cls.build(config)
        params = model.params()
        entries = _read_manifest(directory / "weights.manifest")
        if set(entries) != set(params):
            raise ValueError("weights.manifest does not match the model configuration")
        with open(directory / "weights.bin", "rb") as fh:
            for name, (offset, shape) in entries.items():
                fh.seek(offset)
                value = read_t4(fh).reshape(shape)
                if value.shape != params[name].shape:
                    raise ValueError(f"{name}: stored shape {value.shape} != {params[name].shape}")
                params[name][...] = value
        return model


def _as4d(value: np.ndarray) -> np.ndarray:
    if value.ndim > 4:
        raise ValueError("only tensors of rank <= 4 can be stored")
    return value.reshape((1,) * (4 - value.ndim) + value.shape)


def _read_manifest(path: Path) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, offset, *dims = line.split()
        entries[name] = (int(offset), tuple(int(d) for d in dims))
    return entries


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n, _, h, w = logits.shape
    count = n * h * w
    picked = np.take_along_axis(log_p, labels[:, None], axis=1)
    loss = -float(picked.sum()) / count
    grad = np.exp(log_p)
    np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1.0, axis=1)
    return loss, grad / count
