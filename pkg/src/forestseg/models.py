"""The residual and dense 7-layer cascades.

Both variants are six 3x3 conv+ReLU layers followed by a 1x1 conv+sigmoid
output layer.  They differ only in how each hidden layer sees its input:

* ``residual``: layers 2..6 compute ``relu(conv(h)) + h`` (identity skip).
* ``dense``: layer ``l`` (2..6) convolves the concatenation of the raw
  3-band input and the outputs of layers ``1..l-1``.

The output layer reads only the 64 features of layer 6 in both cases.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import core
from .core import DimensionError, Tensor

Variant = Literal["residual", "dense"]
VARIANTS: tuple[str, ...] = ("residual", "dense")

IN_BANDS = 3
FEATURES = 64
N_HIDDEN = 6


@dataclass(frozen=True)
class LayerSpec:
    out_features: int
    in_channels: int
    kernel: tuple[int, int]
    activation: Literal["relu", "sigmoid"]


@dataclass
class Layer:
    spec: LayerSpec
    weight: Tensor
    bias: Tensor

    @property
    def in_channels(self) -> int:
        return self.spec.in_channels

    @property
    def out_features(self) -> int:
        return self.spec.out_features

    @property
    def kernel(self) -> tuple[int, int]:
        return self.spec.kernel

    @property
    def activation(self) -> str:
        return self.spec.activation


@dataclass
class ModelGraph:
    variant: str
    layers: list[Layer]
    # per-layer input channel widths seen during the most recent forward pass
    trace: list[int] = field(default_factory=list, repr=False)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def topology(self) -> list[tuple[int, ...]]:
        """Source indices feeding each layer (0 is the raw input, l is layer l's output)."""
        if self.variant == "residual":
            return [(0,)] + [(l,) for l in range(1, N_HIDDEN + 1)]
        return [tuple(range(l + 1)) for l in range(N_HIDDEN)] + [(N_HIDDEN,)]


def layer_specs(variant: str) -> list[LayerSpec]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "residual":
        in_ch = [IN_BANDS] + [FEATURES] * (N_HIDDEN - 1)
    else:
        in_ch = [IN_BANDS + FEATURES * l for l in range(N_HIDDEN)]
    specs = [LayerSpec(FEATURES, c, (3, 3), "relu") for c in in_ch]
    specs.append(LayerSpec(1, FEATURES, (1, 1), "sigmoid"))
    return specs


def build_model(variant: str, seed: int = 0) -> ModelGraph:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, spec in enumerate(layer_specs(variant)):
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(spec.out_features, spec.in_channels, kh, kw))
        layers.append(
            Layer(
                spec,
                Tensor(w.astype(np.float32), requires_grad=True, name=f"conv{i + 1}.weight"),
                Tensor(np.zeros(spec.out_features, np.float32), requires_grad=True, name=f"conv{i + 1}.bias"),
            )
        )
    return ModelGraph(variant, layers)


def count_parameters(model: ModelGraph) -> int:
    return sum(p.size for p in model.parameters())


def forward(model: ModelGraph, x, record_gradients: bool = False) -> Tensor:
    """Run the network on a ``[B,3,H,W]`` batch; returns ``[B,1,H,W]`` probabilities.

    With ``record_gradients`` the pass runs under a fresh :class:`GradTape`,
    which is attached to the returned tensor as ``out.tape``.  Without it, an
    enclosing tape (if any) still records the pass.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != IN_BANDS:
        raise DimensionError(f"expected input of shape [B,{IN_BANDS},H,W], got {x.shape}")
    if record_gradients:
        with core.GradTape() as tape:
            out = _run(model, x)
        out.tape = tape
        return out
    return _run(model, x)


def _run(model: ModelGraph, x: Tensor) -> Tensor:
    layers = model.layers
    model.trace = []

    def apply(layer: Layer, inp: Tensor) -> Tensor:
        model.trace.append(inp.shape[1])
        return core.conv2d(inp, layer.weight, layer.bias)

    if model.variant == "residual":
        h = core.relu(apply(layers[0], x))
        for layer in layers[1:N_HIDDEN]:
            h = core.add(core.relu(apply(layer, h)), h)
    else:
        feats = [x]
        for layer in layers[:N_HIDDEN]:
            inp = feats[0] if len(feats) == 1 else core.concat_channels(feats)
            feats.append(core.relu(apply(layer, inp)))
        h = feats[-1]
    return core.sigmoid(apply(layers[N_HIDDEN], h))
