"""Tiny fully-convolutional segmentation network and its parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .autodiff import Tensor, conv2d, relu, softmax_channel


@dataclass(frozen=True)
class LayerSpec:
    """Channel chain of the hidden stack; a final conv maps to ``num_classes``.

    ``channels=(3, 32, 32, 32)`` with 4 classes gives four 3x3 convolutions
    3->32->32->32->4.
    """

    channels: tuple = (3, 32, 32, 32)
    kernel: int = 3
    num_classes: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def layer_channels(self) -> list[tuple[int, int]]:
        chain = list(self.channels) + [self.num_classes]
        return list(zip(chain[:-1], chain[1:]))

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, (cin, cout) in enumerate(self.layer_channels):
            shapes[f"conv{i}.weight"] = (cout, cin, self.kernel, self.kernel)
            shapes[f"conv{i}.bias"] = (cout,)
        return shapes

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "kernel": self.kernel, "num_classes": self.num_classes}


@dataclass
class ParamSet:
    spec: LayerSpec
    arrays: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.spec.param_shapes())

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def check_compatible(self, other: "ParamSet") -> None:
        if self.spec != other.spec:
            raise ValueError(f"parameter specs differ: {self.spec} vs {other.spec}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def equal(self, other: "ParamSet") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.names()
        )


def init_model(seed: int, spec: LayerSpec = LayerSpec(), dtype=np.float64) -> ParamSet:
    """He-normal kernels, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arrays[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return ParamSet(spec, arrays)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return ParamSet(params.spec, {k: np.zeros_like(v) for k, v in params.arrays.items()})


ParamLike = Union[ParamSet, Mapping[str, Tensor]]


def forward_logits(params: ParamLike, image) -> Tensor:
    """Run the conv/ReLU stack and return raw per-pixel class scores.

    ``params`` may be a ParamSet (no tape is recorded) or a mapping of names to
    Tensors that require gradients.
    """
    if isinstance(params, ParamSet):
        spec, get = params.spec, params.arrays.__getitem__
    else:
        spec = params["__spec__"]
        get = params.__getitem__
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 4:
        raise ValueError(f"expected an N,C,H,W image batch, got shape {x.shape}")
    if x.shape[1] != spec.channels[0]:
        raise ValueError(f"image has {x.shape[1]} channels, model expects {spec.channels[0]}")
    pad = spec.kernel // 2
    n_layers = len(spec.layer_channels)
    for i in range(n_layers):
        x = conv2d(x, get(f"conv{i}.weight"), get(f"conv{i}.bias"), pad)
        if i < n_layers - 1:
            x = relu(x)
    return x


def predict(params: ParamLike, image) -> Tensor:
    return softmax_channel(forward_logits(params, image))


def trainable(params: ParamSet) -> dict:
    """Wrap every array in a gradient-tracking Tensor for one forward pass."""
    out = {k: Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
    out["__spec__"] = params.spec
    return out


def save_params(path, params: ParamSet) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __spec__=np.array(json.dumps(params.spec.to_dict())), **params.arrays)


def load_params(path) -> ParamSet:
    with np.load(Path(path), allow_pickle=False) as z:
        spec_d = json.loads(str(z["__spec__"]))
        spec = LayerSpec(tuple(spec_d["channels"]), spec_d["kernel"], spec_d["num_classes"])
        arrays = {k: z[k].copy() for k in spec.param_shapes()}
    return ParamSet(spec, arrays)
