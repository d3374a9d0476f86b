"""Per-patch BMI regressor.

Layer order: conv1 -> relu -> pool -> conv2 -> relu -> pool -> dropout ->
channel attention -> flatten -> fc1 -> relu -> fc2. With the default
config the parameter counts are 896 / 18,496 / 4,096 / 524,416 / 128.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

PARAM_NAMES = (
    "conv1_w", "conv1_b",
    "conv2_w", "conv2_b",
    "attn_w1", "attn_w2",
    "fc1_w", "fc1_b",
    "fc2_w",
)

# layer label -> parameter names, in network order
LAYERS = {
    "conv1": ("conv1_w", "conv1_b"),
    "conv2": ("conv2_w", "conv2_b"),
    "attention": ("attn_w1", "attn_w2"),
    "fc1": ("fc1_w", "fc1_b"),
    "fc2": ("fc2_w",),
}


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    input_side: int = 32
    conv1_out: int = 32
    conv2_out: int = 64
    attn_mid: int = 32
    fc1_out: int = 128
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.input_side % 4:
            raise ValueError(f"input_side must be divisible by 4, got {self.input_side}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def flat_features(self) -> int:
        side = self.input_side // 4
        return self.conv2_out * side * side

    def param_shapes(self) -> dict:
        c, c1, c2, m, f = (self.input_channels, self.conv1_out, self.conv2_out,
                           self.attn_mid, self.fc1_out)
        return {
            "conv1_w": (c1, c, 3, 3),
            "conv1_b": (c1,),
            "conv2_w": (c2, c1, 3, 3),
            "conv2_b": (c2,),
            "attn_w1": (m, c2, 1, 1),
            "attn_w2": (c2, m, 1, 1),
            "fc1_w": (f, self.flat_features),
            "fc1_b": (f,),
            "fc2_w": (1, f),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PatchModelParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    attn_w1: Tensor
    attn_w2: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def parameters(self) -> list:
        return [getattr(self, name) for name in PARAM_NAMES]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "PatchModelParams":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def copy(self) -> "PatchModelParams":
        return PatchModelParams(**{
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for n, t in self.tensors().items()
        })

    def astype(self, dtype) -> "PatchModelParams":
        return PatchModelParams(**{
            n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for n, t in self.tensors().items()
        })

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = False) -> "PatchModelParams":
        missing = [n for n in PARAM_NAMES if n not in arrays]
        if missing:
            raise ValueError(f"missing parameter tensors: {', '.join(missing)}")
        return cls(**{n: Tensor(arrays[n], requires_grad=requires_grad) for n in PARAM_NAMES})


def init_weights(config: ModelConfig = ModelConfig(),
                 rng: Optional[np.random.Generator] = None) -> PatchModelParams:
    """Uniform(-b, b) weights with ``b = sqrt(6 / fan_in)``; zero biases."""
    if rng is None:
        rng = np.random.default_rng()
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return PatchModelParams.from_arrays(arrays, requires_grad=True)


def channel_attention(x: Tensor, attn_w1: Tensor, attn_w2: Tensor) -> Tensor:
    """Squeeze-excitation gate built from two bias-free 1x1 convolutions.

    Each channel of ``x`` is scaled by ``sigmoid(w2 * relu(w1 * avgpool(x)))``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"channel_attention expects (C,H,W) or (N,C,H,W), got {x.shape}")
    c = x.shape[-3]
    if attn_w1.shape[1] != c or attn_w2.shape[0] != c or attn_w2.shape[1] != attn_w1.shape[0]:
        raise ValueError(f"attention weights {attn_w1.shape}/{attn_w2.shape} "
                         f"do not match {c} input channels")
    pooled = T.global_avg_pool(x)
    n = 1 if single else x.shape[0]
    s = T.reshape(pooled, (n, c, 1, 1))
    h = T.relu(T.conv2d(s, attn_w1))
    gate = T.sigmoid(T.conv2d(h, attn_w2))
    if single:
        gate = T.reshape(gate, (c, 1, 1))
    return T.mul(x, gate)


def forward(params: PatchModelParams, patch: Tensor, training: bool = False,
            rng: Optional[np.random.Generator] = None,
            config: ModelConfig = ModelConfig(), trace: Optional[list] = None) -> Tensor:
    """Predict BMI for one patch (3,S,S) -> scalar, or a batch (N,3,S,S) -> (N,).

    If ``trace`` is a list, the output shape of every layer is appended to it.
    """
    expected = (config.input_channels, config.input_side, config.input_side)
    single = patch.ndim == 3
    if patch.shape[-3:] != expected or patch.ndim not in (3, 4):
        raise ValueError(f"patch shape {patch.shape} does not match {expected}")

    def mark(t: Tensor, label: str) -> Tensor:
        if trace is not None:
            trace.append((label, t.shape[1:] if not single else t.shape))
        return t

    mark(patch, "input")
    x = mark(T.relu(T.conv2d(patch, params.conv1_w, params.conv1_b, padding=1)), "conv1")
    x = mark(T.maxpool2d(x), "pool1")
    x = mark(T.relu(T.conv2d(x, params.conv2_w, params.conv2_b, padding=1)), "conv2")
    x = mark(T.maxpool2d(x), "pool2")
    x = mark(T.dropout(x, config.dropout_p, training, rng), "dropout")
    x = mark(channel_attention(x, params.attn_w1, params.attn_w2), "attention")
    flat_shape = (config.flat_features,) if single else (patch.shape[0], config.flat_features)
    x = mark(T.reshape(x, flat_shape), "flatten")
    x = mark(T.relu(T.linear(x, params.fc1_w, params.fc1_b)), "fc1")
    x = mark(T.linear(x, params.fc2_w), "fc2")
    return T.reshape(x, () if single else (patch.shape[0],))


def parameter_count(params: PatchModelParams) -> int:
    return int(sum(t.size for t in params.parameters()))


def layer_parameter_counts(params: PatchModelParams) -> dict:
    return {layer: int(sum(getattr(params, n).size for n in names))
            for layer, names in LAYERS.items()}
