#!/usr/bin/env python3
"""
Word-classifier architectures

A feature extractor (three strided valid convolutions with ReLU, or a
small ReLU MLP for vector features) feeds a single dense head with a fixed
number of logits. Classes are exposed incrementally through a boolean
mask over the head instead of growing it, so parameter shapes never
change between episodes.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .error_handling import ConfigurationError, ShapeError, ValidationError
from .nncore import (
    ParameterSet,
    Tape,
    Tensor,
    conv2d_forward,
    count_params,
    dense_forward,
    relu_forward,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("conv", "mlp")
HEAD_NAMES = ("head.weight", "head.bias")

RngLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; two configs that compare equal build identical parameter layouts."""
    input_shape: Tuple[int, int, int] = (1, 101, 39)
    head_classes: int = 50
    architecture: str = "conv"
    conv_channels: Tuple[int, int, int] = (16, 32, 64)
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 2
    hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        # JSON hands us lists
        for name in ("input_shape", "conv_channels", "kernel", "hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}, got '{self.architecture}'")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be three positive ints, got {self.input_shape}")
        if self.head_classes < 1:
            raise ConfigurationError(f"head_classes must be positive, got {self.head_classes}")
        if self.architecture == "conv":
            if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
                raise ConfigurationError(f"conv_channels must be three positive ints, got {self.conv_channels}")
            if len(self.kernel) != 2 or min(self.kernel) < 1:
                raise ConfigurationError(f"kernel must be two positive ints, got {self.kernel}")
            if self.stride < 1:
                raise ConfigurationError(f"stride must be positive, got {self.stride}")
        elif any(width < 1 for width in self.hidden):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden}")
        # raises on inputs too small for the convolution stack
        param_shapes(self)

    @property
    def pn_param_names(self) -> Tuple[str, ...]:
        return HEAD_NAMES

    @property
    def fe_param_names(self) -> Tuple[str, ...]:
        return tuple(name for name in param_shapes(self) if name not in HEAD_NAMES)

    def to_dict(self) -> Dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown model config fields: {unknown}")
        return cls(**data)


def conv_output_dims(config: ModelConfig) -> Tuple[int, int]:
    """Spatial size after the three valid convolutions."""
    _, height, width = config.input_shape
    kh, kw = config.kernel
    for layer in range(len(config.conv_channels)):
        if height < kh or width < kw:
            raise ConfigurationError(
                f"input {config.input_shape[1:]} too small for conv layer {layer + 1} "
                f"(spatial size {height}x{width} < kernel {kh}x{kw})",
                {"input_shape": list(config.input_shape), "layer": layer + 1},
            )
        height = (height - kh) // config.stride + 1
        width = (width - kw) // config.stride + 1
    return height, width


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Closed-form parameter names and shapes, in forward order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    channels, height, width = config.input_shape
    if config.architecture == "conv":
        out_h, out_w = conv_output_dims(config)
        in_channels = channels
        for index, out_channels in enumerate(config.conv_channels, start=1):
            shapes[f"conv{index}.weight"] = (out_channels, in_channels) + tuple(config.kernel)
            shapes[f"conv{index}.bias"] = (out_channels,)
            in_channels = out_channels
        features = in_channels * out_h * out_w
    else:
        features = channels * height * width
        for index, width_out in enumerate(config.hidden, start=1):
            shapes[f"fc{index}.weight"] = (width_out, features)
            shapes[f"fc{index}.bias"] = (width_out,)
            features = width_out
    shapes["head.weight"] = (config.head_classes, features)
    shapes["head.bias"] = (config.head_classes,)
    return shapes


def _as_rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def init_params(config: ModelConfig, rng: RngLike) -> ParameterSet:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    generator = _as_rng(rng)
    params: ParameterSet = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float64)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name] = generator.uniform(-bound, bound, size=shape).astype(np.float64)
    return params


def make_mask(config: ModelConfig, head_indices: Iterable[int] = ()) -> np.ndarray:
    return widen_mask(np.zeros(config.head_classes, dtype=bool), head_indices)


def widen_mask(mask: np.ndarray, head_indices: Iterable[int]) -> np.ndarray:
    """Return a copy of mask with the given head indices switched on."""
    widened = np.array(mask, dtype=bool, copy=True)
    indices = np.asarray(list(head_indices), dtype=np.int64)
    if indices.size:
        if indices.min() < 0 or indices.max() >= widened.size:
            raise ValidationError(f"head indices out of range [0, {widened.size})", {"indices": indices.tolist()})
        widened[indices] = True
    return widened


def _check_batch(params: ParameterSet, batch: Tensor, mask: np.ndarray, config: ModelConfig) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(config.input_shape):
        raise ShapeError(f"batch must be [B, {', '.join(map(str, config.input_shape))}], got {batch.shape}",
                         {"expected": list(config.input_shape), "got": list(batch.shape)})
    if np.asarray(mask).shape != (config.head_classes,):
        raise ShapeError(f"mask must have shape ({config.head_classes},), got {np.asarray(mask).shape}")
    expected = param_shapes(config)
    if list(params) != list(expected):
        raise ValidationError("parameter names do not match the model config",
                              {"expected": list(expected), "got": list(params)})
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")


def predict(params: ParameterSet, batch: Tensor, mask: np.ndarray, config: ModelConfig) -> Tuple[Tensor, Tape]:
    """
    Forward pass.

    Args:
        params: Parameters built for config
        batch: Inputs [B, channels, frames, coeffs]
        mask: Boolean [head_classes]; masked-out logits come back as -inf
        config: Model architecture

    Returns:
        (logits [B, head_classes], tape for model_backward)
    """
    batch = np.asarray(batch, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_batch(params, batch, mask, config)
    tape = Tape(param_shapes=param_shapes(config))

    hidden = batch
    if config.architecture == "conv":
        for index in range(1, len(config.conv_channels) + 1):
            names = (f"conv{index}.weight", f"conv{index}.bias")
            kernels, bias = params[names[0]], params[names[1]]
            tape.record("conv2d", names, x=hidden, kernels=kernels, stride=config.stride)
            pre = conv2d_forward(hidden, kernels, bias, config.stride)
            tape.record("relu", x=pre)
            hidden = relu_forward(pre)
        tape.record("flatten", shape=hidden.shape)
        hidden = hidden.reshape(hidden.shape[0], -1)
    else:
        tape.record("flatten", shape=hidden.shape)
        hidden = hidden.reshape(hidden.shape[0], -1)
        for index in range(1, len(config.hidden) + 1):
            names = (f"fc{index}.weight", f"fc{index}.bias")
            tape.record("dense", names, x=hidden, weight=params[names[0]])
            pre = dense_forward(hidden, params[names[0]], params[names[1]])
            tape.record("relu", x=pre)
            hidden = relu_forward(pre)

    tape.record("dense", HEAD_NAMES, x=hidden, weight=params["head.weight"])
    logits = dense_forward(hidden, params["head.weight"], params["head.bias"])
    tape.record("mask", mask=mask)
    logits = np.where(mask[None, :], logits, -np.inf)
    tape.output_shape = logits.shape
    return logits, tape


def classify(params: ParameterSet, batch: Tensor, mask: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Predicted head index per input; never a masked-out class."""
    if not np.asarray(mask, dtype=bool).any():
        raise ValidationError("mask has no masked-in class")
    logits, _ = predict(params, batch, mask, config)
    return np.argmax(logits, axis=1)


def split_params(params: ParameterSet, config: ModelConfig) -> Tuple[ParameterSet, ParameterSet]:
    """Partition into (feature extractor, prediction network) parameter sets."""
    fe_names = set(config.fe_param_names)
    pn_names = set(config.pn_param_names)
    unknown = [name for name in params if name not in fe_names and name not in pn_names]
    if unknown:
        raise ValidationError(f"unknown parameter names {unknown}", {"unknown": unknown})
    fe = {name: value for name, value in params.items() if name in fe_names}
    pn = {name: value for name, value in params.items() if name in pn_names}
    return fe, pn


def merge_params(fe: ParameterSet, pn: ParameterSet, config: ModelConfig) -> ParameterSet:
    """Inverse of split_params; result follows the config's parameter order."""
    combined = {**fe, **pn}
    expected = list(param_shapes(config))
    missing = [name for name in expected if name not in combined]
    extra = [name for name in combined if name not in expected]
    if missing or extra:
        raise ValidationError("cannot merge parameter sets", {"missing": missing, "unexpected": extra})
    return {name: combined[name] for name in expected}


def describe(config: ModelConfig, params: Optional[ParameterSet] = None) -> str:
    shapes = param_shapes(config)
    total = sum(int(np.prod(shape)) for shape in shapes.values())
    head = sum(int(np.prod(shapes[name])) for name in HEAD_NAMES)
    summary = f"{config.architecture} model, input {config.input_shape}, {config.head_classes} head classes, " \
              f"{total} parameters ({total - head} feature extractor, {head} head)"
    if params is not None and (list(params) != list(shapes) or count_params(params) != total):
        summary += " [parameters differ from config]"
    return summary
