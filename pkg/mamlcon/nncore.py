#!/usr/bin/env python3
"""
Dense-tensor numerics for the MAMLCon toolkit

Tensors are float64 numpy arrays. Parameter and gradient sets are ordered
name -> array dicts with value semantics: no function in this module
writes into an array it was handed.

The backward pass is not a general autodiff graph. A forward pass through
the supported layer sequence (conv2d -> relu repeated, flatten, dense
head, class mask) records a Tape, and model_backward replays the tape in
reverse using the per-layer rules defined here.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from .error_handling import NumericalError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
ParameterSet = Dict[str, np.ndarray]
GradientSet = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_tensor(value: Any, name: str = "tensor") -> Tensor:
    """Return value as a float64 array with every dimension >= 1."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0 or any(dim < 1 for dim in array.shape):
        raise ShapeError(f"{name} must have at least one dimension and no empty dimensions, got shape {array.shape}",
                         {"name": name, "shape": list(array.shape)})
    return array


# ---------------------------------------------------------------------------
# Parameter-set helpers
# ---------------------------------------------------------------------------

def copy_params(params: ParameterSet) -> ParameterSet:
    return {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}


def zeros_like(params: ParameterSet) -> GradientSet:
    return {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()}


def add_grads(a: GradientSet, b: GradientSet) -> GradientSet:
    _check_same_layout(a, b, "gradient sum")
    return {name: a[name] + b[name] for name in a}


def scale_grads(grads: GradientSet, factor: float) -> GradientSet:
    return {name: value * factor for name, value in grads.items()}


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    """Bitwise equality of two parameter sets (names, order, shapes and values)."""
    if list(a) != list(b):
        return False
    return all(a[name].shape == b[name].shape and np.array_equal(a[name], b[name]) for name in a)


def count_params(params: ParameterSet) -> int:
    return int(sum(value.size for value in params.values()))


def relative_error(analytic: GradientSet, numeric: GradientSet) -> float:
    """
    Max relative error between two gradient sets.

    Per tensor the largest absolute difference is divided by
    max(|analytic|, |numeric|, 1e-8) taken over that tensor; the result
    is the maximum over tensors.
    """
    _check_same_layout(analytic, numeric, "relative error")
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n))) / scale)
    return worst


def _check_same_layout(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray], context: str) -> None:
    if list(a) != list(b):
        raise ShapeError(f"Parameter names differ in {context}",
                         {"left": list(a), "right": list(b)})
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeError(f"Shape mismatch for '{name}' in {context}: {a[name].shape} vs {b[name].shape}",
                             {"name": name})


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _conv_windows(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    # [B, C, H', W', kH, kW]
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    Valid (unpadded) 2D convolution.

    Args:
        x: Input [C_in, H, W] or batched [B, C_in, H, W]
        kernels: Kernels [C_out, C_in, kH, kW]
        bias: Bias [C_out]
        stride: Positive stride applied to both spatial axes

    Returns:
        Output [C_out, H', W'] (or [B, C_out, H', W']) with
        H' = (H - kH) // stride + 1 and likewise for W'
    """
    single = x.ndim == 3
    batch = x[None] if single else x
    if batch.ndim != 4:
        raise ShapeError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be [C_out,C_in,kH,kW], got {kernels.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d stride must be a positive integer, got {stride!r}")
    _, c_in, h, w = batch.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d input has {c_in} channels but kernels expect {k_in}",
                         {"input_shape": list(x.shape), "kernel_shape": list(kernels.shape)})
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}",
                         {"input_shape": list(x.shape), "kernel_shape": list(kernels.shape)})

    windows = _conv_windows(batch, kh, kw, stride)
    out = np.einsum("bchwij,ocij->bohw", windows, kernels, optimize=True) + bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(dout: Tensor, x: Tensor, kernels: Tensor, stride: int) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients (dx, dkernels, dbias) of a batched valid convolution."""
    _, _, kh, kw = kernels.shape
    _, _, out_h, out_w = dout.shape
    windows = _conv_windows(x, kh, kw, stride)
    dkernels = np.einsum("bohw,bchwij->ocij", dout, windows, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            contribution = np.einsum("bohw,oc->bchw", dout, kernels[:, :, i, j], optimize=True)
            dx[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += contribution
    return dx, dkernels, dbias


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    return dout * (x > 0.0)


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: x [B, F] @ weight.T [F, O] + bias [O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias


def dense_backward(dout: Tensor, x: Tensor, weight: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tuple[float, Tensor]:
    """
    Mean cross-entropy over the batch, restricted to masked-in classes.

    Masked-out columns are excluded from the softmax normaliser (treated as
    -inf) and receive exactly zero gradient.

    Args:
        logits: [B, C]
        labels: Integer class (head) indices [B]
        mask: Boolean [C]; True marks classes that may be predicted

    Returns:
        (loss, dlogits) where dlogits is the analytic gradient of loss
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    batch, n_classes = logits.shape
    if mask.shape != (n_classes,):
        raise ShapeError(f"mask must have shape ({n_classes},), got {mask.shape}")
    if labels.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {labels.shape}")
    if not mask.any():
        raise ValidationError("mask has no masked-in class")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels out of range [0, {n_classes})", {"labels": labels.tolist()})
    if not mask[labels].all():
        bad = sorted(set(labels[~mask[labels]].tolist()))
        raise ValidationError(f"labels point to masked-out classes: {bad}", {"masked_out_labels": bad})
    if not np.isfinite(logits[:, mask]).all():
        raise NumericalError("non-finite logits in masked-in columns")

    masked = np.where(mask[None, :], logits, -np.inf)
    log_probs = masked - logsumexp(masked, axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = float(-np.mean(log_probs[rows, labels]))

    probs = np.exp(log_probs)
    probs[rows, labels] -= 1.0
    dlogits = probs / batch
    return loss, dlogits


# ---------------------------------------------------------------------------
# Tape and model backward
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    """One recorded layer application."""
    op: str
    names: Tuple[str, ...] = ()
    cache: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Tape:
    """Forward record of a fixed layer sequence, consumed by model_backward."""
    param_shapes: Dict[str, Tuple[int, ...]]
    entries: List[TapeEntry] = field(default_factory=list)
    output_shape: Tuple[int, ...] = ()

    def record(self, op: str, names: Sequence[str] = (), **cache: Any) -> None:
        self.entries.append(TapeEntry(op, tuple(names), cache))


def model_backward(tape: Tape, dlogits: Tensor) -> GradientSet:
    """
    Reverse pass over a recorded forward computation.

    Returns a gradient for every parameter known to the tape; parameters
    the forward pass never touched get exact zeros.
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if tape.output_shape and dlogits.shape != tuple(tape.output_shape):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match tape output {tape.output_shape}")

    grads: GradientSet = {}
    upstream = dlogits
    for entry in reversed(tape.entries):
        unknown = [name for name in entry.names if name not in tape.param_shapes]
        if unknown:
            raise ValidationError(f"tape references unknown parameters {unknown}", {"unknown": unknown})

        if entry.op == "mask":
            upstream = np.where(entry.cache["mask"][None, :], upstream, 0.0)
        elif entry.op == "dense":
            weight_name, bias_name = entry.names
            upstream, dweight, dbias = dense_backward(upstream, entry.cache["x"], entry.cache["weight"])
            _accumulate(grads, weight_name, dweight)
            _accumulate(grads, bias_name, dbias)
        elif entry.op == "flatten":
            upstream = upstream.reshape(entry.cache["shape"])
        elif entry.op == "relu":
            upstream = relu_backward(upstream, entry.cache["x"])
        elif entry.op == "conv2d":
            kernel_name, bias_name = entry.names
            upstream, dkernel, dbias = conv2d_backward(upstream, entry.cache["x"], entry.cache["kernels"],
                                                       entry.cache["stride"])
            _accumulate(grads, kernel_name, dkernel)
            _accumulate(grads, bias_name, dbias)
        else:
            raise ValidationError(f"unsupported tape operation '{entry.op}'")

    for name, shape in tape.param_shapes.items():
        if name in grads and grads[name].shape != tuple(shape):
            raise ShapeError(f"gradient for '{name}' has shape {grads[name].shape}, expected {tuple(shape)}")
    return {name: grads.get(name, np.zeros(shape, dtype=np.float64)) for name, shape in tape.param_shapes.items()}


def _accumulate(grads: GradientSet, name: str, value: Tensor) -> None:
    grads[name] = grads[name] + value if name in grads else value


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """Per-parameter moments and the count of steps taken so far."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, params: ParameterSet, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> "AdamState":
        return cls(m=zeros_like(params), v=zeros_like(params), t=0, beta1=beta1, beta2=beta2, eps=eps)


def _check_step_inputs(params: ParameterSet, grads: GradientSet, state: AdamState, lr: float) -> None:
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    _check_same_layout(params, grads, "optimizer step")
    _check_same_layout(params, state.m, "optimizer state")
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient entries in parameter '{name}'", {"parameter": name})


def adam_step(params: ParameterSet, grads: GradientSet, state: AdamState, lr: float,
              trainable: Optional[Iterable[str]] = None) -> Tuple[ParameterSet, AdamState]:
    """
    One bias-corrected Adam update.

    Parameters outside `trainable` (when given) are passed through bitwise
    together with their moments. Inputs are never mutated.
    """
    _check_step_inputs(params, grads, state, lr)
    selected = set(params) if trainable is None else set(trainable)
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_params: ParameterSet = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        if name not in selected:
            new_params[name], new_m[name], new_v[name] = value, state.m[name], state.v[name]
            continue
        grad = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v

    return new_params, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


def sgd_step(params: ParameterSet, grads: GradientSet, state: AdamState, lr: float,
             trainable: Optional[Iterable[str]] = None) -> Tuple[ParameterSet, AdamState]:
    """Plain gradient descent p - lr * g; counts the step, leaves moments untouched."""
    _check_step_inputs(params, grads, state, lr)
    selected = set(params) if trainable is None else set(trainable)
    new_params = {name: (value - lr * grads[name] if name in selected else value)
                  for name, value in params.items()}
    return new_params, AdamState(state.m, state.v, state.t + 1, state.beta1, state.beta2, state.eps)


OPTIMIZERS: Dict[str, Callable[..., Tuple[ParameterSet, AdamState]]] = {
    "adam": adam_step,
    "sgd": sgd_step,
}


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[ParameterSet], float], params: ParameterSet, h: float = 1e-5) -> GradientSet:
    """Central-difference gradient estimate (f(p+h) - f(p-h)) / 2h for every entry."""
    if not h > 0:
        raise ValidationError(f"finite-difference step must be positive, got {h}")
    grads: GradientSet = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=np.float64)
        for index in np.ndindex(value.shape):
            plus = dict(params)
            minus = dict(params)
            bumped = value.astype(np.float64, copy=True)
            bumped[index] += h
            plus[name] = bumped
            lowered = value.astype(np.float64, copy=True)
            lowered[index] -= h
            minus[name] = lowered
            grad[index] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
        grads[name] = grad
    return grads
