"""Dense layers, losses and the Adam optimizer on top of the autodiff tape."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "linear": lambda x: x}


class Module:
    """Anything owning trainable tensors."""

    def parameters(self) -> List[ad.Tensor]:
        params = []
        for value in self.__dict__.values():
            if isinstance(value, ad.Tensor) and value.requires_grad:
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def load_arrays(self, arrays: Sequence[np.ndarray]):
        """Copy arrays into the parameters, in parameters() order."""
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != tuple(a.shape):
                raise ShapeError(f"parameter shape {p.shape} != stored {tuple(a.shape)}")
            p.data = np.array(a, dtype=p.data.dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        self.n_in = n_in
        self.n_out = n_out
        scale = 0.0 if zero else np.sqrt(2.0 / n_in)
        self.weight = ad.Tensor(rng.normal(0.0, 1.0, (n_in, n_out)) * scale, requires_grad=True)
        self.bias = ad.Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "relu",
        zero_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.activation = activation
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        weights = [t for layer in self.layers for t in (layer.weight, layer.bias)]
        return mlp_forward(weights, x, self.sizes, self.activation)


def mlp_forward(weights: Sequence, x, sizes: Sequence[int], activation: str = "relu") -> ad.Tensor:
    """Dense forward pass with weights given as [W0, b0, W1, b1, ...].

    Raises:
        ShapeError: If x or any weight disagrees with the layer sizes
    """
    x = ad.tensor(x)
    if x.ndim != 2 or x.shape[1] != sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match layer width {sizes[0]}")
    if len(weights) != 2 * (len(sizes) - 1):
        raise ShapeError(f"{len(sizes) - 1} layers need {2 * (len(sizes) - 1)} weight tensors, got {len(weights)}")
    act = ACTIVATIONS[activation]
    h = x
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        w, b = ad.tensor(weights[2 * i]), ad.tensor(weights[2 * i + 1])
        if w.shape != (sizes[i], sizes[i + 1]):
            raise ShapeError(f"layer {i} weight shape {w.shape} != {(sizes[i], sizes[i + 1])}")
        h = h @ w + b
        if i < n_layers - 1:
            h = act(h)
    return h


def _reduce(values: ad.Tensor, reduction: str) -> ad.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    if reduction == "none":
        return values
    raise ValueError(f"Unknown reduction: {reduction}")


def loss_eval(kind: str, pred, target, reduction: str = "mean") -> ad.Tensor:
    """Evaluate one of the supported losses.

    Args:
        kind: "softmax_ce", "smooth_l1", "neg_cosine" or "mse"
        pred: Predictions (logits for softmax_ce, angles for neg_cosine)
        target: Class indices or a probability table for softmax_ce,
            values of pred's shape otherwise
        reduction: "mean" (over rows for softmax_ce), "sum" or "none"

    Returns:
        Loss tensor

    Raises:
        ShapeError: If pred and target shapes are incompatible
    """
    pred = ad.tensor(pred)
    if kind == "softmax_ce":
        logits = pred if pred.ndim == 2 else pred.reshape(1, -1)
        target = np.asarray(target)
        if target.ndim == logits.ndim and target.shape == logits.shape:
            probs = target
        elif target.size == logits.shape[0] and np.issubdtype(target.dtype, np.integer):
            probs = np.zeros(logits.shape)
            probs[np.arange(logits.shape[0]), target.reshape(-1)] = 1.0
        else:
            raise ShapeError(f"softmax_ce target shape {target.shape} does not fit logits {logits.shape}")
        per_row = -(ad.log_softmax(logits) * probs).sum(axis=1)
        return _reduce(per_row, reduction)

    target = np.asarray(target, dtype=np.float64)
    if tuple(target.shape) != pred.shape:
        raise ShapeError(f"{kind} needs equal shapes, got {pred.shape} and {tuple(target.shape)}")
    diff = pred - target
    if kind == "smooth_l1":
        return _reduce(ad.smooth_l1(diff, beta=1.0), reduction)
    if kind == "neg_cosine":
        return _reduce(-ad.cos(diff), reduction)
    if kind == "mse":
        return _reduce(ad.square(diff), reduction)
    raise ValueError(f"Unknown loss kind: {kind}")


@dataclass
class AdamState:
    """First and second moments plus the step counter."""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


def adam_step(
    weights: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> List[np.ndarray]:
    """One bias-corrected Adam update; returns new weights and advances state."""
    if len(weights) != len(grads):
        raise ShapeError("weights and grads differ in length")
    state.step += 1
    t = state.step
    updated = []
    for i, (w, g) in enumerate(zip(weights, grads)):
        if w.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != weight shape {w.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        updated.append((w - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(w.dtype))
    return updated


def clip_by_global_norm(grads: List[np.ndarray], max_norm: Optional[float]) -> List[np.ndarray]:
    if not max_norm:
        return grads
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads
    return [g * (max_norm / total) for g in grads]


@dataclass
class Adam:
    """Adam over a fixed list of parameter tensors, updated in place."""
    params: List[ad.Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, grads: List[np.ndarray]):
        grads = clip_by_global_norm(grads, self.clip_norm)
        new = adam_step([p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for p, w in zip(self.params, new):
            p.data = w
