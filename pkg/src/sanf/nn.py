"""Small MLP heads and the fused-Adam optimizer used by both training stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .kernels import adam_update


@dataclass
class Mlp:
    """Plain fully-connected stack: x @ W + b per layer, ReLU between layers.

    ``weights[i]`` has shape [fan_in, fan_out]; a zero-layer Mlp is the
    identity and requires input_dim == output_dim.
    """

    input_dim: int
    output_dim: int
    weights: list[ad.Tensor] = field(default_factory=list)
    biases: list[ad.Tensor] = field(default_factory=list)

    def __post_init__(self):
        dims = [self.input_dim] + [w.shape[1] for w in self.weights]
        for i, w in enumerate(self.weights):
            if w.shape[0] != dims[i]:
                raise ContractViolation(f"Mlp: layer {i} expects fan_in {dims[i]}, weight is {w.shape}")
            if self.biases[i].shape != (w.shape[1],):
                raise ContractViolation(f"Mlp: layer {i} bias shape {self.biases[i].shape} != ({w.shape[1]},)")
        if dims[-1] != self.output_dim:
            raise ContractViolation(f"Mlp: final width {dims[-1]} != output_dim {self.output_dim}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ContractViolation(f"Mlp: input width {x.shape[-1]} != {self.input_dim}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add_bias(ad.matmul(x, w), b)
            if i + 1 < self.n_layers:
                x = ad.relu(x)
        return x

    def params(self) -> list[ad.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def make_mlp(input_dim: int, hidden: list[int], output_dim: int, rng: np.random.Generator) -> Mlp:
    """Xavier-uniform weights, zero biases, layer order fixed by ``hidden``."""
    dims = [input_dim] + list(hidden) + [output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        weights.append(ad.tensor(w, requires_grad=True))
        biases.append(ad.tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True))
    return Mlp(input_dim=input_dim, output_dim=output_dim, weights=weights, biases=biases)


@dataclass
class LrSchedule:
    """Exponential decay: start at step 0, end exactly at total_steps."""

    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.start <= 0 or self.end <= 0 or self.start < self.end:
            raise ContractViolation("LrSchedule: need start >= end > 0")
        if self.total_steps <= 0:
            raise ContractViolation("LrSchedule: total_steps must be positive")

    def at(self, step: int) -> float:
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return float(self.start * (self.end / self.start) ** frac)


class Adam:
    """Standard Adam with bias correction; moments live in flat f32 buffers.

    Hyperparameters (0.9, 0.999, 1e-8) are recorded alongside checkpoints so
    the training-metadata block is self-describing.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[ad.Tensor], schedule: LrSchedule):
        self.params = list(params)
        self.schedule = schedule
        self.t = 0
        self.m = [np.zeros(p.data.size, dtype=np.float32) for p in self.params]
        self.v = [np.zeros(p.data.size, dtype=np.float32) for p in self.params]

    def step(self) -> float:
        """Apply one update from the .grad fields; returns the lr used."""
        lr = self.schedule.at(self.t)
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ContractViolation("Adam.step: parameter has no gradient; run backward first")
            flat_p = p.data.reshape(-1)
            assert flat_p.base is not None or p.data.ndim <= 1  # must alias p.data
            adam_update(flat_p, p.grad.reshape(-1).astype(np.float32), m, v,
                        lr, self.BETA1, self.BETA2, self.EPS, self.t)
        return lr

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)
