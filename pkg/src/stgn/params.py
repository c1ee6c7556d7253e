"""Named trainable arrays, Adam optimizer state, and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .autodiff import Tape, Var


class ParameterError(Exception):
    pass


def glorot_limit(shape: tuple) -> float:
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[0], shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParameterStore:
    """Named float64 arrays; shapes are frozen once added."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.arrays: Dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple, init: str = "glorot") -> np.ndarray:
        if name in self.arrays:
            raise ParameterError(f"duplicate parameter name: {name}")
        if init == "glorot":
            a = glorot_limit(shape)
            arr = self._rng.uniform(-a, a, size=shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        else:
            raise ParameterError(f"unknown init: {init}")
        self.arrays[name] = np.asarray(arr, dtype=np.float64)
        return self.arrays[name]

    def add_fixed(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self.arrays:
            raise ParameterError(f"duplicate parameter name: {name}")
        self.arrays[name] = np.asarray(values, dtype=np.float64).copy()
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def as_vars(self, tape: Tape) -> Dict[str, Var]:
        return {name: tape.var(arr, requires_grad=True) for name, arr in self.arrays.items()}

    def check_finite(self) -> None:
        for name, arr in self.arrays.items():
            if not np.isfinite(arr).all():
                raise ParameterError(f"non-finite values in parameter {name}")


def collect_grads(pvars: Dict[str, Var]) -> Dict[str, np.ndarray]:
    """Gradients after Tape.backward; unused parameters get zeros."""
    return {
        name: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for name, v in pvars.items()
    }


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParameterStore,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One standard Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    for name, arr in params.arrays.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != arr.shape:
            raise ParameterError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(arr))
        v = state.v.setdefault(name, np.zeros_like(arr))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        arr -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_name: str
    worst_index: tuple
    probes: int


def gradient_check(
    forward: Callable[[Dict[str, Var], Tape], Var],
    params: ParameterStore,
    probes: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    names: Optional[list[str]] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `forward` must be deterministic given the parameter arrays. Probed
    coordinates are sampled uniformly over the selected parameter arrays.
    """
    rng = np.random.default_rng(seed)
    names = names if names is not None else params.names()

    tape = Tape()
    pvars = params.as_vars(tape)
    loss = forward(pvars, tape)
    tape.backward(loss)
    grads = collect_grads(pvars)

    def loss_value() -> float:
        t = Tape()
        pv = params.as_vars(t)
        return float(forward(pv, t).value)

    sizes = np.array([params.arrays[n].size for n in names], dtype=np.float64)
    probs = sizes / sizes.sum()

    worst = GradCheckReport(0.0, "", (), probes)
    for _ in range(probes):
        name = names[rng.choice(len(names), p=probs)]
        arr = params.arrays[name]
        flat = rng.integers(arr.size)
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_value()
        arr[idx] = orig - h
        down = loss_value()
        arr[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[name][idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
        if rel > worst.max_rel_err:
            worst = GradCheckReport(rel, name, idx, probes)
    return worst
