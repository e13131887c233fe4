"""L-infinity gradient attacks: FGSM, PGD and MI-FGSM.

Every attack takes a ``forward(x, lam) -> logits`` callable.  Models should
hand in an eval-mode forward (see ``ConditionalCNN.attack_forward``) so the
attack never touches BN running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

Forward = Callable[[Tensor, object], Tensor]

KINDS = ("fgsm", "pgd", "mifgsm")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    step: float = 2 / 255
    iters: int = 7
    mu: float = 1.0
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.step <= 0:
            raise ValueError("step must be positive")

    @classmethod
    def pgd(cls, iters: int = 7, epsilon: float = 8 / 255, step: float = 2 / 255, random_start: bool = True):
        return cls("pgd", epsilon, step, iters, 0.0, random_start)

    @classmethod
    def fgsm(cls, epsilon: float = 8 / 255):
        return cls("fgsm", epsilon, max(epsilon, 1e-12), 1, 0.0, False)

    @classmethod
    def mifgsm(cls, epsilon: float = 8 / 255, iters: int = 10, mu: float = 1.0):
        return cls("mifgsm", epsilon, max(epsilon / iters, 1e-12), iters, mu, False)

    @classmethod
    def named(cls, name: str, epsilon: float = 8 / 255) -> "AttackSpec":
        """``pgd7``, ``pgd20``, ``pgdN``, ``fgsm`` or ``mifgsm``."""
        key = name.lower().replace("-", "")
        if key == "fgsm":
            return cls.fgsm(epsilon)
        if key == "mifgsm":
            return cls.mifgsm(epsilon)
        if key.startswith("pgd"):
            return cls.pgd(int(key[3:] or 7), epsilon)
        raise ValueError(f"unknown attack {name!r}")

    @property
    def label(self) -> str:
        return f"pgd{self.iters}" if self.kind == "pgd" else self.kind

    def with_(self, **kw) -> "AttackSpec":
        return replace(self, **kw)


def input_gradient(forward: Forward, x: np.ndarray, y: np.ndarray, lam) -> np.ndarray:
    """d/dx of the summed cross-entropy of ``forward(x, lam)``."""
    xt = Tensor(x, requires_grad=True)
    loss = T.softmax_xent(forward(xt, lam), y, reduction="sum")
    (g,) = T.grad(loss, [xt])
    if not np.isfinite(g).all():
        raise AttackError("non-finite input gradient")
    return g


def _project(x_adv: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.clip(np.minimum(np.maximum(x_adv, lo), hi), 0.0, 1.0)


def _bounds(x: np.ndarray, eps: float):
    e = x.dtype.type(eps)
    return x - e, x + e


def fgsm(forward: Forward, x, y, lam, spec: AttackSpec | None = None) -> np.ndarray:
    """One signed-gradient step of size epsilon, no random start."""
    spec = spec or AttackSpec.fgsm()
    x = np.asarray(x, dtype=T.get_dtype())
    lo, hi = _bounds(x, spec.epsilon)
    g = input_gradient(forward, x, y, lam)
    return _project(x + x.dtype.type(spec.epsilon) * np.sign(g), lo, hi)


def pgd(forward: Forward, x, y, lam, spec: AttackSpec | None = None,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """``iters`` signed-gradient steps, each projected back onto the eps-ball and [0, 1]."""
    spec = spec or AttackSpec.pgd()
    x = np.asarray(x, dtype=T.get_dtype())
    lo, hi = _bounds(x, spec.epsilon)
    step = x.dtype.type(spec.step)
    x_adv = x.copy()
    if spec.random_start and spec.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape).astype(x.dtype)
        x_adv = _project(x + noise, lo, hi)
    for _ in range(spec.iters):
        g = input_gradient(forward, x_adv, y, lam)
        x_adv = _project(x_adv + step * np.sign(g), lo, hi)
    return x_adv


def mi_fgsm(forward: Forward, x, y, lam, spec: AttackSpec | None = None) -> np.ndarray:
    """Momentum iterative FGSM with per-sample L1-normalised gradients and step eps/iters."""
    spec = spec or AttackSpec.mifgsm()
    x = np.asarray(x, dtype=T.get_dtype())
    lo, hi = _bounds(x, spec.epsilon)
    step = x.dtype.type(spec.epsilon / spec.iters)
    mu = x.dtype.type(spec.mu)
    x_adv = x.copy()
    acc = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for _ in range(spec.iters):
        g = input_gradient(forward, x_adv, y, lam)
        l1 = np.abs(g).sum(axis=axes, keepdims=True)
        acc = mu * acc + g / np.where(l1 > 0, l1, 1)
        x_adv = _project(x_adv + step * np.sign(acc), lo, hi)
    return x_adv


def run_attack(forward: Forward, x, y, lam, spec: AttackSpec,
               rng: np.random.Generator | None = None) -> np.ndarray:
    if spec.epsilon == 0:
        return np.array(x, dtype=T.get_dtype())
    if spec.kind == "fgsm":
        return fgsm(forward, x, y, lam, spec)
    if spec.kind == "pgd":
        return pgd(forward, x, y, lam, spec, rng)
    return mi_fgsm(forward, x, y, lam, spec)
