"""Lambda-conditioned adversarial training (OAT), its slimmable variant (OATS) and baselines.

All modes share one step routine: for each width factor, adversarial
examples are generated against the width-specific subnetwork (conditioned on
each sample's lambda), the per-sample loss ``(1-lam) L_c + lam L_a`` is
back-propagated, and after the width loop the accumulated gradients are
averaged over widths before a single momentum-SGD step.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, run_attack
from .data import BatchIterator, Dataset
from .layers import ConditionalCNN, ModelSpec
from .tensor import Tensor

MODES = ("standard", "pgd_at", "oat", "pgd_ats", "oats")
S1 = (0.0, 0.1, 0.2, 0.3, 0.4, 1.0)
S2 = (0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0)
S3 = (0.15, 0.25, 0.35, 0.5, 0.7, 0.9)
S4 = (0.1, 0.2, 0.3, 0.4, 1.0)
WIDTHS = (0.5, 0.75, 1.0)


@dataclass
class LambdaDistribution:
    support: tuple = S1
    weights: tuple | None = None

    def __post_init__(self):
        self.support = tuple(float(v) for v in self.support)
        if not self.support or any(not 0 <= v <= 1 for v in self.support):
            raise ValueError(f"lambda support must be a non-empty subset of [0, 1], got {self.support}")
        if self.weights is None:
            self.weights = tuple(1.0 / len(self.support) for _ in self.support)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != len(self.support) or abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must match the support and sum to 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if len(self.support) == 1:
            return np.full(n, self.support[0])
        return rng.choice(np.asarray(self.support), size=n, p=np.asarray(self.weights))


@dataclass
class TrainConfig:
    mode: str = "oat"
    bn_style: str = "dual"
    lambda_dist: LambdaDistribution = field(default_factory=LambdaDistribution)
    fixed_lambda: float = 1.0
    width_list: tuple = (1.0,)
    attack: AttackSpec = field(default_factory=AttackSpec.pgd)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    max_steps: int | None = None
    encoder: str = "RO-128"
    channels: tuple = (16, 32)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.width_list = tuple(sorted(float(a) for a in self.width_list))
        if self.mode in ("pgd_ats", "oats") and len(self.width_list) < 2:
            raise ValueError(f"{self.mode} needs at least two width factors")
        if self.mode in ("standard", "pgd_at", "oat"):
            self.width_list = (1.0,)
        if not 0 <= self.fixed_lambda <= 1:
            raise ValueError("fixed_lambda must lie in [0, 1]")

    @property
    def conditional(self) -> bool:
        return self.mode in ("oat", "oats")

    def model_spec(self, dataset: Dataset | None = None) -> ModelSpec:
        kw = {}
        if dataset is not None:
            kw = dict(in_channels=dataset.images.shape[1], image_size=dataset.images.shape[2],
                      num_classes=dataset.num_classes)
        grid = self.lambda_dist.support if self.conditional else S1
        return ModelSpec(channels=self.channels, widths=self.width_list, conditional=self.conditional,
                         bn_style=self.bn_style if self.conditional else "normal",
                         encoder=self.encoder, lambda_grid=grid, **kw)

    def lambdas(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.mode == "standard":
            return np.zeros(n)
        if self.mode in ("pgd_at", "pgd_ats"):
            return np.full(n, self.fixed_lambda)
        return self.lambda_dist.sample(rng, n)


@dataclass
class StepReport:
    step: int
    lr: float
    loss: float
    loss_clean: float
    loss_adv: float
    n_bn_c: int
    n_bn_a: int
    bn_fallback: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD: ``v <- m v + g + wd theta``; ``theta <- theta - lr v``."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.base_lr if lr is None else lr
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[k]
            v *= self.momentum
            v += g
            v += self.weight_decay * p.data
            p.data = p.data - p.data.dtype.type(lr) * v
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def oat_loss(loss_clean, loss_adv, lam):
    """Batch mean of ``(1-lam) L_c + lam L_a`` (scalars, arrays or Tensors)."""
    if isinstance(loss_clean, Tensor) or isinstance(loss_adv, Tensor):
        lam_arr = np.asarray(lam, dtype=T.get_dtype())
        per = loss_clean * (1.0 - lam_arr) + loss_adv * lam_arr
        return T.mean(per)
    lam = np.asarray(lam, dtype=np.float64)
    return float(np.mean((1.0 - lam) * np.asarray(loss_clean) + lam * np.asarray(loss_adv)))


def _width_loss(model: ConditionalCNN, x: np.ndarray, y: np.ndarray, lam: np.ndarray, alpha: float,
                cfg: TrainConfig, rng: np.random.Generator, report: dict):
    """Loss of one width pass.

    Terms with zero weight are skipped: no clean forward for lam == 1 and no
    attack for lam == 0, so neither pollutes BN statistics.
    """
    B = len(y)
    loss = None
    lc = la = 0.0
    clean_idx = np.flatnonzero(lam < 1)
    if clean_idx.size:
        xc, yc, lamc = x[clean_idx], y[clean_idx], lam[clean_idx]
        clean_logits = model.forward(xc, lamc, alpha, train=True, report=report)
        loss = T.softmax_xent(clean_logits, yc, weights=1.0 - lamc, reduction="sum")
        with T.no_grad():
            lc = float(T.softmax_xent(clean_logits, yc).data)
    adv_idx = np.flatnonzero(lam > 0)
    if adv_idx.size:
        xa, ya, lama = x[adv_idx], y[adv_idx], lam[adv_idx]
        x_adv = run_attack(model.attack_forward(alpha), xa, ya, lama, cfg.attack, rng)
        adv_logits = model.forward(x_adv, lama, alpha, train=True, report=report)
        term = T.softmax_xent(adv_logits, ya, weights=lama, reduction="sum")
        loss = term if loss is None else loss + term
        with T.no_grad():
            la = float(T.softmax_xent(adv_logits, ya).data)
    return loss * (1.0 / B), lc, la


def oats_train_step(model: ConditionalCNN, opt: SGD, x, y, lam, cfg: TrainConfig,
                    rng: np.random.Generator, lr: float | None = None, step: int = 0,
                    widths=None) -> StepReport:
    """One optimizer step averaging the losses of every width in ``widths``."""
    x = np.asarray(x, dtype=T.get_dtype())
    y = np.asarray(y, dtype=np.int64)
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    if lam.size != len(y):
        raise ValueError(f"{lam.size} lambdas for a batch of {len(y)}")
    widths = tuple(cfg.width_list if widths is None else widths)
    for a in widths:
        if float(a) not in model.spec.widths:
            raise KeyError(f"width {a} not configured (have {model.spec.widths})")
    opt.zero_grad()
    report: dict = {}
    total = lcs = las = 0.0
    for a in widths:
        loss, lc, la = _width_loss(model, x, y, lam, float(a), cfg, rng, report)
        T.backward(loss)
        total += float(loss.data)
        lcs += lc
        las += la
    k = len(widths)
    if k > 1:
        for p in model.params.values():
            if p.grad is not None:
                p.grad = p.grad / p.grad.dtype.type(k)
    opt.step(lr)
    keys = np.array([model.route_key(v) for v in lam])
    return StepReport(step, opt.base_lr if lr is None else lr, total / k, lcs / k, las / k,
                      int((keys == "c").sum()), int((keys == "a").sum()),
                      sorted(set(report.get("bn_fallback", []))))


def oat_train_step(model: ConditionalCNN, opt: SGD, x, y, lam, cfg: TrainConfig,
                   rng: np.random.Generator, lr: float | None = None, step: int = 0) -> StepReport:
    return oats_train_step(model, opt, x, y, lam, cfg, rng, lr, step, widths=(1.0,))


def pgd_at_step(model: ConditionalCNN, opt: SGD, x, y, lam_fixed: float, cfg: TrainConfig,
                rng: np.random.Generator, lr: float | None = None, step: int = 0) -> StepReport:
    lam = np.full(len(y), float(lam_fixed))
    return oats_train_step(model, opt, x, y, lam, cfg, rng, lr, step, widths=model.spec.widths)


def build_model(cfg: TrainConfig, dataset: Dataset | None = None) -> ConditionalCNN:
    return ConditionalCNN(cfg.model_spec(dataset), seed=cfg.seed)


@dataclass
class TrainResult:
    model: ConditionalCNN
    optimizer: SGD
    steps: int
    history: list
    seconds: float


def train(cfg: TrainConfig, dataset: Dataset, model: ConditionalCNN | None = None,
          on_step: Callable[[StepReport], None] | None = None,
          on_epoch: Callable[[int, list], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs (or ``cfg.max_steps`` steps) with cosine-annealed lr."""
    model = model or build_model(cfg, dataset)
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    it = BatchIterator(dataset, cfg.batch_size, seed=cfg.seed)
    total = cfg.max_steps or cfg.epochs * it.batches_per_epoch
    lam_rng = np.random.default_rng([cfg.seed, 1])
    atk_rng = np.random.default_rng([cfg.seed, 2])
    history: list[StepReport] = []
    t0 = time.perf_counter()
    step = 0
    epoch = 0
    while step < total:
        epoch_reports = []
        for xb, yb in it.epoch_batches():
            if step >= total:
                break
            lam = cfg.lambdas(lam_rng, len(yb))
            rep = oats_train_step(model, opt, xb, yb, lam, cfg, atk_rng,
                                  lr=cosine_lr(step, total, cfg.lr), step=step)
            history.append(rep)
            epoch_reports.append(rep)
            if on_step:
                on_step(rep)
            step += 1
        if on_epoch:
            on_epoch(epoch, epoch_reports)
        epoch += 1
    return TrainResult(model, opt, step, history, time.perf_counter() - t0)
