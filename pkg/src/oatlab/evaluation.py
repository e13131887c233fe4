"""Standard/robust accuracy, trade-off sweeps, Jacobian saliency and FLOP counts."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .attacks import AttackError, AttackSpec, run_attack
from .data import Dataset
from .layers import ConditionalCNN, ModelSpec, width_channels


@dataclass(frozen=True)
class TradeoffPoint:
    lam: float
    width: float
    sa: float
    ra: float
    attack: str
    epsilon: float
    steps: int
    seed: int

    def __post_init__(self):
        if not (0 <= self.sa <= 100 and 0 <= self.ra <= 100):
            raise ValueError("accuracies are percentages in [0, 100]")

    def as_dict(self) -> dict:
        return asdict(self)


def _predict(model: ConditionalCNN, x: np.ndarray, lam, alpha: float) -> np.ndarray:
    with T.no_grad():
        return model.forward(x, lam, alpha, train=False).data.argmax(axis=1)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= float(lam) <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def eval_sa(model: ConditionalCNN, dataset: Dataset, lam: float, alpha: float = 1.0,
            batch_size: int = 500) -> float:
    """Clean accuracy (percent) with eval-mode normalisation."""
    _check_lambda(lam)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for s in range(0, len(dataset), batch_size):
        x, y = dataset.images[s:s + batch_size], dataset.labels[s:s + batch_size]
        correct += int((_predict(model, x, lam, alpha) == y).sum())
    return 100.0 * correct / len(dataset)


def eval_ra(model: ConditionalCNN, dataset: Dataset, lam: float, alpha: float = 1.0,
            spec: AttackSpec | None = None, seed: int = 0, batch_size: int = 500) -> float:
    """Accuracy (percent) on white-box attacks generated against this model at (lam, alpha)."""
    _check_lambda(lam)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    spec = spec or AttackSpec.pgd()
    rng = np.random.default_rng(seed)
    fwd = model.attack_forward(alpha)
    correct = 0
    for s in range(0, len(dataset), batch_size):
        x, y = dataset.images[s:s + batch_size], dataset.labels[s:s + batch_size]
        x_adv = run_attack(fwd, x, y, lam, spec, rng)
        correct += int((_predict(model, x_adv, lam, alpha) == y).sum())
    return 100.0 * correct / len(dataset)


def sweep_tradeoff(model: ConditionalCNN, dataset: Dataset, lambdas, widths=(1.0,),
                   spec: AttackSpec | None = None, seed: int = 0) -> list[TradeoffPoint]:
    """One :class:`TradeoffPoint` per (lambda, width); the attack seed is shared by all points."""
    spec = spec or AttackSpec.pgd()
    for lam in lambdas:
        _check_lambda(lam)
    points = []
    for a in widths:
        for lam in lambdas:
            sa = eval_sa(model, dataset, lam, a)
            ra = eval_ra(model, dataset, lam, a, spec, seed)
            points.append(TradeoffPoint(float(lam), float(a), sa, ra, spec.label, spec.epsilon, spec.iters, seed))
    return points


# ---------------------------------------------------------------------------
# saliency

@dataclass
class SaliencyMap:
    values: np.ndarray
    image_id: int
    lam: float

    def to_u8(self) -> np.ndarray:
        return normalize_u8(self.values)


def jacobian_saliency(model: ConditionalCNN, x: np.ndarray, y: int, lam: float, alpha: float = 1.0,
                      image_id: int = 0) -> SaliencyMap:
    """Gradient of the clean cross-entropy w.r.t. a single input image (C, H, W)."""
    x = np.asarray(x)
    xt = T.Tensor(x[None])
    xt.requires_grad = True
    loss = T.softmax_xent(model.forward(xt, lam, alpha, train=False), [int(y)])
    (g,) = T.grad(loss, [xt])
    if not np.isfinite(g).all():
        raise AttackError("non-finite saliency gradient")
    return SaliencyMap(g[0], image_id, float(lam))


def normalize_u8(values: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to 0..255; a constant map becomes mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def saliency_alignment(saliency: np.ndarray, image: np.ndarray) -> float:
    """Cosine similarity between |saliency| and the image."""
    s = np.abs(np.asarray(saliency, dtype=np.float64)).ravel()
    im = np.asarray(image, dtype=np.float64).ravel()
    denom = np.linalg.norm(s) * np.linalg.norm(im)
    return float(s @ im / denom) if denom > 0 else 0.0


def mean_alignment(model: ConditionalCNN, dataset: Dataset, lam: float, alpha: float = 1.0,
                   count: int | None = None) -> float:
    n = len(dataset) if count is None else min(count, len(dataset))
    vals = [saliency_alignment(jacobian_saliency(model, dataset.images[i], dataset.labels[i], lam, alpha).values,
                               dataset.images[i]) for i in range(n)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# complexity

def flops_breakdown(model, alpha: float = 1.0) -> dict:
    """Multiply-adds of one forward pass of the width-``alpha`` subnet.

    ``backbone`` counts conv and dense layers; ``film`` counts the two
    perceptrons of every FiLM block (the per-element FiLM affine folds into
    the preceding BN affine at inference, as BN folds into the conv).
    """
    spec: ModelSpec = model.spec if isinstance(model, ConditionalCNN) else model
    if float(alpha) not in spec.widths:
        raise KeyError(f"width {alpha} not configured (have {spec.widths})")
    d = 0
    if spec.conditional:
        d = model.encoder.dim if isinstance(model, ConditionalCNN) else int(spec.encoder.split("-")[-1]) \
            if spec.encoder.lower() != "none" else 1
    cin, h, w = spec.in_channels, spec.image_size, spec.image_size
    backbone = film = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            cout = width_channels(alpha, layer.out)
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            backbone += h * w * cout * cin * layer.kernel ** 2
            cin = cout
        elif layer.kind == "norm" and spec.conditional:
            film += 2 * (d * cin + cin * cin)
        elif layer.kind == "dense":
            backbone += cin * layer.out
            cin = layer.out
    return {"backbone": backbone, "film": film, "total": backbone + film}


def flops_count(model, alpha: float = 1.0) -> int:
    return flops_breakdown(model, alpha)["total"]
