"""Conditional network building blocks and the desk-scale backbone.

The backbone is described by a :class:`ModelSpec` layer list and interpreted
by :class:`ConditionalCNN`.  Every normalisation layer is a switchable dual
BN (one ``bn_c``/``bn_a`` pair per width factor) optionally followed by a
FiLM block whose affine parameters are produced from the lambda encoding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import tensor as T
from .tensor import Tensor

ENCODER_SCHEMES = ("none", "dct", "ro")


# ---------------------------------------------------------------------------
# lambda encoding

@dataclass
class LambdaEncoder:
    """Maps a trade-off weight in [0, 1] to a conditioning vector.

    ``matrix`` holds one column per entry of ``lambda_grid``.  Grid values map
    to their column exactly; values between grid points get the
    unit-normalised linear interpolation of the two neighbouring columns.
    """

    scheme: str
    dim: int
    lambda_grid: np.ndarray
    matrix: np.ndarray

    @classmethod
    def build(cls, scheme: str, dim: int, lambda_grid, seed: int = 0) -> "LambdaEncoder":
        scheme = scheme.lower()
        grid = np.sort(np.asarray(lambda_grid, dtype=np.float64))
        if grid.size == 0:
            raise ValueError("lambda grid is empty")
        if scheme == "none":
            return cls("none", 1, grid, grid.reshape(1, -1).copy())
        if scheme not in ENCODER_SCHEMES:
            raise ValueError(f"unknown encoder scheme {scheme!r}")
        if grid.size > dim:
            raise ValueError(f"{grid.size} grid values do not fit in {dim} dimensions")
        if scheme == "dct":
            full = scipy.fft.dct(np.eye(dim), type=2, norm="ortho", axis=0)
        else:
            rng = np.random.default_rng(seed)
            q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
            full = q * np.sign(np.diag(r))
        return cls(scheme, dim, grid, np.ascontiguousarray(full[:, : grid.size]))

    @classmethod
    def parse(cls, name: str, lambda_grid, seed: int = 0) -> "LambdaEncoder":
        """Build from a name such as ``RO-128``, ``DCT-8`` or ``None``."""
        key = name.strip().lower()
        if key == "none":
            return cls.build("none", 1, lambda_grid, seed)
        scheme, _, d = key.partition("-")
        return cls.build(scheme, int(d), lambda_grid, seed)

    @property
    def name(self) -> str:
        return "None" if self.scheme == "none" else f"{self.scheme.upper()}-{self.dim}"

    def encode(self, lam: float) -> np.ndarray:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        if self.scheme == "none":
            return np.array([lam])
        grid = self.lambda_grid
        hit = np.flatnonzero(grid == lam)
        if hit.size:
            return self.matrix[:, hit[0]].copy()
        if lam <= grid[0]:
            return self.matrix[:, 0].copy()
        if lam >= grid[-1]:
            return self.matrix[:, -1].copy()
        hi = int(np.searchsorted(grid, lam))
        lo = hi - 1
        t = (lam - grid[lo]) / (grid[hi] - grid[lo])
        v = (1.0 - t) * self.matrix[:, lo] + t * self.matrix[:, hi]
        return v / np.linalg.norm(v)

    def encode_batch(self, lams) -> np.ndarray:
        lams = np.asarray(lams, dtype=np.float64).reshape(-1)
        out = np.empty((lams.size, self.dim))
        cache: dict[float, np.ndarray] = {}
        for i, lam in enumerate(lams):
            key = float(lam)
            if key not in cache:
                cache[key] = self.encode(key)
            out[i] = cache[key]
        return out


# ---------------------------------------------------------------------------
# batch norm family

def width_channels(alpha: float, channels: int) -> int:
    return int(math.ceil(alpha * channels - 1e-9))


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        dt = T.get_dtype()
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(bn: BatchNormState, h: Tensor, train: bool) -> tuple[Tensor, bool]:
    """Normalise ``h``; returns ``(out, fell_back)``.

    In train mode the batch statistics are used and the running statistics
    move by ``run <- (1-m) run + m batch``.  A batch with fewer than two
    values per channel cannot give a variance, so it is normalised with the
    running statistics and leaves them untouched (``fell_back=True``).
    """
    if h.ndim != 4 or h.shape[1] != bn.channels:
        raise T.DimensionError(f"batch norm over {bn.channels} channels got input {h.shape}")
    per_channel = h.shape[0] * h.shape[2] * h.shape[3]
    if train and per_channel >= 2:
        out, mu, var = T.batch_norm(h, bn.gamma, bn.beta, bn.eps)
        m = bn.momentum
        bn.running_mean = ((1.0 - m) * bn.running_mean + m * mu).astype(bn.running_mean.dtype)
        bn.running_var = ((1.0 - m) * bn.running_var + m * var).astype(bn.running_var.dtype)
        return out, False
    out, _, _ = T.batch_norm(h, bn.gamma, bn.beta, bn.eps, running=(bn.running_mean, bn.running_var))
    return out, bool(train)


@dataclass
class DualBNState:
    """``bn_c`` serves lambda == 0, ``bn_a`` every other lambda.

    A ``None`` ``bn_a`` makes this an ordinary single BN (every lambda goes
    through ``bn_c``).
    """

    bn_c: BatchNormState
    bn_a: BatchNormState | None

    @property
    def dual(self) -> bool:
        return self.bn_a is not None

    def route(self, lam: float) -> str:
        return "a" if self.bn_a is not None and lam != 0 else "c"

    def branch(self, key: str) -> BatchNormState:
        return self.bn_a if key == "a" else self.bn_c


def dual_bn_forward(dbn: DualBNState, h: Tensor, lam: float, train: bool) -> Tensor:
    out, _ = batchnorm_forward(dbn.branch(dbn.route(lam)), h, train)
    return out


class SwitchableDualBN:
    """One :class:`DualBNState` per width factor."""

    def __init__(self, channels: int, widths, dual: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.pairs: dict[float, DualBNState] = {}
        for a in widths:
            c = width_channels(a, channels)
            self.pairs[float(a)] = DualBNState(
                BatchNormState.create(c, momentum, eps),
                BatchNormState.create(c, momentum, eps) if dual else None,
            )

    def __getitem__(self, alpha: float) -> DualBNState:
        try:
            return self.pairs[float(alpha)]
        except KeyError:
            raise KeyError(f"width {alpha} not configured (have {sorted(self.pairs)})") from None


# ---------------------------------------------------------------------------
# FiLM

@dataclass
class FiLMBlock:
    """Two perceptrons mapping the encoding to per-channel scale and shift.

    Each has a hidden and an output layer of width C with a leaky ReLU in
    between.  Output weights start at zero and the scale bias at one, so the
    block is the identity until trained.
    """

    channels: int
    cond_dim: int
    params: dict[str, Tensor]
    slope: float = 0.01

    @classmethod
    def create(cls, channels: int, cond_dim: int, rng: np.random.Generator, slope: float = 0.01) -> "FiLMBlock":
        p = {}
        for g, bias0 in (("g1", 1.0), ("g2", 0.0)):
            p[f"{g}.w1"] = Tensor(rng.normal(0.0, math.sqrt(2.0 / cond_dim), (channels, cond_dim)), requires_grad=True)
            p[f"{g}.b1"] = Tensor(np.zeros(channels), requires_grad=True)
            p[f"{g}.w2"] = Tensor(np.zeros((channels, channels)), requires_grad=True)
            p[f"{g}.b2"] = Tensor(np.full(channels, bias0), requires_grad=True)
        return cls(channels, cond_dim, p, slope)

    def mlp(self, g: str, z: Tensor, c: int) -> Tensor:
        p = self.params
        if c == self.channels:
            w1, b1, w2, b2 = p[f"{g}.w1"], p[f"{g}.b1"], p[f"{g}.w2"], p[f"{g}.b2"]
        else:
            w1, b1 = p[f"{g}.w1"][:c], p[f"{g}.b1"][:c]
            w2, b2 = p[f"{g}.w2"][:c, :c], p[f"{g}.b2"][:c]
        hidden = T.leaky_relu(T.linear(z, w1, b1), self.slope)
        return T.linear(hidden, w2, b2)


def film_forward(film: FiLMBlock, h: Tensor, z: Tensor) -> Tensor:
    """Per-sample, per-channel ``gamma * h + beta`` with (gamma, beta) from ``z``."""
    if z.ndim != 2 or z.shape[1] != film.cond_dim:
        raise T.DimensionError(f"FiLM expects encodings of width {film.cond_dim}, got {z.shape}")
    if z.shape[0] != h.shape[0]:
        raise T.DimensionError(f"{z.shape[0]} encodings for a batch of {h.shape[0]}")
    c = h.shape[1]
    gamma = film.mlp("g1", z, c).reshape(h.shape[0], c, 1, 1)
    beta = film.mlp("g2", z, c).reshape(h.shape[0], c, 1, 1)
    return h * gamma + beta


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | norm | act | pool | dense
    out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0


@dataclass
class ModelSpec:
    in_channels: int = 1
    image_size: int = 16
    num_classes: int = 10
    channels: tuple = (16, 32)
    widths: tuple = (1.0,)
    conditional: bool = True
    bn_style: str = "dual"
    encoder: str = "RO-128"
    lambda_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 1.0)
    slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.widths = tuple(sorted(float(a) for a in self.widths))
        self.lambda_grid = tuple(float(v) for v in self.lambda_grid)
        if self.bn_style not in ("dual", "normal"):
            raise ValueError(f"bn_style must be 'dual' or 'normal', got {self.bn_style!r}")
        if not self.widths or any(not 0 < a <= 1 for a in self.widths) or self.widths[-1] != 1.0:
            raise ValueError(f"width list must lie in (0, 1] and contain 1.0, got {self.widths}")
        if not self.layers:
            self.layers = desk_layers(self.channels, self.num_classes)
        for i, layer in enumerate(self.layers):
            if layer.kind == "norm" and (i == 0 or self.layers[i - 1].kind != "conv"):
                raise ValueError("every norm layer must follow a conv layer")

    @property
    def dual(self) -> bool:
        return self.bn_style == "dual"


def desk_layers(channels=(16, 32), num_classes: int = 10) -> list:
    c1, c2 = channels
    return [
        LayerSpec("conv", c1, 3, 1, 1), LayerSpec("norm"), LayerSpec("act"),
        LayerSpec("conv", c2, 4, 2, 1), LayerSpec("norm"), LayerSpec("act"),
        LayerSpec("pool"), LayerSpec("dense", num_classes),
    ]


class ConditionalCNN:
    """Network ``f(x, lambda; theta)`` with optional width slimming.

    Parameters live in ``self.params`` (name -> Tensor) and BN running
    statistics are reached through :meth:`buffers`.  ``forward`` groups the
    batch by BN route so each branch normalises its own sub-batch.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.encoder = LambdaEncoder.parse(spec.encoder, spec.lambda_grid, seed=seed) if spec.conditional else None
        self.params: dict[str, Tensor] = {}
        self.norms: dict[int, SwitchableDualBN] = {}
        self.films: dict[int, FiLMBlock] = {}
        cin = spec.in_channels
        for i, layer in enumerate(spec.layers):
            if layer.kind == "conv":
                fan_in = cin * layer.kernel ** 2
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (layer.out, cin, layer.kernel, layer.kernel))
                self.params[f"l{i}.weight"] = Tensor(w, requires_grad=True)
                cin = layer.out
            elif layer.kind == "norm":
                self.norms[i] = SwitchableDualBN(cin, spec.widths, spec.dual, spec.bn_momentum, spec.bn_eps)
                for a, pair in self.norms[i].pairs.items():
                    for key in ("c", "a") if pair.dual else ("c",):
                        bn = pair.branch(key)
                        self.params[f"l{i}.bn{a:g}.{key}.gamma"] = bn.gamma
                        self.params[f"l{i}.bn{a:g}.{key}.beta"] = bn.beta
                if spec.conditional:
                    self.films[i] = FiLMBlock.create(cin, self.encoder.dim, rng, spec.slope)
                    for k, v in self.films[i].params.items():
                        self.params[f"l{i}.film.{k}"] = v
            elif layer.kind == "dense":
                bound = 1.0 / math.sqrt(cin)
                self.params[f"l{i}.weight"] = Tensor(rng.uniform(-bound, bound, (layer.out, cin)), requires_grad=True)
                self.params[f"l{i}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
                cin = layer.out

    # ---- state access -----------------------------------------------------
    def bn_states(self):
        """Yield ``(name, BatchNormState)`` for every BN branch."""
        for i, sbn in self.norms.items():
            for a, pair in sbn.pairs.items():
                for key in ("c", "a") if pair.dual else ("c",):
                    yield f"l{i}.bn{a:g}.{key}", pair.branch(key)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.bn_states():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, field_ = name.rpartition(".")
        for bname, bn in self.bn_states():
            if bname == prefix and field_ in ("running_mean", "running_var"):
                cur = getattr(bn, field_)
                if cur.shape != value.shape:
                    raise T.DimensionError(f"{name}: expected shape {cur.shape}, got {value.shape}")
                setattr(bn, field_, value.astype(cur.dtype, copy=True))
                return
        raise KeyError(f"unknown buffer {name!r}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def last_norm(self) -> SwitchableDualBN:
        return self.norms[max(self.norms)]

    # ---- forward ----------------------------------------------------------
    def route_key(self, lam: float) -> str:
        return "a" if self.spec.dual and lam != 0 else "c"

    def encode(self, lams) -> Tensor:
        return Tensor(self.encoder.encode_batch(lams))

    def _forward_group(self, x: Tensor, lams: np.ndarray, route: str, alpha: float, train: bool,
                       report: dict | None) -> Tensor:
        spec = self.spec
        z = self.encode(lams) if spec.conditional else None
        h = x
        for i, layer in enumerate(spec.layers):
            if layer.kind == "conv":
                w = self.params[f"l{i}.weight"]
                cout = width_channels(alpha, layer.out)
                cin = h.shape[1]
                if cout != w.shape[0] or cin != w.shape[1]:
                    w = w[:cout, :cin]
                h = T.conv2d(h, w, layer.stride, layer.pad)
            elif layer.kind == "norm":
                bn = self.norms[i][alpha].branch(route)
                h, fell_back = batchnorm_forward(bn, h, train)
                if report is not None and fell_back:
                    report.setdefault("bn_fallback", []).append(f"l{i}.bn{alpha:g}.{route}")
                if spec.conditional:
                    h = film_forward(self.films[i], h, z)
            elif layer.kind == "act":
                h = T.leaky_relu(h, spec.slope)
            elif layer.kind == "pool":
                h = T.mean(h, axis=(2, 3))
            elif layer.kind == "dense":
                w, b = self.params[f"l{i}.weight"], self.params[f"l{i}.bias"]
                if h.shape[1] != w.shape[1]:
                    w = w[:, : h.shape[1]]
                h = T.linear(h, w, b)
        return h

    def forward(self, x, lam, alpha: float = 1.0, train: bool = False, report: dict | None = None) -> Tensor:
        """Logits of the width-``alpha`` subnetwork.

        ``lam`` is a scalar or one value per sample.  Samples are grouped by
        BN route; in train mode each group updates only its own branch.
        """
        if float(alpha) not in self.spec.widths:
            raise KeyError(f"width {alpha} not configured (have {self.spec.widths})")
        x = x if isinstance(x, Tensor) else Tensor(x)
        B = x.shape[0]
        lams = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
        if ((lams < 0) | (lams > 1)).any():
            raise ValueError("lambda must lie in [0, 1]")
        keys = np.array([self.route_key(v) for v in lams])
        groups = [k for k in ("c", "a") if (keys == k).any()]
        if len(groups) == 1:
            return self._forward_group(x, lams, groups[0], float(alpha), train, report)
        outs, order = [], []
        for k in groups:
            idx = np.flatnonzero(keys == k)
            outs.append(self._forward_group(x[idx], lams[idx], k, float(alpha), train, report))
            order.append(idx)
        perm = np.argsort(np.concatenate(order), kind="stable")
        return T.concat(outs, axis=0)[perm]

    __call__ = forward

    def attack_forward(self, alpha: float = 1.0):
        """Eval-mode forward ``(x, lam) -> logits`` for attack generation."""
        return lambda x, lam: self.forward(x, lam, alpha, train=False)

    def used_parameters(self, alpha: float) -> dict[str, np.ndarray]:
        """Boolean mask per parameter marking entries the width-``alpha`` subnet reads."""
        masks = {k: np.zeros(v.shape, dtype=bool) for k, v in self.params.items()}
        cin = self.spec.in_channels
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                cout = width_channels(alpha, layer.out)
                masks[f"l{i}.weight"][:cout, :cin] = True
                cin = cout
            elif layer.kind == "norm":
                for name in masks:
                    if name.startswith(f"l{i}.bn{alpha:g}."):
                        masks[name][:] = True
                    elif name.startswith(f"l{i}.film."):
                        m = masks[name]
                        if name.endswith("w1"):
                            m[:cin] = True
                        elif name.endswith("w2"):
                            m[:cin, :cin] = True
                        else:
                            m[:cin] = True
            elif layer.kind == "dense":
                masks[f"l{i}.weight"][:, :cin] = True
                masks[f"l{i}.bias"][:] = True
        return masks


def subnet_forward(model: ConditionalCNN, x, lam, alpha: float, train: bool = False) -> Tensor:
    return model.forward(x, lam, alpha, train)
