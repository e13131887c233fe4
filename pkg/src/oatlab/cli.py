"""Command-line entry point: train, sweep, saliency, stats-export, flops.

Runs are described by plain ``key=value`` files (``#`` starts a comment);
any key can also be overridden on the command line.  Unknown keys are
rejected.  Run ``oatlab keys`` for the full table of keys and defaults.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .attacks import AttackError, AttackSpec
from .checkpoint import Checkpoint, CheckpointError
from .data import Dataset, IDXParseError, load_idx, synth_glyphs
from .evaluation import TradeoffPoint, flops_breakdown, jacobian_saliency, normalize_u8, sweep_tradeoff
from .layers import ConditionalCNN
from .training import S1, LambdaDistribution, TrainConfig, train

CSV_HEADER = ("lambda", "width", "sa", "ra", "attack", "epsilon", "steps", "seed")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# value parsing

def parse_float(text) -> float:
    """Accepts decimals and fractions such as ``8/255``."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    try:
        return float(Fraction(s)) if "/" in s else float(s)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def parse_floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(parse_float(v) for v in text)
    s = str(text).strip()
    return tuple(parse_float(v) for v in s.split(",") if v.strip()) if s else ()


def parse_int(text) -> int:
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None


def parse_ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(parse_int(v) for v in text)
    return tuple(parse_int(v) for v in str(text).split(",") if v.strip())


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _key(default, parse, doc):
    return field(default=default, metadata={"parse": parse, "doc": doc})


@dataclass
class RunConfig:
    # training
    mode: str = _key("oat", str, "standard | pgd_at | oat | pgd_ats | oats")
    bn: str = _key("dual", str, "dual | normal (conditional modes only)")
    lambdas: tuple = _key(S1, parse_floats, "lambda support sampled by oat/oats")
    lambda_weights: tuple = _key((), parse_floats, "sampling weights (empty = uniform)")
    lam: float = _key(1.0, parse_float, "fixed lambda for pgd_at/pgd_ats")
    widths: tuple = _key((1.0,), parse_floats, "width factors for pgd_ats/oats")
    attack: str = _key("pgd", str, "training attack: pgd | fgsm | mifgsm")
    epsilon: float = _key(8 / 255, parse_float, "L-inf budget")
    steps: int = _key(7, parse_int, "attack iterations")
    step_size: float = _key(2 / 255, parse_float, "PGD step size")
    random_start: bool = _key(True, parse_bool, "PGD uniform random start")
    mu: float = _key(1.0, parse_float, "MI-FGSM momentum")
    epochs: int = _key(30, parse_int, "training epochs")
    batch_size: int = _key(64, parse_int, "mini-batch size")
    lr: float = _key(0.1, parse_float, "peak learning rate (cosine schedule)")
    momentum: float = _key(0.9, parse_float, "SGD momentum")
    weight_decay: float = _key(5e-4, parse_float, "L2 weight decay")
    seed: int = _key(0, parse_int, "initialisation, sampling and attack seed")
    max_steps: int = _key(0, parse_int, "stop after this many steps (0 = epochs decide)")
    encoder: str = _key("RO-128", str, "lambda encoding: RO-d | DCT-d | None")
    channels: tuple = _key((16, 32), parse_ints, "conv channel counts")
    precision: int = _key(32, parse_int, "float bits: 32 | 64")
    # data
    dataset: str = _key("synth", str, "synth | idx")
    train_per_class: int = _key(600, parse_int, "synthetic training images per class")
    test_per_class: int = _key(200, parse_int, "synthetic test images per class")
    noise_sigma: float = _key(0.15, parse_float, "synthetic pixel noise")
    contrast: float = _key(0.6, parse_float, "synthetic glyph contrast")
    background: float = _key(0.2, parse_float, "synthetic background level")
    cue: float = _key(0.0, parse_float, "label-parity brightness offset (0 disables)")
    swap_prob: float = _key(0.0, parse_float, "probability of drawing the paired class's glyph")
    image_size: int = _key(16, parse_int, "synthetic image side")
    data_seed: int = _key(1, parse_int, "synthetic training seed (test uses data_seed + 1)")
    num_classes: int = _key(10, parse_int, "number of classes")
    train_images: str = _key("", str, "IDX training images")
    train_labels: str = _key("", str, "IDX training labels")
    test_images: str = _key("", str, "IDX test images")
    test_labels: str = _key("", str, "IDX test labels")
    # outputs
    output: str = _key("model.ckpt", str, "checkpoint path")
    log: str = _key("", str, "per-epoch CSV log (default: <output>.log.csv)")

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, f.metadata["parse"](getattr(self, f.name)))
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.dataset not in ("synth", "idx"):
            raise ConfigError(f"dataset must be 'synth' or 'idx', got {self.dataset!r}")

    @classmethod
    def keys(cls) -> dict:
        return {f.name: f for f in fields(cls)}

    @classmethod
    def from_pairs(cls, pairs: dict, base: "RunConfig | None" = None) -> "RunConfig":
        known = cls.keys()
        bad = sorted(set(pairs) - set(known))
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(bad)}")
        values = asdict(base) if base is not None else {}
        values.update(pairs)
        return cls(**values)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def attack_spec(self) -> AttackSpec:
        if self.attack == "pgd":
            return AttackSpec.pgd(self.steps, self.epsilon, self.step_size, self.random_start)
        if self.attack == "fgsm":
            return AttackSpec.fgsm(self.epsilon)
        if self.attack == "mifgsm":
            return AttackSpec.mifgsm(self.epsilon, self.steps, self.mu)
        raise ConfigError(f"unknown attack {self.attack!r}")

    def train_config(self) -> TrainConfig:
        dist = LambdaDistribution(self.lambdas, self.lambda_weights or None)
        return TrainConfig(mode=self.mode, bn_style=self.bn, lambda_dist=dist, fixed_lambda=self.lam,
                           width_list=self.widths, attack=self.attack_spec(), epochs=self.epochs,
                           batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.seed, max_steps=self.max_steps or None,
                           encoder=self.encoder, channels=self.channels)

    def log_path(self) -> Path:
        return Path(self.log) if self.log else Path(self.output + ".log.csv")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    pairs = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items) -> dict:
    return parse_config_text("\n".join(items or ()), "<command line>")


def load_run_config(path=None, overrides=None) -> RunConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        pairs.update(parse_config_text(p.read_text(), str(p)))
    pairs.update(overrides or {})
    return RunConfig.from_pairs(pairs)


# ---------------------------------------------------------------------------
# data and checkpoints

def load_split(cfg: RunConfig, split: str) -> Dataset:
    if cfg.dataset == "synth":
        n = cfg.train_per_class if split == "train" else cfg.test_per_class
        seed = cfg.data_seed if split == "train" else cfg.data_seed + 1
        return synth_glyphs(n, cfg.num_classes, cfg.image_size, cfg.noise_sigma, seed, cfg.contrast,
                            cfg.background, split, cfg.cue, cfg.swap_prob)
    images = cfg.train_images if split == "train" else cfg.test_images
    labels = cfg.train_labels if split == "train" else cfg.test_labels
    if not images or not labels:
        raise ConfigError(f"dataset=idx needs {split}_images and {split}_labels")
    return load_idx(images, labels, cfg.num_classes, split)


def build_checkpoint(model: ConditionalCNN, cfg: RunConfig, step: int) -> Checkpoint:
    spec = model.spec
    header = {
        "format": 1,
        "config": cfg.to_dict(),
        "data": {"in_channels": spec.in_channels, "image_size": spec.image_size, "num_classes": spec.num_classes},
        "lambda_grid": list(spec.lambda_grid),
        "encoder": model.encoder.name if model.encoder is not None else None,
        "seed": cfg.seed,
        "step": int(step),
    }
    return Checkpoint(header, ckpt_io.model_tensors(model))


def save_model(path, model: ConditionalCNN, cfg: RunConfig, step: int) -> None:
    ckpt_io.save(path, build_checkpoint(model, cfg, step))


def model_from_checkpoint(ck: Checkpoint, source: str = "checkpoint") -> tuple[ConditionalCNN, RunConfig]:
    try:
        cfg = RunConfig.from_pairs(ck.header["config"])
        data = ck.header["data"]
    except KeyError as exc:
        raise CheckpointError(f"{source}: header lacks {exc}") from None
    spec_kw = dict(in_channels=data["in_channels"], image_size=data["image_size"], num_classes=data["num_classes"])
    tcfg = cfg.train_config()
    spec = replace(tcfg.model_spec(), layers=[], **spec_kw)
    with T.precision(cfg.precision):
        model = ConditionalCNN(spec, seed=tcfg.seed)
    ckpt_io.apply_tensors(model, ck.tensors, source)
    return model, cfg


def load_model(path) -> tuple[ConditionalCNN, RunConfig, Checkpoint]:
    ck = ckpt_io.load(path)
    model, cfg = model_from_checkpoint(ck, str(path))
    return model, cfg, ck


# ---------------------------------------------------------------------------
# output formats

def sweep_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([f"{p.lam:g}", f"{p.width:g}", f"{p.sa:.2f}", f"{p.ra:.2f}", p.attack,
                    f"{p.epsilon:.6g}", p.steps, p.seed])
    return buf.getvalue()


def read_sweep_csv(path) -> list[TradeoffPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TradeoffPoint(float(r["lambda"]), float(r["width"]), float(r["sa"]), float(r["ra"]), r["attack"],
                          float(r["epsilon"]), int(r["steps"]), int(r["seed"])) for r in rows]


def pgm_bytes(image_u8: np.ndarray) -> bytes:
    a = np.asarray(image_u8, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {a.shape}")
    h, w = a.shape
    return f"P5 {w} {h} 255\n".encode("ascii") + a.tobytes()


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    head, rest = buf.split(b"\n", 1)
    magic, w, h, maxval = head.split()
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(rest, dtype=np.uint8, count=int(w) * int(h)).reshape(int(h), int(w))


def _to_plane(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values)
    return v[0] if v.shape[0] == 1 else v.mean(axis=0)


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: RunConfig, quiet: bool = False) -> dict:
    train_set = load_split(cfg, "train")
    tcfg = cfg.train_config()
    rows = []

    def on_epoch(epoch, reps):
        if not reps:
            return
        rows.append([epoch, reps[-1].step + 1, f"{reps[0].lr:.6g}",
                     f"{np.mean([r.loss for r in reps]):.6f}",
                     f"{np.mean([r.loss_clean for r in reps]):.6f}",
                     f"{np.mean([r.loss_adv for r in reps]):.6f}",
                     sum(r.n_bn_c for r in reps), sum(r.n_bn_a for r in reps)])
        if not quiet:
            print(f"epoch {epoch}: loss {rows[-1][3]}", file=sys.stderr)

    with T.precision(cfg.precision):
        result = train(tcfg, train_set, on_epoch=on_epoch)
    save_model(cfg.output, result.model, cfg, result.steps)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "steps", "lr", "loss", "loss_clean", "loss_adv", "n_bn_c", "n_bn_a"])
    w.writerows(rows)
    cfg.log_path().write_text(buf.getvalue())
    return {"checkpoint": cfg.output, "log": str(cfg.log_path()), "steps": result.steps}


def cmd_sweep(checkpoint, lambdas, widths=None, attack: str = "pgd7", epsilon: float = 8 / 255,
              seed: int = 0, out=None, data_overrides: dict | None = None, count: int = 0) -> str:
    model, cfg, _ = load_model(checkpoint)
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if data_overrides:
        cfg = RunConfig.from_pairs(data_overrides, base=cfg)
    test_set = load_split(cfg, "test")
    if count:
        test_set = test_set.subset(count)
    widths = tuple(widths) if widths else (1.0,)
    spec = AttackSpec.named(attack, epsilon)
    with T.precision(cfg.precision):
        points = sweep_tradeoff(model, test_set, lambdas, widths, spec, seed)
    text = sweep_csv(points)
    if out is not None:
        Path(out).write_text(text)
    return text


def cmd_saliency(checkpoint, lambdas, count: int, outdir, width: float = 1.0,
                 data_overrides: dict | None = None) -> list[Path]:
    model, cfg, _ = load_model(checkpoint)
    if data_overrides:
        cfg = RunConfig.from_pairs(data_overrides, base=cfg)
    test_set = load_split(cfg, "test")
    if count > len(test_set):
        raise ValueError(f"count {count} exceeds the test-set size {len(test_set)}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    with T.precision(cfg.precision):
        for i in range(count):
            x, y = test_set.images[i], int(test_set.labels[i])
            orig = np.round(np.clip(_to_plane(x), 0.0, 1.0) * 255.0).astype(np.uint8)
            path = outdir / f"img{i:03d}_orig.pgm"
            path.write_bytes(pgm_bytes(orig))
            written.append(path)
            for lam in lambdas:
                sal = jacobian_saliency(model, x, y, lam, width, image_id=i)
                path = outdir / f"img{i:03d}_lam{lam:.2f}.pgm"
                path.write_bytes(pgm_bytes(normalize_u8(_to_plane(sal.values))))
                written.append(path)
    return written


def bn_mean_distance(model: ConditionalCNN, alpha: float = 1.0) -> float:
    """``||mean(bn_c) - mean(bn_a)||_2`` of the last normalisation layer at width ``alpha``."""
    pair = model.last_norm()[alpha]
    if not pair.dual:
        return 0.0
    return float(np.linalg.norm(pair.bn_c.running_mean.astype(np.float64)
                                - pair.bn_a.running_mean.astype(np.float64)))


def cmd_stats_export(checkpoint, out=None) -> dict:
    """Write every BN branch's running statistics as CSV and summarise the last layer."""
    model, cfg, _ = load_model(checkpoint)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "width", "branch", "channel", "running_mean", "running_var"])
    for name, bn in model.bn_states():
        layer, rest = name.split(".", 1)
        width, branch = rest.rsplit(".", 1)
        for c, (m, v) in enumerate(zip(bn.running_mean, bn.running_var)):
            w.writerow([layer, width[2:], branch, c, repr(float(m)), repr(float(v))])
    if out is not None:
        Path(out).write_text(buf.getvalue())
    with T.precision(cfg.precision):
        fresh = ConditionalCNN(model.spec, seed=cfg.seed)
    widths = model.spec.widths
    return {
        "last_layer": f"l{max(model.norms)}",
        "distance": {f"{a:g}": bn_mean_distance(model, a) for a in widths},
        "init_distance": {f"{a:g}": bn_mean_distance(fresh, a) for a in widths},
        "csv": buf.getvalue() if out is None else str(out),
    }


def cmd_flops(source) -> list[dict]:
    """FLOP table per configured width for a checkpoint or a run-config file."""
    p = Path(source)
    if p.read_bytes()[:8] == ckpt_io.MAGIC:
        model, _, _ = load_model(p)
        spec = model.spec
    else:
        cfg = load_run_config(p)
        spec = cfg.train_config().model_spec()
        model = ConditionalCNN(spec, seed=cfg.seed)
    rows = []
    for a in spec.widths:
        f = flops_breakdown(model, a)
        rows.append({"width": a, **f, "film_overhead": f["film"] / f["backbone"]})
    return rows


# ---------------------------------------------------------------------------
# argument handling

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oatlab", description="Trade-off-adjustable adversarial training toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("config", nargs="?", help="key=value config file")
    p.add_argument("overrides", nargs="*", help="key=value overrides")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("sweep", help="SA/RA table over lambda and width")
    p.add_argument("checkpoint")
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in S1))
    p.add_argument("--widths", default="")
    p.add_argument("--attack", default="pgd7", help="pgd7 | pgd20 | pgdN | fgsm | mifgsm")
    p.add_argument("--epsilon", default="8/255")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=0, help="evaluate only the first N test images")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="data overrides")

    p = sub.add_parser("saliency", help="write PGM saliency maps")
    p.add_argument("checkpoint")
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in S1))
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--width", default="1.0")
    p.add_argument("--outdir", default="saliency")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="data overrides")

    p = sub.add_parser("stats-export", help="dump BN running statistics per branch")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="CSV path")

    p = sub.add_parser("flops", help="multiply-add counts per width")
    p.add_argument("source", help="checkpoint or config file")

    sub.add_parser("keys", help="list config keys and defaults")
    return ap


def _fmt_default(v) -> str:
    if isinstance(v, tuple):
        return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    return f"{v:g}" if isinstance(v, float) else str(v)


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "train":
        config, overrides = args.config, list(args.overrides)
        if config is not None and "=" in config:
            config, overrides = None, [config, *overrides]
        cfg = load_run_config(config, parse_overrides(overrides))
        print(json.dumps(cmd_train(cfg, args.quiet), sort_keys=True))
    elif args.command == "sweep":
        text = cmd_sweep(args.checkpoint, parse_floats(args.lambdas), parse_floats(args.widths), args.attack,
                         parse_float(args.epsilon), args.seed, args.out, parse_overrides(args.set), args.count)
        if args.out is None:
            sys.stdout.write(text)
    elif args.command == "saliency":
        paths = cmd_saliency(args.checkpoint, parse_floats(args.lambdas), args.count, args.outdir,
                             parse_float(args.width), parse_overrides(args.set))
        print(json.dumps({"written": len(paths), "outdir": args.outdir}))
    elif args.command == "stats-export":
        summary = cmd_stats_export(args.checkpoint, args.out)
        if args.out is None:
            sys.stdout.write(summary.pop("csv"))
            print(json.dumps(summary, sort_keys=True), file=sys.stderr)
        else:
            print(json.dumps(summary, sort_keys=True))
    elif args.command == "flops":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["width", "backbone", "film", "total", "film_overhead"])
        for r in cmd_flops(args.source):
            w.writerow([f"{r['width']:g}", r["backbone"], r["film"], r["total"], f"{r['film_overhead']:.4f}"])
    elif args.command == "keys":
        for name, f in RunConfig.keys().items():
            print(f"{name}={_fmt_default(f.default)}  # {f.metadata['doc']}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, CheckpointError, IDXParseError, AttackError, ValueError, KeyError, OSError,
            T.DimensionError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
