import json
import math
import struct

import numpy as np
import pytest

from oatlab import checkpoint as ckpt_io
from oatlab import cli
from oatlab.checkpoint import Checkpoint, CheckpointError
from oatlab.cli import ConfigError, RunConfig

TINY = [
    "train_per_class=4", "test_per_class=2", "image_size=8", "channels=4,6", "encoder=DCT-8",
    "batch_size=10", "max_steps=2", "steps=2",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny OATS checkpoint shared by the read-only tests below."""
    d = tmp_path_factory.mktemp("run")
    cfg_path = d / "run.cfg"
    cfg_path.write_text("# tiny slimmable run\nmode = oats\nwidths = 0.5, 0.75, 1.0  # three widths\n"
                        + "\n".join(TINY) + f"\noutput={d / 'model.ckpt'}\n")
    assert cli.main(["train", str(cfg_path), "--quiet"]) == 0
    return d / "model.ckpt", cfg_path


# ---- config ---------------------------------------------------------------

def test_defaults_carry_the_standard_constants():
    cfg = RunConfig()
    assert cfg.epsilon == 8 / 255 and cfg.step_size == 2 / 255 and cfg.steps == 7
    assert (cfg.momentum, cfg.weight_decay, cfg.encoder) == (0.9, 5e-4, "RO-128")
    assert cfg.lambdas == (0.0, 0.1, 0.2, 0.3, 0.4, 1.0)


def test_every_key_is_documented():
    for name, f in RunConfig.keys().items():
        assert f.metadata["doc"], name


def test_config_text_parsing():
    pairs = cli.parse_config_text("# header\n\nmode = pgd_at  # baseline\nepsilon=4/255\n")
    assert pairs == {"mode": "pgd_at", "epsilon": "4/255"}
    cfg = RunConfig.from_pairs(pairs)
    assert cfg.mode == "pgd_at" and cfg.epsilon == pytest.approx(4 / 255)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_pairs({"learning_rate": "0.1"})


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match=":2:"):
        cli.parse_config_text("mode=oat\njust words\n")


def test_bad_values_rejected():
    for pairs in ({"epochs": "ten"}, {"random_start": "maybe"}, {"precision": "16"}, {"epsilon": "1/0"}):
        with pytest.raises(ConfigError):
            RunConfig.from_pairs(pairs)


def test_train_config_mapping():
    tc = RunConfig.from_pairs({"mode": "oats", "widths": "0.5,1", "attack": "mifgsm", "steps": "10"}).train_config()
    assert tc.width_list == (0.5, 1.0)
    assert tc.attack.kind == "mifgsm" and tc.attack.iters == 10
    assert RunConfig.from_pairs({"attack": "fgsm"}).train_config().attack.step == pytest.approx(8 / 255)


# ---- checkpoint format ----------------------------------------------------

def test_checkpoint_layout(tmp_path):
    ck = Checkpoint({"b": 1, "a": [0.5]}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    buf = ckpt_io.dumps(ck)
    assert buf[:8] == b"OATCKPT1"
    (hlen,) = struct.unpack("<Q", buf[8:16])
    assert json.loads(buf[16:16 + hlen]) == {"a": [0.5], "b": 1}
    rec = buf[16 + hlen:]
    assert struct.unpack("<I", rec[:4]) == (1,) and rec[4:5] == b"w"
    assert struct.unpack("<BBII", rec[5:15]) == (1, 2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(rec[15:], "<f4"), np.arange(6))


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 2)).astype(np.float32), "b": rng.standard_normal(4),
               "c": np.array(7.0), "n": np.arange(3, dtype=np.int64)}
    ckpt_io.save(tmp_path / "x", Checkpoint({"seed": 3}, tensors))
    back = ckpt_io.load(tmp_path / "x")
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    ckpt_io.save(tmp_path / "y", back)
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()


def test_bad_magic_names_expected(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError, match="OATCKPT1"):
        ckpt_io.load(tmp_path / "x")


@pytest.mark.parametrize("cut", [5, 12, 30, -1])
def test_truncation_detected(cut):
    buf = ckpt_io.dumps(Checkpoint({"k": 1}, {"w": np.ones((2, 2))}))
    with pytest.raises(CheckpointError):
        ckpt_io.loads(buf[:cut])


def test_model_round_trip(trained, tmp_path):
    path, _ = trained
    model, cfg, ck = cli.load_model(path)
    assert ck.step == 2 and cfg.mode == "oats"
    cli.save_model(tmp_path / "again.ckpt", model, cfg, ck.step)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_load_validates_shapes(trained, tmp_path):
    path, _ = trained
    ck = ckpt_io.load(path)
    name = next(k for k in ck.tensors if k.endswith(".weight"))
    ck.tensors[name] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(CheckpointError, match="shape"):
        cli.model_from_checkpoint(ck)
    del ck.tensors[name]
    with pytest.raises(CheckpointError, match="missing"):
        cli.model_from_checkpoint(ck)


# ---- commands -------------------------------------------------------------

def test_train_writes_epoch_log(trained):
    path, _ = trained
    rows = (path.parent / "model.ckpt.log.csv").read_text().splitlines()
    assert rows[0] == "epoch,steps,lr,loss,loss_clean,loss_adv,n_bn_c,n_bn_a"
    assert len(rows) == 2


def test_sweep_csv_format_and_determinism(trained, tmp_path):
    path, _ = trained
    before = path.read_bytes()
    args = ["sweep", str(path), "--lambdas", "0,0.1,1", "--widths", "0.5,1", "--attack", "fgsm"]
    assert cli.main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "lambda,width,sa,ra,attack,epsilon,steps,seed"
    assert len(lines) == 7
    sa = lines[1].split(",")[2]
    assert len(sa.split(".")[1]) == 2
    assert path.read_bytes() == before
    pts = cli.read_sweep_csv(tmp_path / "a.csv")
    assert [(p.lam, p.width) for p in pts][:3] == [(0.0, 0.5), (0.1, 0.5), (1.0, 0.5)]


def test_sweep_rejects_bad_lambda(trained, capsys):
    path, _ = trained
    assert cli.main(["sweep", str(path), "--lambdas", "0,1.5"]) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValueError" and "1.5" in err["message"]


def test_saliency_files(trained, tmp_path):
    path, _ = trained
    out = tmp_path / "sal"
    assert cli.main(["saliency", str(path), "--lambdas", "0,0.1,0.2,0.3,0.4,1", "--count", "2",
                     "--outdir", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert len(files) == 2 * 6 + 2
    raw = (out / "img000_lam0.00.pgm").read_bytes()
    assert raw.startswith(b"P5 8 8 255\n") and len(raw) == len(b"P5 8 8 255\n") + 64
    img = cli.read_pgm(out / "img001_orig.pgm")
    assert img.shape == (8, 8)


def test_saliency_count_guard(trained, tmp_path):
    path, _ = trained
    with pytest.raises(ValueError):
        cli.cmd_saliency(path, (0.0,), 10_000, tmp_path)


def test_pgm_header_for_desk_images():
    assert cli.pgm_bytes(np.zeros((16, 16), np.uint8))[:12] == b"P5 16 16 255"


def test_stats_export(trained, tmp_path):
    path, _ = trained
    summary = cli.cmd_stats_export(path, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "layer,width,branch,channel,running_mean,running_var"
    # two norm layers, three widths, two branches; channels 4 and 6 at full width
    per_layer = [sum(math.ceil(a * c) for a in (0.5, 0.75, 1.0)) * 2 for c in (4, 6)]
    assert len(rows) - 1 == sum(per_layer)
    assert {k: v for k, v in summary["init_distance"].items()} == {"0.5": 0.0, "0.75": 0.0, "1": 0.0}
    assert summary["distance"]["1"] > 0


def test_flops_command(trained, capsys):
    path, cfg_path = trained
    assert cli.main(["flops", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "width,backbone,film,total,film_overhead"
    totals = [int(l.split(",")[3]) for l in lines[1:]]
    assert totals == sorted(totals) and len(set(totals)) == 3
    assert cli.main(["flops", str(cfg_path)]) == 0


def test_invalid_config_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("mode=oat\nlearning_rate=0.1\n")
    assert cli.main(["train", str(cfg)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_idx_files(tmp_path, capsys):
    assert cli.main(["train", "dataset=idx", f"train_images={tmp_path / 'nope'}", f"train_labels={tmp_path / 'x'}",
                     f"output={tmp_path / 'm.ckpt'}"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and "nope" in err["message"]


def test_training_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        assert cli.main(["train", *TINY, "mode=oat", f"output={tmp_path / name}.ckpt", "--quiet"]) == 0
        outs.append((tmp_path / f"{name}.ckpt").read_bytes())
    # the output path is part of the stored config, so compare everything after it
    a, b = (ckpt_io.loads(o) for o in outs)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
