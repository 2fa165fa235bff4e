import csv
import math

import numpy as np
import pytest

from uformer import checkpoint, cli, tensor as T
from uformer.accounting import count_macs
from uformer.config import load
from uformer.io import read_png, write_png
from uformer.metrics import psnr, rgb_to_y

TINY_TRAIN = """\
model.base_channels = 8
model.stages = 2
model.encoder_depths = 1,1
model.window = 4
train.total_steps = {steps}
train.batch_size = 2
train.patch_size = 16
train.num_patches = 4
train.val_patches = 2
train.val_every = 2
train.checkpoint_every = 2
train.lr_start = 1e-3
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_count_bundled_t(tmp_path, capsys):
    code, out, _ = run(capsys, "count", "--config", "uformer-t", "--out", tmp_path / "t.csv")
    assert code == 0
    rep = count_macs(load("uformer-t").model)
    assert f"{rep.params:,}" in out and f"{rep.macs:,}" in out
    assert "assumptions:" in out
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[-1] == ["total", str(rep.params), str(rep.macs)]
    assert (tmp_path / "t.png").stat().st_size > 0


def test_count_bundled_b_rows_sum(tmp_path, capsys):
    code, _, _ = run(capsys, "count", "--config", "uformer-b", "--out", tmp_path / "b.csv")
    assert code == 0
    rows = list(csv.reader((tmp_path / "b.csv").open()))[1:]
    body, total = rows[:-1], rows[-1]
    assert sum(int(r[1]) for r in body) == int(total[1])
    assert sum(int(r[2]) for r in body) == int(total[2])


def test_count_missing_file(capsys, tmp_path):
    missing = tmp_path / "absent.cfg"
    code, _, err = run(capsys, "count", "--config", missing)
    assert code == 2 and str(missing) in err


def test_bad_config_and_usage(capsys, tmp_path):
    code, _, err = run(capsys, "count", "--config", write_cfg(tmp_path, "model.colour = 3\n"))
    assert code == 2 and "model.colour" in err
    assert run(capsys, "nonsense")[0] == 2


def test_gradcheck_passes_and_is_deterministic(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", "tiny", "--seed", "3")
    assert code == 0
    assert "uformer_tiny" in out and "conv2d" in out
    code2, out2, _ = run(capsys, "gradcheck", "--config", "tiny", "--seed", "3")
    assert (code2, out2) == (code, out)


def test_gradcheck_detects_corrupted_adjoint(capsys, monkeypatch):
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        back = out._backward
        out._backward = lambda g: tuple(1.1 * b for b in back(g))
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    code, out, _ = run(capsys, "gradcheck")
    assert code == 1
    assert "failing:" in out and "gelu" in out.split("failing:")[1]


def test_build_identity_then_infer(tmp_path, capsys, rng):
    ck = tmp_path / "id.uft"
    assert run(capsys, "build", "--config", "tiny", "--zero-output", "--out", ck)[0] == 0
    img = np.round(rng.uniform(0, 1, (3, 20, 24)) * 255) / 255
    write_png(tmp_path / "in.png", img)
    code, out, _ = run(capsys, "infer", ck, tmp_path / "in.png", tmp_path / "out.png")
    assert code == 0 and "tiles: 1" in out
    np.testing.assert_array_equal(read_png(tmp_path / "out.png"), img)
    code, out, _ = run(capsys, "infer", ck, tmp_path / "in.png", tmp_path / "out2.png", "--tile", 8, "--overlap", 2)
    assert code == 0 and "tiles: 12 " in out  # 3 rows x 4 columns
    np.testing.assert_array_equal(read_png(tmp_path / "out2.png"), img)


def test_infer_below_minimum(tmp_path, capsys):
    ck = tmp_path / "m.uft"
    run(capsys, "build", "--config", "uformer-t", "--out", ck)
    write_png(tmp_path / "small.png", np.zeros((3, 10, 10)))
    code, _, err = run(capsys, "infer", ck, tmp_path / "small.png", tmp_path / "o.png")
    assert code == 2 and "minimum" in err


def _pairs(tmp_path, rng, n=3, size=24):
    for sub in ("clean", "degraded"):
        (tmp_path / sub).mkdir(exist_ok=True)
    clean_imgs = []
    for i in range(n):
        clean = np.round(rng.uniform(0.2, 0.8, (3, size, size)) * 255) / 255
        noisy = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
        noisy[0] = np.clip(noisy[0] + 0.1, 0, 1)  # chromatic shift
        write_png(tmp_path / "clean" / f"{i}.png", clean)
        write_png(tmp_path / "degraded" / f"{i}.png", noisy)
        clean_imgs.append(clean)
    return clean_imgs


def test_eval_self_is_perfect(tmp_path, capsys, rng):
    _pairs(tmp_path, rng)
    code, out, _ = run(capsys, "eval", "none", tmp_path, "--degraded-dir", tmp_path / "clean", "--out", tmp_path / "e.csv")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "e.csv").open()))
    assert all(float(r["psnr"]) == math.inf and float(r["ssim"]) == 1.0 for r in rows)
    assert (tmp_path / "e.png").exists()


def test_eval_identity_checkpoint_equals_baseline(tmp_path, capsys, rng):
    _pairs(tmp_path, rng)
    ck = tmp_path / "id.uft"
    run(capsys, "build", "--config", "tiny", "--zero-output", "--out", ck)
    run(capsys, "eval", "none", tmp_path, "--out", tmp_path / "base.csv")
    run(capsys, "eval", ck, tmp_path, "--out", tmp_path / "id.csv")
    assert (tmp_path / "base.csv").read_text() == (tmp_path / "id.csv").read_text()


def test_eval_y_channel(tmp_path, capsys, rng):
    _pairs(tmp_path, rng, n=1)
    run(capsys, "eval", "none", tmp_path, "--out", tmp_path / "rgb.csv")
    run(capsys, "eval", "none", tmp_path, "--y-channel", "--out", tmp_path / "y.csv")
    rgb = next(csv.DictReader((tmp_path / "rgb.csv").open()))
    y = next(csv.DictReader((tmp_path / "y.csv").open()))
    assert rgb["psnr"] != y["psnr"]
    clean = read_png(tmp_path / "clean" / "0.png")
    noisy = read_png(tmp_path / "degraded" / "0.png")
    assert float(y["psnr"]) == psnr(rgb_to_y(noisy), rgb_to_y(clean))


def test_eval_unpaired_file(tmp_path, capsys, rng):
    _pairs(tmp_path, rng, n=2)
    (tmp_path / "degraded" / "1.png").rename(tmp_path / "degraded" / "9.png")
    code, _, err = run(capsys, "eval", "none", tmp_path)
    assert code == 2 and "1.png" in err


def test_train_zero_steps_equals_init(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_TRAIN.format(steps=0))
    code, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "o", "--seed", 5)
    assert code == 0
    params, state = checkpoint.load(tmp_path / "o" / "checkpoint.uft")
    from uformer.model import build, tiny_config

    init = build(tiny_config(), seed=5).state_dict()
    assert state.step == 0
    assert all(params.state_dict()[k].tobytes() == v.tobytes() for k, v in init.items())


def test_train_writes_artifacts_and_resumes(tmp_path, capsys):
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "train", "--config", write_cfg(tmp_path, TINY_TRAIN.format(steps=2)), "--out", out, "--deterministic")
    assert code == 0 and "steps=2" in stdout
    assert (out / "metrics.csv").read_text().startswith("step,lr,loss,val_psnr\n")
    assert (out / "training.png").exists()
    cfg4 = write_cfg(tmp_path, TINY_TRAIN.format(steps=4), "four.cfg")
    code, stdout, _ = run(capsys, "train", "--config", cfg4, "--out", tmp_path / "r", "--resume", out / "checkpoint.uft")
    assert code == 0 and "at step 2" in stdout and "steps=4" in stdout
    steps = [line.split(",")[0] for line in (tmp_path / "r" / "metrics.csv").read_text().splitlines()[1:]]
    assert steps == ["2", "3"]


def test_train_deterministic_logs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("UFORMER_THREADS", "0")
    cfg = write_cfg(tmp_path, TINY_TRAIN.format(steps=3))
    for d in ("a", "b"):
        assert run(capsys, "train", "--config", cfg, "--out", tmp_path / d, "--deterministic", "--seed", 2)[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_non_finite_keeps_last_checkpoint(tmp_path, capsys, monkeypatch):
    out = tmp_path / "o"
    cfg = write_cfg(tmp_path, TINY_TRAIN.format(steps=6))
    import uformer.train as train_mod

    real = train_mod.charbonnier_loss
    calls = {"n": 0}

    def flaky(pred, target, epsilon):
        calls["n"] += 1
        loss = real(pred, target, epsilon)
        if calls["n"] == 4:
            loss.data = np.asarray(np.nan, dtype=loss.dtype)
        return loss

    monkeypatch.setattr(train_mod, "charbonnier_loss", flaky)
    code, _, err = run(capsys, "train", "--config", cfg, "--out", out)
    assert code == 1 and "non-finite" in err
    _, state = checkpoint.load(out / "checkpoint.uft")
    assert state.step == 2


def test_f64_flag(tmp_path, capsys):
    ck = tmp_path / "d.uft"
    assert run(capsys, "build", "--config", "tiny", "--f64", "--out", ck)[0] == 0
    params, _ = checkpoint.load(ck)
    assert params.input_proj.w.dtype == np.float64
