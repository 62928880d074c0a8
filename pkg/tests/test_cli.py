import csv
import json

import numpy as np
import pytest

from rstt.cli import RunConfig, main, run_bench
from rstt.errors import ConfigError
from rstt.frames import dequantize, list_frames, load_frames, load_gray, quantize, save_frames
from rstt.model import ModelConfig, init_params
from rstt.resample import trilinear_resize
from rstt.train import OptimizerState, load_training_state, save_training_state

TINY = ModelConfig.preset("S", C=8)


@pytest.fixture(scope="module")
def init_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "init.rstt"
    save_training_state(path, TINY, init_params(TINY, seed=0), OptimizerState(), 0)
    return path


def write_quad(directory, H, W, seed=0):
    frames = np.random.default_rng(seed).uniform(0, 1, (4, 3, H, W))
    save_frames(frames, directory)
    return load_frames(directory)


def write_config(path, **kw):
    path.write_text(json.dumps(kw))
    return path


# -- config ------------------------------------------------------------------------

def test_run_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.load(write_config(tmp_path / "c.json", preset="S", depth=3))


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_json_exit_2(tmp_path):
    (tmp_path / "c.json").write_text("{preset: S")
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 2


# -- train ------------------------------------------------------------------------

def test_train_smoke(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", channels=8, iters=10, batch_size=1, hr_height=32, hr_width=32,
                       checkpoint_every=5, out=str(tmp_path / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    assert "final loss" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "run" / "loss.csv")))
    assert len(rows) == 1 + 10
    mc, params, state, it = load_training_state(tmp_path / "run" / "checkpoint.rstt")
    assert mc == TINY and it == 10 and state.step == 10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", channels=8, iters=5, batch_size=1, hr_height=32, hr_width=32,
                       lr0=1e38, out=str(tmp_path / "run"))
    assert main(["train", "--config", str(cfg)]) == 3
    assert "non-finite" in capsys.readouterr().err


# -- infer ------------------------------------------------------------------------

def test_infer_vid4_geometry_and_warm_start(tmp_path, init_ckpt):
    quad = write_quad(tmp_path / "in", 144, 180)
    assert main(["infer", "--checkpoint", str(init_ckpt), "--in", str(tmp_path / "in"),
                 "--out", str(tmp_path / "out")]) == 0
    out = load_frames(tmp_path / "out", expected=7)
    assert out.shape == (7, 3, 576, 720)
    ref = dequantize(quantize(trilinear_resize(quad, 7, 576, 720).data))
    np.testing.assert_array_equal(out, ref)


def test_infer_is_byte_identical(tmp_path, init_ckpt):
    write_quad(tmp_path / "in", 32, 48, seed=3)
    for d in ("a", "b"):
        assert main(["infer", "--checkpoint", str(init_ckpt), "--in", str(tmp_path / "in"),
                     "--out", str(tmp_path / d)]) == 0
    names = [p.name for p in list_frames(tmp_path / "a")]
    assert names == [f"frame_{i:04d}.png" for i in range(1, 8)]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_infer_wrong_frame_count_exit_2(tmp_path, init_ckpt):
    write_quad(tmp_path / "in", 32, 32)
    (tmp_path / "in" / "frame_0004.png").unlink()
    assert main(["infer", "--checkpoint", str(init_ckpt), "--in", str(tmp_path / "in"),
                 "--out", str(tmp_path / "out")]) == 2


def test_infer_size_mismatch_exit_2(tmp_path, init_ckpt):
    write_quad(tmp_path / "in", 32, 32)
    save_frames(np.zeros((1, 3, 16, 16)), tmp_path / "odd")
    (tmp_path / "odd" / "frame_0001.png").replace(tmp_path / "in" / "frame_0004.png")
    assert main(["infer", "--checkpoint", str(init_ckpt), "--in", str(tmp_path / "in"),
                 "--out", str(tmp_path / "out")]) == 2


def test_infer_missing_checkpoint_exit_2(tmp_path):
    write_quad(tmp_path / "in", 32, 32)
    assert main(["infer", "--checkpoint", str(tmp_path / "x.rstt"), "--in", str(tmp_path / "in")]) == 2


def test_png_roundtrip_lossless(tmp_path, rng):
    q = rng.integers(0, 256, (2, 3, 5, 7)).astype(np.uint8)
    save_frames(dequantize(q), tmp_path)
    np.testing.assert_array_equal(quantize(load_frames(tmp_path, expected=2)), q)


def test_quantize_round_half_up():
    np.testing.assert_array_equal(quantize([-0.2, 0.5 / 255, 1.5 / 255, 1.3]), [0, 1, 2, 255])


# -- bench ------------------------------------------------------------------------

def test_bench_csv(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", channels=8, warmup=0)
    assert main(["bench", "--config", str(cfg), "--reps", "1", "--size", "32", "--presets", "S,M",
                 "--csv", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["preset"] for r in rows] == ["S", "M"]
    assert int(rows[0]["params"]) < int(rows[1]["params"])
    assert float(rows[0]["fps"]) == pytest.approx(7 / float(rows[0]["total_s"]))
    assert "FPS" in capsys.readouterr().out


def test_bench_larger_input_is_slower():
    small, large = (run_bench(("S",), s, s, reps=2, warmup=1, channels=8)[0] for s in (32, 64))
    assert small.fps > large.fps


# -- gradcheck --------------------------------------------------------------------

def test_gradcheck_skip_model(capsys):
    assert main(["gradcheck", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "coverage 27/27" in out and "FAIL" not in out


def test_gradcheck_sabotage_exit_4(capsys):
    assert main(["gradcheck", "--skip-model", "--sabotage", "softmax"]) == 4
    assert "worst offender" in capsys.readouterr().err


# -- attention export -------------------------------------------------------------

def test_attn_dump_manifest_and_roundtrip(tmp_path, init_ckpt):
    write_quad(tmp_path / "in", 32, 32)
    assert main(["attn-dump", "--checkpoint", str(init_ckpt), "--in", str(tmp_path / "in"),
                 "--out", str(tmp_path / "attn")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "attn" / "manifest.csv")))
    heads, windows = TINY.heads, (32 // TINY.M) ** 2
    assert len(rows) == heads * windows * 7
    for r in rows[:: max(1, len(rows) // 40)]:
        img = load_gray(tmp_path / "attn" / r["file"]).astype(np.float64)
        lo, hi = float(r["min"]), float(r["max"])
        assert img.shape == (TINY.M ** 2, 4 * TINY.M ** 2)
        if hi > lo:
            assert img.min() == 0 and img.max() == 255
        np.testing.assert_allclose((lo + img / 255 * (hi - lo)).sum(1), 1.0, atol=1e-2)


def test_attn_dump_requires_mca(tmp_path):
    cfg = ModelConfig.preset("S", C=8, fusion="add")
    save_training_state(tmp_path / "a.rstt", cfg, init_params(cfg), OptimizerState(), 0)
    write_quad(tmp_path / "in", 32, 32)
    assert main(["attn-dump", "--checkpoint", str(tmp_path / "a.rstt"), "--in", str(tmp_path / "in"),
                 "--out", str(tmp_path / "o")]) == 2
