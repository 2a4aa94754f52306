import json
import os

import numpy as np
import pytest

from camixer.cli import main, window_mask_image
from camixer.imaging import make_synthetic_pair, read_image, to_uint8, write_image
from camixer.mixer import RoutingPlan
from camixer.rng import Rng

TINY = {
    "model": {"channels": 8, "window": 4, "groups": [1, 1], "scale": 2},
    "train": {"steps": 6, "batch_size": 2, "patch_size": 16, "eval_every": 3, "seed": 4},
    "data": {"synthetic_train": 4, "synthetic_val": 2, "synthetic_size": 32},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root


@pytest.fixture(scope="module")
def lr_image(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    lr, hr = make_synthetic_pair("half-split", 48, 2, Rng(3))
    path = d / "lr.ppm"
    write_image(path, to_uint8(lr))
    return path


def test_train_writes_artifacts(run_dir):
    out = run_dir / "out"
    names = set(os.listdir(out))
    assert {"manifest.json", "metrics.csv", "final.ckpt"} <= names
    assert any(n.startswith("step") for n in names)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["config_sha256"]) == 64 and manifest["code_version"]
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,l1,ratio_loss,mean_gamma,psnr_val"
    assert len(lines) == 7
    assert lines[3].split(",")[-1] != "" and lines[1].split(",")[-1] == ""


def test_train_is_deterministic(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "cfg.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "out" / "metrics.csv").read_bytes()


def test_train_override_flag(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "cfg.json"), "--out", str(tmp_path), "--train.steps=2"]) == 0
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3


def test_train_unknown_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"chanels": 8}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "model.chanels" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_train_missing_data_dir_fails_before_compute(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "data": {"train_dir": str(tmp_path / "nope")}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "nope" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_train_nan_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "train": {**TINY["train"], "lr": 1e30, "eval_every": 0}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_infer_reports_gammas_and_is_repeatable(run_dir, lr_image, tmp_path, capsys):
    ckpt = str(run_dir / "out" / "final.ckpt")
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert main(["infer", "--checkpoint", ckpt, "--input", str(lr_image), "--out", str(a), "--gamma", "0.5"]) == 0
    text = capsys.readouterr().out
    assert "block  1: gamma'=0.5000" in text and "total MACs" in text
    assert main(["infer", "--checkpoint", ckpt, "--input", str(lr_image), "--out", str(b), "--gamma", "0.5"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_image(a).shape == (48, 48, 3)


def test_infer_zero_gamma_has_no_attention(run_dir, lr_image, tmp_path, capsys):
    ckpt = str(run_dir / "out" / "final.ckpt")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(lr_image), "--out", str(tmp_path / "z.ppm"), "--gamma", "0"]) == 0
    assert "attention MACs: 0\n" in capsys.readouterr().out


def test_infer_full_gamma_matches_original_path(run_dir, lr_image, tmp_path):
    from camixer import tensor as T
    from camixer.imaging import to_float
    from camixer.network import model_from_checkpoint

    ckpt = str(run_dir / "out" / "final.ckpt")
    out = tmp_path / "o.ppm"
    assert main(["infer", "--checkpoint", ckpt, "--input", str(lr_image), "--out", str(out), "--gamma", "1.0"]) == 0
    model = model_from_checkpoint(ckpt)
    lr = to_float(read_image(lr_image))
    with T.no_grad():
        ref = model.forward(T.Tensor(lr[None]), gamma_target=1.0).image.data[0]
    np.testing.assert_array_equal(read_image(out), to_uint8(ref))


def test_infer_channel_mismatch(run_dir, tmp_path):
    gray = tmp_path / "g.pgm"
    write_image(gray, np.zeros((8, 8), np.uint8))
    ckpt = str(run_dir / "out" / "final.ckpt")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(gray), "--out", str(tmp_path / "o.ppm")]) == 3


def test_infer_bad_checkpoint(lr_image, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    assert main(["infer", "--checkpoint", str(bad), "--input", str(lr_image), "--out", str(tmp_path / "o.ppm")]) == 3


@pytest.mark.parametrize("gamma,value", [("1", 255), ("0", 0)])
def test_mask_dump_extremes(run_dir, lr_image, tmp_path, gamma, value):
    ckpt = str(run_dir / "out" / "final.ckpt")
    assert main(["mask-dump", "--checkpoint", ckpt, "--input", str(lr_image), "--out-dir", str(tmp_path), "--gamma", gamma, "--blocks", "1,2"]) == 0
    for i in (1, 2):
        m = read_image(tmp_path / f"block{i:02d}.pgm")
        assert m.shape == (24, 24, 1)
        assert np.all(m == value)


def test_mask_dump_block_out_of_range(run_dir, lr_image, tmp_path):
    ckpt = str(run_dir / "out" / "final.ckpt")
    assert main(["mask-dump", "--checkpoint", ckpt, "--input", str(lr_image), "--out-dir", str(tmp_path), "--blocks", "3"]) == 2


def test_window_mask_fill():
    plan = RoutingPlan(np.array([1, 2]), np.array([0, 3]), 2, 0.5, "infer-topk")
    m = window_mask_image(plan, 6, 8, 4)
    assert m.shape == (6, 8)
    np.testing.assert_array_equal(m[:4, :4], 0)
    np.testing.assert_array_equal(m[:4, 4:], 255)
    np.testing.assert_array_equal(m[4:, :4], 255)


def test_flops_command(tmp_path, capsys):
    js = tmp_path / "f.json"
    assert main(["flops", "--gamma", "0.5", "--json", str(js)]) == 0
    out = capsys.readouterr().out
    assert "ratio gamma=0.5 / gamma=1:" in out
    doc = json.loads(js.read_text())
    assert doc["totals"]["analytic_flops"] == pytest.approx(sum(r["analytic_flops"] for r in doc["rows"]))


def test_flops_small_measured(tmp_path, capsys):
    assert main(["flops", "--gamma", "0.5", "--resolution", "32x32", "--measure", "--flops",
                 "--model.channels=8", "--model.window=4", "--model.groups=[1]", "--model.scale=2"]) == 0
    assert "FLOPs" in capsys.readouterr().out


def _write_dir(d, imgs):
    d.mkdir()
    for name, img in imgs.items():
        write_image(d / name, img)


def test_eval_identical_dirs(tmp_path, capsys):
    r = np.random.default_rng(0)
    imgs = {f"{i}.ppm": r.integers(0, 256, (24, 24, 3), dtype=np.uint8) for i in range(2)}
    _write_dir(tmp_path / "hr", imgs)
    js = tmp_path / "e.json"
    assert main(["eval", "--hr-dir", str(tmp_path / "hr"), "--pred-dir", str(tmp_path / "hr"), "--ws", "--json", str(js)]) == 0
    mean = json.loads(js.read_text())["mean"]
    assert mean["psnr"] == 100.0 and mean["ssim"] == pytest.approx(1.0)
    assert mean["ws_psnr"] == 100.0


def test_eval_lists_missing_pairs(tmp_path, capsys):
    r = np.random.default_rng(1)
    _write_dir(tmp_path / "hr", {n: r.integers(0, 256, (16, 16, 3), dtype=np.uint8) for n in ("a.ppm", "b.ppm", "c.ppm")})
    _write_dir(tmp_path / "pred", {"a.ppm": np.zeros((16, 16, 3), np.uint8)})
    assert main(["eval", "--hr-dir", str(tmp_path / "hr"), "--pred-dir", str(tmp_path / "pred")]) == 3
    assert "b.ppm, c.ppm" in capsys.readouterr().err


def test_eval_checkpoint_with_tiles(run_dir, tmp_path):
    r = Rng(8)
    imgs = {}
    for i in range(2):
        _, hr = make_synthetic_pair("texture", 48, 2, r)
        imgs[f"{i}.ppm"] = to_uint8(hr)
    _write_dir(tmp_path / "hr", imgs)
    ckpt = str(run_dir / "out" / "final.ckpt")
    js = tmp_path / "e.json"
    assert main(["eval", "--hr-dir", str(tmp_path / "hr"), "--checkpoint", ckpt, "--tile", "16", "--overlap", "2",
                 "--jobs", "2", "--json", str(js)]) == 0
    doc = json.loads(js.read_text())
    assert doc["tile"] == 16 and len(doc["images"]) == 2


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval", "--hr-dir", "x", "--bogus"]) == 2
