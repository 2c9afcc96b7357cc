import json
import math

import numpy as np
import pytest

from ivvae import io
from ivvae.cli import COMMANDS, EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, run_command
from ivvae.motion import MotionRecord


def run(capsys, *argv):
    code = run_command([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == EXIT_OK and out else None)


def clip(T=9, h=16, w=16, seed=0):
    return (np.random.default_rng(seed).random((3, T, h, w)) * 2 - 1).astype(np.float32)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text("model:\n  base_channels: 8\ntrain:\n  batch: 1\n")
    io.write_raw_video(d / "clip.ivv", clip())
    return d


@pytest.fixture(scope="module")
def image_ckpt(workdir):
    code = run_command(["train-image", "--config", str(workdir / "tiny.yaml"), "--z", "4",
                        "--resolution", "16x16", "--steps", "2", "--seed", "0",
                        "--out", str(workdir / "image.ckpt")])
    assert code == EXIT_OK
    return workdir / "image.ckpt"


@pytest.fixture(scope="module")
def video_ckpt(workdir, image_ckpt):
    out = workdir / "iv.ckpt"
    assert run_command(["inflate", "--model", str(image_ckpt), "--variant", "ivvae", "--out", str(out)]) == EXIT_OK
    return out


def test_help_lists_every_flag(capsys):
    assert run_command(["--help"]) == EXIT_OK
    top = capsys.readouterr().out
    for c in COMMANDS:
        assert c in top
    help_text = build_parser()._subparsers._group_actions[0].choices["reconstruct"].format_help()
    for flag in ("--model", "--config", "--in", "--out", "--seed", "--deterministic", "--mode",
                 "--clip-len", "--frames", "--resolution", "--z", "--variant", "--frame-interval",
                 "--bins", "--n", "--steps", "--recon"):
        assert flag in help_text


def test_usage_errors(capsys, workdir):
    assert run_command(["no-such-command"]) == EXIT_USAGE
    assert run_command(["encode", "--bogus"]) == EXIT_USAGE
    assert run_command(["encode", "--in", str(workdir / "clip.ivv")]) == EXIT_USAGE
    assert run_command(["reconstruct", "--resolution", "16by16"]) == EXIT_USAGE


def test_data_errors(capsys, workdir, video_ckpt):
    assert run_command(["encode", "--model", str(workdir / "none.ckpt"), "--in", str(workdir / "clip.ivv"),
                        "--out", str(workdir / "z.ivv")]) == EXIT_DATA
    io.write_raw_video(workdir / "bad.ivv", clip(T=8))
    assert run_command(["encode", "--model", str(video_ckpt), "--in", str(workdir / "bad.ivv"),
                        "--out", str(workdir / "z.ivv")]) == EXIT_DATA
    io.write_raw_video(workdir / "other.ivv", clip(T=5))
    assert run_command(["eval", "--in", str(workdir / "clip.ivv"), "--recon", str(workdir / "other.ivv")]) == EXIT_DATA


def test_train_image_writes_loss_log(workdir, image_ckpt):
    rows = io.read_loss_log(workdir / "image.ckpt.losses.csv")
    assert [r["step"] for r in rows] == [0, 1]
    assert io.Checkpoint.load(image_ckpt).config["variant"] == "image"


def test_inflate_variants(capsys, image_ckpt, workdir):
    code, res = run(capsys, "inflate", "--model", image_ckpt, "--variant", "ivvae", "--out", workdir / "a.ckpt")
    assert code == EXIT_OK and res["variant"] == "iv-vae" and res["z"] == 8
    code, res = run(capsys, "inflate", "--model", image_ckpt, "--variant", "gcconv", "--out", workdir / "b.ckpt")
    assert code == EXIT_OK and res["variant"] == "baseline-gc" and res["z"] == 4
    assert run_command(["inflate", "--out", str(workdir / "c.ckpt")]) == EXIT_USAGE


def test_train_video(capsys, workdir, video_ckpt):
    code, res = run(capsys, "train-video", "--model", video_ckpt, "--config", workdir / "tiny.yaml",
                    "--frames", 5, "--resolution", "16x16", "--steps", 1, "--seed", 0,
                    "--out", workdir / "trained.ckpt")
    assert code == EXIT_OK and res["steps"] == 1 and math.isfinite(res["final_total"])
    assert len(io.read_loss_log(workdir / "trained.ckpt.losses.csv")) == 1


def test_encode_decode_shapes(capsys, workdir, video_ckpt):
    code, res = run(capsys, "encode", "--model", video_ckpt, "--in", workdir / "clip.ivv", "--out", workdir / "z.ivv")
    assert code == EXIT_OK and res["shape"] == [8, 3, 2, 2]
    code, res = run(capsys, "decode", "--model", video_ckpt, "--in", workdir / "z.ivv", "--out", workdir / "y.ivv")
    assert code == EXIT_OK and res["shape"] == [3, 9, 16, 16]
    assert io.read_raw_video(workdir / "y.ivv").shape == (3, 9, 16, 16)


def test_cache_reconstruct_matches_single(capsys, workdir, video_ckpt):
    code, _ = run(capsys, "reconstruct", "--model", video_ckpt, "--in", workdir / "clip.ivv", "--out", workdir / "s.ivv")
    assert code == EXIT_OK
    code, res = run(capsys, "stream-reconstruct", "--model", video_ckpt, "--in", workdir / "clip.ivv",
                    "--out", workdir / "c.ivv")
    assert code == EXIT_OK and res["chunks"] == 3
    a, b = io.read_raw_video(workdir / "s.ivv"), io.read_raw_video(workdir / "c.ivv")
    assert np.abs(a - b).max() <= 1e-5
    assert (workdir / "c.ivv.metrics.json").exists()
    code, res = run(capsys, "reconstruct", "--mode", "overlap", "--clip-len", 5, "--model", video_ckpt,
                    "--in", workdir / "clip.ivv", "--out", workdir / "o.ivv")
    assert code == EXIT_OK and res["chunks"] == 2
    assert run_command(["reconstruct", "--mode", "overlap", "--model", str(video_ckpt),
                        "--in", str(workdir / "clip.ivv"), "--out", str(workdir / "o.ivv")]) == EXIT_USAGE


def test_cache_dir_env(capsys, monkeypatch, tmp_path, workdir, video_ckpt):
    monkeypatch.setenv("IVVAE_CACHE_DIR", str(tmp_path / "cache"))
    code, res = run(capsys, "reconstruct", "--model", video_ckpt, "--in", workdir / "clip.ivv",
                    "--out", tmp_path / "r.ivv")
    assert code == EXIT_OK and (tmp_path / "cache" / "r.ivv.metrics.json").exists()


def test_eval_identical_files(capsys, workdir):
    code, res = run(capsys, "eval", "--in", workdir / "clip.ivv", "--recon", workdir / "clip.ivv",
                    "--out", workdir / "e.json")
    assert code == EXIT_OK
    assert res["psnr"] in ("inf", math.inf) and res["ssim"] == pytest.approx(1.0)
    assert res["info_preservation"] == 1.0


def test_per_frame_profile(capsys, workdir):
    code, res = run(capsys, "per-frame-profile", "--in", workdir / "clip.ivv", "--recon", workdir / "clip.ivv",
                    "--out", workdir / "p.csv")
    assert code == EXIT_OK and res["per_position_ssim"] == pytest.approx([1, 1, 1, 1])
    assert len((workdir / "p.csv").read_text().splitlines()) == 5


def test_motion_score_and_curate(capsys, tmp_path):
    vids = tmp_path / "vids"
    vids.mkdir()
    base = np.random.default_rng(0).random((32, 48))
    for i, du in enumerate([0, 0, 1, 1]):
        frames = np.stack([np.roll(base, t * du, axis=1) for t in range(3)])
        io.write_raw_video(vids / f"v{i}.ivv", np.repeat(frames[None], 3, 0) * 2 - 1)
    code, res = run(capsys, "motion-score", "--in", vids, "--out", tmp_path / "m.csv")
    assert code == EXIT_OK and [r["id"] for r in res["records"]] == ["v0", "v1", "v2", "v3"]
    assert res["records"][0]["score"] == 0.0 and res["records"][2]["score"] > 0
    code, res = run(capsys, "curate", "--in", tmp_path / "m.csv", "--n", 2, "--seed", 1,
                    "--bins", "0,1e-9,inf", "--out", tmp_path / "sel.txt")
    assert code == EXIT_OK and len(res["selected"]) == 2
    assert (tmp_path / "sel.txt").read_text().split() == res["selected"]
    assert sum(i in ("v0", "v1") for i in res["selected"]) == 1
    assert run_command(["curate", "--in", str(tmp_path / "m.csv"), "--n", "9"]) == EXIT_DATA


def test_compare(capsys, tmp_path, workdir):
    from ivvae.metrics import MetricsReport, write_report

    write_report(tmp_path / "a.json", [MetricsReport(30.0, 0.9, 0.8, [0.9] * 4, 1)])
    write_report(tmp_path / "b.json", [MetricsReport(28.0, 0.8, 0.7, [0.8] * 4, 1)])
    log = io.LossLog(tmp_path / "l.csv")
    for s in range(3):
        log.append({"step": s, "mae": 1.0, "kl": 0.0, "perceptual": 0.0, "total": 1.0 / (s + 1)})
    code, res = run(capsys, "compare", "--reports", tmp_path / "a.json", tmp_path / "b.json",
                    "--logs", tmp_path / "l.csv", "--out", tmp_path / "cmp")
    assert code == EXIT_OK
    assert len((tmp_path / "cmp" / "metrics_table.csv").read_text().splitlines()) == 3
    assert (tmp_path / "cmp" / "loss_curves.csv").exists()
    assert run_command(["compare", "--out", str(tmp_path / "cmp")]) == EXIT_USAGE


def test_motion_record_written_by_cli_reads_back(tmp_path):
    io.write_motion_csv(tmp_path / "m.csv", [MotionRecord("x", 1.5)])
    assert run_command(["curate", "--in", str(tmp_path / "m.csv"), "--n", "1"]) == EXIT_OK
