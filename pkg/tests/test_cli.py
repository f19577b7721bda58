import json

import numpy as np
import pytest

from kwsattn.audio_io import AudioClip, encode_wav, read_wav
from kwsattn.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from kwsattn.dsp import log_mel
from kwsattn.model import AttentionTrace
from kwsattn.plotting import ATTN_FLOOR, attention_figure, render_attention_svg
from kwsattn.training import save_checkpoint


@pytest.fixture(scope="module")
def toy_ckpt(toy_run, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "toy.ckpt"
    save_checkpoint(path, toy_run.best)
    return path


def test_params_table(capsys):
    assert main(["params", "--task", "cmd12"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["layer", "params"]
    assert out[-1].split() == ["total", "200,433"]
    assert any(line.split() == ["bilstm1", "74,240"] for line in out)


def test_params_config_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"lstm_hidden": 32, "query_dim": 64}}))
    assert main(["params", "--task", "left_right", "--config", str(cfg)]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1].split()[0] == "total"


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["params"], ["params", "--task", "cmd99"],
                                  ["infer", "--checkpoint", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"n_layers": 3}}))
    assert main(["params", "--task", "cmd12", "--config", str(cfg)]) == EXIT_DATA
    cfg.write_text(json.dumps({"optimizer": {}}))
    assert main(["params", "--task", "cmd12", "--config", str(cfg)]) == EXIT_USAGE


def test_data_errors(tmp_path, toy_ckpt, capsys):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF....WAVEjunk")
    assert main(["infer", "--checkpoint", str(toy_ckpt), "--wav", str(bad)]) == EXIT_DATA
    assert main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), "--wav", str(bad)]) == EXIT_DATA
    assert main(["manifest", "--data-root", str(tmp_path), "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert "DecodeError" in capsys.readouterr().err


def test_manifest(toy_root, tmp_path, capsys):
    assert main(["manifest", "--data-root", str(toy_root), "--out-dir", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "path,label,split" and len(lines) == 17
    assert "16 entries" in capsys.readouterr().out


def test_infer(toy_root, toy_ckpt, capsys):
    wav = toy_root / "right" / "spk03_nohash_0.wav"
    assert main(["infer", "--checkpoint", str(toy_ckpt), "--wav", str(wav)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "right"
    probs = dict(line.split("\t") for line in out[1:])
    assert list(probs) == ["left", "right", "other"]
    assert abs(sum(float(p) for p in probs.values()) - 1) < 1e-5


def test_eval_toy_overfit_is_perfect(toy_root, toy_ckpt, tmp_path, capsys):
    argv = ["eval", "--data-root", str(toy_root), "--checkpoint", str(toy_ckpt), "--out-dir", str(tmp_path),
            "--split", "all"]
    assert main(argv) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["overall_accuracy"] == 1.0 and report["n_samples"] == 16
    assert (tmp_path / "confusion.csv").read_text().startswith("true\\predicted,left,right,other")
    assert (tmp_path / "confusion.svg").read_bytes().lstrip().startswith(b"<?xml")
    assert "accuracy 1.0000 (1) on 16 clips" in capsys.readouterr().out


def test_eval_task_mismatch(toy_root, toy_ckpt, tmp_path):
    argv = ["eval", "--data-root", str(toy_root), "--checkpoint", str(toy_ckpt), "--out-dir", str(tmp_path),
            "--task", "cmd12"]
    assert main(argv) == EXIT_DATA


def test_attend_outputs(toy_root, toy_ckpt, tmp_path):
    wav = toy_root / "left" / "spk02_nohash_0.wav"
    assert main(["attend", "--checkpoint", str(toy_ckpt), "--wav", str(wav), "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "spk02_nohash_0_attention.csv").read_text().splitlines()
    assert lines[0] == "# predicted=left"
    rows = [line.split(",") for line in lines[3:]]
    assert len(rows) == 126
    assert abs(sum(float(r[2]) for r in rows) - 1) < 1e-5
    assert float(rows[-1][1]) == pytest.approx(125 * 0.008)
    first = (tmp_path / "spk02_nohash_0_attention.svg").read_bytes()
    assert b"<svg" in first
    assert main(["attend", "--checkpoint", str(toy_ckpt), "--wav", str(wav), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "spk02_nohash_0_attention.svg").read_bytes() == first


def test_train_is_byte_reproducible(toy_root, tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["train", "--data-root", str(toy_root), "--task", "left_right", "--out-dir", str(out),
                "--seed", "3", "--max-epochs", "2", "--batch-size", "8"]
        assert main(argv) == EXIT_OK
        outs.append({name: (out / name).read_bytes() for name in ("model.ckpt", "history.csv", "history.svg")})
    assert outs[0] == outs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure_exit_code(toy_root, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr0": 1e30, "max_epochs": 3, "patience": 3}}))
    argv = ["train", "--data-root", str(toy_root), "--task", "left_right", "--out-dir", str(tmp_path),
            "--config", str(cfg), "--batch-size", "8"]
    assert main(argv) == EXIT_NUMERIC
    assert (tmp_path / "last_good.ckpt").exists()


class TestFigures:
    def trace(self, weights):
        return AttentionTrace(np.asarray(weights, dtype=np.float64), 63, 0, np.zeros(3))

    def test_time_axis_spans_the_clip(self):
        clip = AudioClip(np.zeros(16000))
        fig = attention_figure(clip, log_mel(clip), self.trace(np.full(126, 1 / 126)))
        axes = fig.get_axes()
        assert len(axes) == 3
        assert axes[2].get_xlim() == (0.0, 1.0)
        assert axes[2].get_yscale() == "log"

    def test_zero_weights_are_floored(self, tmp_path):
        clip = AudioClip(np.zeros(16000))
        w = np.zeros(126)
        w[63] = 1.0
        fig = attention_figure(clip, log_mel(clip), self.trace(w))
        plotted = fig.get_axes()[2].get_lines()[0].get_ydata()
        assert plotted.min() == ATTN_FLOOR and np.all(np.isfinite(np.log10(plotted)))
        path = render_attention_svg(clip, log_mel(clip), self.trace(w), tmp_path / "f.svg")
        assert path.stat().st_size > 0

    def test_svg_bytes_are_deterministic(self, tmp_path, toy_root):
        clip = read_wav(toy_root / "left" / "spk01_nohash_0.wav")
        w = np.random.default_rng(0).dirichlet(np.ones(126))
        a = render_attention_svg(clip, log_mel(clip), self.trace(w), tmp_path / "a.svg").read_bytes()
        b = render_attention_svg(clip, log_mel(clip), self.trace(w), tmp_path / "b.svg").read_bytes()
        assert a == b

    def test_wav_roundtrip_through_cli_path(self, tmp_path):
        path = tmp_path / "x.wav"
        path.write_bytes(encode_wav(np.full(8000, 0.25)))
        assert len(read_wav(path)) == 8000
