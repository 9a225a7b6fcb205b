import csv

import pytest

from dualface.cli import build_parser, main, parse_grid
from dualface.config import AblationFlags, ConfigError
from dualface.data import load_image, render_face, save_image
from dualface.trainer import load_checkpoint


@pytest.fixture
def config_file(tmp_path, unit_config, unit_frozen):
    path = tmp_path / "unit.cfg"
    text = unit_config.replace(steps=2, log_every=1, out_dir=str(tmp_path / "run")).to_text()
    path.write_text("# unit test config\n" + text)
    return path


@pytest.fixture
def trained(config_file, frozen_cache, tmp_path):
    assert main(["train", "--config", str(config_file), "--cache-dir", str(frozen_cache)]) == 0
    return tmp_path / "run"


def test_parse_grid():
    assert [f.tag() for f in parse_grid("standard")] == ["FFF", "TFF", "TTF", "TTT"]
    assert parse_grid("ttf, FFT") == [AblationFlags(True, True, False), AblationFlags(False, False, True)]
    with pytest.raises(ConfigError):
        parse_grid("TT")


def test_subcommands_require_their_arguments():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["train"])
    with pytest.raises(SystemExit):
        parser.parse_args(["infer", "--checkpoint", "x"])
    args = parser.parse_args(["eval", "--checkpoint", "c.pt", "--out", "m.csv", "--set", "T=1", "--set", "seed=2"])
    assert args.set == ["T=1", "seed=2"]


def test_train_writes_artifacts(trained):
    for name in ("final.pt", "config.txt", "losses.csv", "losses.png", "metrics.csv", "metrics.txt", "metrics.png", "trace.png"):
        assert (trained / name).is_file(), name
    rows = list(csv.DictReader((trained / "losses.csv").open()))
    assert [r["step"] for r in rows] == ["1", "2"]
    assert load_checkpoint(trained / "final.pt")["step"] == 2


def test_train_set_override_wins(config_file, frozen_cache, tmp_path):
    out = tmp_path / "other"
    argv = ["train", "--config", str(config_file), "--cache-dir", str(frozen_cache)]
    assert main(argv + ["--set", "steps=1", "--set", f"out_dir={out}", "--set", "use_input_latent=false"]) == 0
    blob = load_checkpoint(out / "final.pt")
    assert blob["step"] == 1 and blob["flags"] == "TFT"


def test_bad_override_reports_error(config_file, capsys):
    assert main(["train", "--config", str(config_file), "--set", "nonsense=1"]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_eval_writes_metrics(trained, tmp_path, capsys):
    out = tmp_path / "ev" / "metrics.csv"
    assert main(["eval", "--checkpoint", str(trained / "final.pt"), "--out", str(out), "--set", "T=1"]) == 0
    header = out.read_text().splitlines()[0]
    assert header == "tag,n_samples,lpips,idsim,fid"
    assert (out.with_suffix(".txt")).is_file() and (out.with_suffix(".png")).is_file()
    assert "IDSIM" in capsys.readouterr().out


def test_infer_writes_image_and_trace(trained, tmp_path):
    face, ident = tmp_path / "face.png", tmp_path / "id.png"
    save_image(render_face(0, 0, 64), face)
    save_image(render_face(1, 0, 64), ident)
    lr = tmp_path / "lr.png"
    save_image(render_face(0, 0, 8), lr)
    for contour, extra in ((lr, []), (face, ["--from-face"])):
        out = tmp_path / f"out-{contour.stem}.png"
        argv = ["infer", "--checkpoint", str(trained / "final.pt"), "--contour", str(contour)]
        assert main(argv + ["--identity", str(ident), "--out", str(out), *extra]) == 0
        assert load_image(out).shape == (3, 64, 64)
        trace = load_image(out.with_name(out.stem + "_trace.png"))
        # contour | identity | two refinement outputs, each tile padded by 2
        assert trace.shape == (3, 68, 4 * 68)


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--out", str(tmp_path / "m.csv")]) == 2
    assert "not found" in capsys.readouterr().err


def test_ablate_grid(config_file, frozen_cache, tmp_path):
    out = tmp_path / "abl"
    argv = ["ablate", "--config", str(config_file), "--grid", "FFF,TTT", "--cache-dir", str(frozen_cache)]
    assert main(argv + ["--out-dir", str(out), "--set", "steps=1", "--seeds", "0", "1"]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["FFF", "TTT"]
    assert (out / "ablation.png").is_file()
    assert (out / "seed1" / "cell-TTT" / "final.pt").is_file()
