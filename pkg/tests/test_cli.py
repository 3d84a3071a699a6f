import json
import subprocess
import sys

import pytest
from PIL import Image

from angioatlas.cli import main
from angioatlas.metrics import RESULTS_COLUMNS, read_results
from angioatlas.overlay import read_label_png
from angioatlas.register import load_pair


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "case"
    assert main(["phantom", "--out", str(d), "--seed", "4", "--dims", "32", "--det", "64", "--frames", "6"]) == 0
    return d


def _run(case, *extra, out="out"):
    return main(["pipeline", "--config", str(case / "case.json"), *extra]), case / out


def test_pipeline_writes_every_artifact(case, capsys):
    code, out = _run(case)
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for name in manifest["artifacts"] + ["manifest.json"]:
        assert (out / name).is_file(), name
    assert set(manifest["versions"]) >= {"angioatlas", "numpy", "scipy", "numba", "Pillow", "python"}
    assert manifest["seeds"]["phantom"] == 4 and len(manifest["config_sha256"]) == 64
    timing = json.loads((out / "timing.json").read_text())
    assert {"load", "project", "preprocess", "register_affine", "register_bspline", "overlay"} <= set(timing["stages_s"])
    row = read_results(out / "results.csv")[0]
    assert list(row) == list(RESULTS_COLUMNS) and row["case_id"] == "case"
    assert float(row["ssim_final"]) > 0.8 and row["tre_mean_px"] != ""
    assert load_pair(out / "transforms.json").bspline is not None
    labels = read_label_png(out / "overlay_labels.png")
    assert labels.shape == (64, 64) and labels.max() > 0
    assert "ssim_final=" in capsys.readouterr().out


def test_affine_stage_only(case, tmp_path):
    cfg = json.loads((case / "case.json").read_text())
    cfg.update(stage="affine", output=str(tmp_path / "aff"), atlas=str(case / "atlas.nii"),
               lut=str(case / "lut.json"), frames=str(case / "frames"), geometry=str(case / "geometry.json"))
    (tmp_path / "aff.json").write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(tmp_path / "aff.json")]) == 0
    assert load_pair(tmp_path / "aff" / "transforms.json").bspline is None
    row = read_results(tmp_path / "aff" / "results.csv")[0]
    assert row["ssim_final"] == row["ssim_affine"] and row["tre_mean_px"] == ""


def test_flags_and_config_precedence(case, tmp_path):
    flags = ["--atlas", str(case / "atlas.nii"), "--lut", str(case / "lut.json"), "--frames", str(case / "frames"),
             "--geometry", str(case / "geometry.json"), "--stage", "affine"]
    assert main(["pipeline", *flags, "--output", str(tmp_path / "flags"), "--site", "Posterior"]) == 0
    assert read_results(tmp_path / "flags" / "results.csv")[0]["site"] == "Posterior"
    # a config file value beats the command-line flag
    cfg = {"site": "LeftAnterior", "output": "fromfile"}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(tmp_path / "c.json"), *flags, "--site", "Posterior",
                 "--output", str(tmp_path / "ignored")]) == 0
    assert read_results(tmp_path / "fromfile" / "results.csv")[0]["site"] == "LeftAnterior"
    assert not (tmp_path / "ignored").exists()


def test_stage_failure_names_the_stage(case, tmp_path, capsys):
    cfg = json.loads((case / "case.json").read_text())
    cfg["atlas"] = "missing.nii"
    (case / "broken.json").write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(case / "broken.json")]) == 2
    assert "[load] FileNotFoundError" in capsys.readouterr().err
    assert main(["pipeline", "--output", str(tmp_path)]) == 2
    assert "missing case settings" in capsys.readouterr().err


def test_batch_results(case, tmp_path):
    configs = []
    for i, site in enumerate(["LeftAnterior", "Posterior"]):
        cfg = json.loads((case / "case.json").read_text())
        cfg.update(site=site, output=f"batch{i}", case_id=f"b{i}", stage="affine")
        (case / f"b{i}.json").write_text(json.dumps(cfg))
        configs += ["--config", str(case / f"b{i}.json")]
    assert main(["pipeline", *configs, "--results", str(tmp_path / "all.csv")]) == 0
    assert [r["case_id"] for r in read_results(tmp_path / "all.csv")] == ["b0", "b1"]


def test_stats_and_ssim_commands(case, tmp_path, capsys):
    _run(case)
    csv = tmp_path / "r.csv"
    csv.write_text("case_id,ssim_final\na,0.5\nb,0.9\nc,0.95\n")
    assert main(["stats", str(csv), "--out", str(tmp_path / "hist")]) == 0
    out = capsys.readouterr().out
    assert "mean=0.7833" in out and "median=0.9000" in out
    assert (tmp_path / "hist.svg").is_file() and (tmp_path / "hist.png").is_file()
    mask = str(case / "out" / "mask.png")
    assert main(["ssim", mask, mask]) == 0
    assert capsys.readouterr().out.strip() == "1.000000"


def test_step_commands(case, tmp_path):
    c = {k: str(case / v) for k, v in
         dict(atlas="atlas.nii", lut="lut.json", geometry="geometry.json", frames="frames").items()}
    assert main(["project", "--atlas", c["atlas"], "--lut", c["lut"], "--geometry", c["geometry"],
                 "--site", "LeftAnterior", "--out", str(tmp_path / "p")]) == 0
    assert main(["preprocess", "--frames", c["frames"], "--out", str(tmp_path / "m.png"),
                 "--geometry", c["geometry"]]) == 0
    assert main(["register", "--fixed", str(tmp_path / "m.png"), "--moving", str(tmp_path / "p_integral.png"),
                 "--silhouette", str(tmp_path / "p_silhouette.png"), "--spacing", "4.8", "4.8",
                 "--out", str(tmp_path / "t.json")]) == 0
    assert main(["overlay", "--atlas", c["atlas"], "--lut", c["lut"], "--geometry", c["geometry"],
                 "--site", "LeftAnterior", "--transforms", str(tmp_path / "t.json"),
                 "--background", str(tmp_path / "m.png"), "--out", str(tmp_path / "ov")]) == 0
    with Image.open(tmp_path / "ov_composite.png") as im:
        assert im.mode == "RGB" and im.size == (64, 64)
    assert read_label_png(tmp_path / "ov_labels.png").max() > 0


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "angioatlas.cli", "ssim", "nope.png", "nope.png"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 2 and res.stderr.startswith("error [ssim]")
