import json
from pathlib import Path

import numpy as np
import pytest

from skysplat.cli import main


@pytest.fixture(scope="module")
def cli_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_scene")
    rc = main(["gen-fixture", "--out", str(out), "--seed", "4", "--frames",
               "9", "--people", "2", "--width", "64", "--height", "48"])
    assert rc == 0
    return out


def test_gen_fixture_writes_manifest(cli_scene):
    assert (cli_scene / "manifest.json").exists()
    assert (cli_scene / "ground_truth.json").exists()


def test_stage_chain_and_noop_rerun(cli_scene, tmp_path_factory, capsys):
    wd = tmp_path_factory.mktemp("wd")
    manifest = str(cli_scene / "manifest.json")
    args = ["--manifest", manifest, "--out", str(wd)]
    assert main(["refine", *args]) == 0
    assert (wd / "refined_tracks.json").exists()
    assert main(["recon-bg", *args, "--ply"]) == 0
    assert (wd / "mesh" / "vertices.t").exists()
    assert (wd / "mesh.ply").exists()
    assert main(["scale", *args]) == 0
    scale = json.loads((wd / "scale.json").read_text())
    assert scale["sigma"] > 0
    # Report figures land next to the JSON.
    assert (wd / "scale_loss_trace.png").exists()
    assert (wd / "scale_residual_hist.png").exists()
    assert main(["place", *args]) == 0
    assert (wd / "placement.json").exists()

    # Rerunning an unchanged stage is a no-op (content-addressed skip).
    mtime = (wd / "scale.json").stat().st_mtime_ns
    capsys.readouterr()
    assert main(["scale", *args]) == 0
    err = capsys.readouterr().err
    assert '"skipped": true' in err
    assert (wd / "scale.json").stat().st_mtime_ns == mtime

    assert main(["train", *args, "--iters", "40"]) == 0
    assert (wd / "checkpoint" / "meta.json").exists()
    assert (wd / "train_log.csv").exists()
    assert (wd / "train_curves.png").exists()

    assert main(["render", *args, "--frame", "0"]) == 0
    png = wd / "renders" / "f0000.png"
    assert png.exists()
    from PIL import Image
    img = np.asarray(Image.open(png))
    assert img.shape == (48, 64, 3)

    assert main(["eval", *args, "--split", "test"]) == 0
    metrics = json.loads((wd / "metrics.json").read_text())
    assert {"mean_psnr", "mean_ssim", "frames"} <= set(metrics)
    assert (wd / "metrics.csv").exists()
    assert (wd / "eval_psnr.png").exists()

    assert main(["edit", *args, "--edits",
                 '[{"op": "remove", "person": 0}]']) == 0
    assert (wd / "checkpoint_edited" / "meta.json").exists()
    edited = json.loads((wd / "checkpoint_edited" / "meta.json").read_text())
    assert edited["people"] == [1]


def test_scale_without_tracks_exits_2(tmp_path, capsys):
    out = tmp_path / "empty_scene"
    assert main(["gen-fixture", "--out", str(out), "--seed", "1", "--frames",
                 "3", "--people", "0", "--width", "48", "--height", "32"]) == 0
    wd = tmp_path / "wd"
    rc = main(["scale", "--manifest", str(out / "manifest.json"),
               "--out", str(wd)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "NoValidBones" in err


def test_missing_upstream_artifact_exits_2(cli_scene, tmp_path, capsys):
    wd = tmp_path / "fresh"
    rc = main(["place", "--manifest", str(cli_scene / "manifest.json"),
               "--out", str(wd)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "PipelineError" in err or "missing" in err


def test_corrupt_flag(tmp_path):
    out = tmp_path / "corrupted"
    rc = main(["gen-fixture", "--out", str(out), "--seed", "2", "--frames",
               "5", "--people", "1", "--width", "48", "--height", "32",
               "--corrupt", "2:0:blowup"])
    assert rc == 0
    data = json.loads((out / "manifest.json").read_text())
    entry = [e for e in data["tracks"][0]["frames"] if e["frame"] == 2][0]
    assert entry["beta"][0] == 1.0
