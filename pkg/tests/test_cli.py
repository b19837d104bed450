import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sparsenvs.cli import main
from sparsenvs.pipeline import read_loss_log
from sparsenvs.scene import load_scene

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digests(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def run(*args, out):
    return main([*args, "--config", str(SMOKE), "--out", str(out)])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("make-scenes", "--frames", "10", out=out) == 0
    assert run("train", "geometry", "--steps", "40", out=out) == 0
    assert run("train", "codec", "--steps", "80", out=out) == 0
    assert run("train", "generator", "--steps", "30", out=out) == 0
    return out


def test_make_scenes_layout(tmp_path):
    assert run("make-scenes", "--scenes", "1", "--frames", "4", out=tmp_path) == 0
    scene = tmp_path / "scene" / "scene_000"
    frames = sorted(p.name for p in (scene / "frames").iterdir())
    # one frame = colour image, depth image and a poses.json entry
    assert frames == [f"{i:04d}.{kind}.png" for i in range(4) for kind in ("color", "depth")]
    assert len(json.loads((scene / "poses.json").read_text())) == 4
    assert len(load_scene(scene)) == 4


def test_make_scenes_is_byte_identical(tmp_path):
    run("make-scenes", "--scenes", "1", "--frames", "4", "--seed", "5", out=tmp_path / "a")
    run("make-scenes", "--scenes", "1", "--frames", "4", "--seed", "5", out=tmp_path / "b")
    assert tree_digests(tmp_path / "a" / "scene") == tree_digests(tmp_path / "b" / "scene")


def test_generator_needs_prerequisites(tmp_path, capsys):
    run("make-scenes", "--frames", "4", out=tmp_path)
    code = run("train", "generator", "--steps", "1", out=tmp_path)
    err = capsys.readouterr().err
    assert code != 0
    assert err.count("\n") == 1 and err.startswith("error: missing-checkpoint:") and "geometry" in err


def test_missing_scene_is_reported(tmp_path, capsys):
    code = run("evaluate", "--scene", str(tmp_path / "nowhere"), "--predict", "ground-truth", out=tmp_path)
    err = capsys.readouterr().err
    assert code != 0 and err.startswith("error: scene-format:") and err.count("\n") == 1


def test_bad_override_is_config_error(tmp_path, capsys):
    code = main(["make-scenes", "--out", str(tmp_path), "--set", "geometry.nope=1"])
    assert code == 2 and capsys.readouterr().err.startswith("error: config:")


def test_console_script_single_line_error(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "sparsenvs.cli", "train", "generator", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode != 0
    assert len(proc.stderr.strip().splitlines()) == 1 and proc.stderr.startswith("error: ")


def test_checkpoints_and_logs(trained):
    for stage in ("geometry", "codec", "generator"):
        assert (trained / "checkpoints" / f"{stage}.npz").exists()
        assert read_loss_log(trained / "logs" / f"{stage}.jsonl")


def test_codec_loss_decreases(trained):
    log = read_loss_log(trained / "logs" / "codec.jsonl")
    assert log[-1]["recon"] < log[0]["recon"]


@pytest.mark.parametrize("n_obs", [2, 4, 8])
def test_generate_for_each_observation_count(trained, tmp_path, n_obs):
    out = tmp_path / "gen"
    for name in ("checkpoints",):
        (out / name).parent.mkdir(parents=True, exist_ok=True)
        (out / name).symlink_to(trained / name)
    scene = trained / "scene" / "scene_000"
    assert run("generate", "--scene", str(scene), "--n-obs", str(n_obs), "--target-frame", "9", out=out) == 0
    report = json.loads((out / "generate" / "report.json").read_text())
    assert len(report["observed"]) == n_obs and 9 not in report["observed"]
    from PIL import Image

    assert Image.open(out / "generate" / "generated.png").size == (32, 32)


def test_generate_is_reproducible(trained, tmp_path):
    scene = trained / "scene" / "scene_000"
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        (out / "checkpoints").symlink_to(trained / "checkpoints")
        assert run("generate", "--scene", str(scene), "--n-obs", "2", "--target-frame", "3", out=out) == 0
        digests.append(tree_digests(out / "generate"))
    assert digests[0] == digests[1]


def test_generate_from_explicit_pose(trained, tmp_path):
    scene = trained / "scene" / "scene_000"
    pose = json.loads((scene / "poses.json").read_text())[5]
    (tmp_path / "checkpoints").symlink_to(trained / "checkpoints")
    assert run("generate", "--scene", str(scene), "--n-obs", "2", "--target-pose", json.dumps(pose), out=tmp_path) == 0
    assert "psnr" not in json.loads((tmp_path / "generate" / "report.json").read_text())


def test_ground_truth_evaluation_is_perfect(trained, tmp_path):
    scene = trained / "scene" / "scene_000"
    assert run("evaluate", "--scene", str(scene), "--n-obs", "4", "--predict", "ground-truth", out=tmp_path) == 0
    report = json.loads((tmp_path / "evaluate" / "report.json").read_text())
    assert report["count"] == 10 - 4 == len(report["rows"])
    assert all(r["psnr_infinite"] and r["ssim"] == pytest.approx(1.0) for r in report["rows"])


def test_model_evaluation_writes_every_novel_view(trained, tmp_path):
    (tmp_path / "checkpoints").symlink_to(trained / "checkpoints")
    scene = trained / "scene" / "scene_000"
    assert run("evaluate", "--scene", str(scene), "--n-obs", "4", out=tmp_path) == 0
    report = json.loads((tmp_path / "evaluate" / "report.json").read_text())
    assert report["count"] == 6
    assert len(list((tmp_path / "evaluate").glob("*.generated.png"))) == 6
    assert all(np.isfinite(r["ssim"]) for r in report["rows"])


def test_training_one_stage_leaves_others_untouched(trained, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(trained, out)
    before = {s: digest(out / "checkpoints" / f"{s}.npz") for s in ("geometry", "generator")}
    assert run("train", "codec", "--steps", "2", out=out) == 0
    assert {s: digest(out / "checkpoints" / f"{s}.npz") for s in ("geometry", "generator")} == before


def test_config_snapshot_written(trained):
    cfg = json.loads((trained / "train-codec.config.json").read_text())
    assert cfg["codec"]["codebook_size"] == 64
