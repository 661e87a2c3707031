import filecmp
import json
import os

import numpy as np
import pytest

from conftest import FIXTURE_DIR, FIXTURE_MANIFEST
from spinecomplete import cli
from spinecomplete.geometry import PointCloud
from spinecomplete.io import read_point_cloud, write_ply

FAST = ["--set", "model.preset=desk", "--set", "train.max_steps=2", "--set", "train.batch_size=2"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_eval_identical_clouds(tmp_path, capsys, rng):
    pts = rng.normal(size=(200, 3))
    write_ply(tmp_path / "a.ply", PointCloud(pts))
    code, _ = run(["eval", "--pred", tmp_path / "a.ply", "--gt", tmp_path / "a.ply", "--out-dir", tmp_path / "o"], capsys)
    assert code == 0
    row = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert row["cd"] == 0.0 and row["f1"] == 1.0
    assert (tmp_path / "o" / "metrics.csv").read_text().startswith("fold,specimen")
    assert (tmp_path / "o" / "config.resolved.json").exists()


def test_project_and_label(tmp_path, capsys):
    f = FIXTURE_DIR / "frames"
    code, _ = run(["project", "--depth", f / "S1_v0_depth.png", "--mask", f / "S1_v0_mask.png",
                   "--color", f / "S1_v0_color.png", "--intrinsics", FIXTURE_DIR / "intrinsics.json",
                   "--out-dir", tmp_path], capsys)
    assert code == 0
    cloud = read_point_cloud(tmp_path / "cloud.ply")
    assert len(cloud) > 100 and cloud.colors is not None
    meshes = [f"--mesh={lv}={FIXTURE_DIR / 'meshes' / f'S1_L{lv}.ply'}" for lv in (1, 2, 3)]
    code, _ = run(["label", "--cloud", tmp_path / "cloud.ply", *meshes, "--pose", f / "S1_v0_pose.json",
                   "--out-dir", tmp_path, "--set", "labeling.tau_bg=2"], capsys)
    assert code == 0
    labeled = read_point_cloud(tmp_path / "labeled.ply")
    # the fixture's external labels come from the rendered level mask
    from spinecomplete.config import load_config
    from spinecomplete.pipeline import load_manifest, project_frame

    ref = project_frame(load_manifest(FIXTURE_MANIFEST).frames[0], load_config())
    assert np.array_equal(ref.points, labeled.points)
    assert np.mean(ref.labels == labeled.labels) > 0.99


def test_project_mask_size_mismatch(tmp_path, capsys):
    from spinecomplete.io import write_label_png

    write_label_png(tmp_path / "m.png", np.ones((10, 10), dtype=np.uint8))
    f = FIXTURE_DIR / "frames"
    code, io = run(["project", "--depth", f / "S1_v0_depth.png", "--mask", tmp_path / "m.png",
                    "--intrinsics", FIXTURE_DIR / "intrinsics.json", "--out-dir", tmp_path / "o"], capsys)
    assert code == 1
    err = json.loads(io.err.strip().splitlines()[-1])
    assert err["error"] == "dimension-mismatch"
    assert not (tmp_path / "o").exists()  # nothing written on failure


def test_error_categories(tmp_path, capsys):
    code, io = run(["eval", "--pred", tmp_path / "missing.ply", "--gt", tmp_path / "missing.ply"], capsys)
    assert code == 1 and json.loads(io.err)["error"] == "file-not-found"
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    code, io = run(["eval", "--pred", tmp_path / "bad.ply", "--gt", tmp_path / "bad.ply"], capsys)
    assert code == 1 and json.loads(io.err)["error"] == "ply-malformed-header"
    code, io = run(["eval", "--pred", "x", "--gt", "y", "--set", "train.nope=1"], capsys)
    assert code == 1 and json.loads(io.err)["error"] == "config"


def test_train_then_infer(tmp_path, capsys):
    code, _ = run(["train", "--manifest", FIXTURE_MANIFEST, "--out-dir", tmp_path, *FAST], capsys)
    assert code == 0
    assert (tmp_path / "loss.csv").read_text().startswith("epoch,step,train_cd")
    cloud = PointCloud(np.random.default_rng(0).normal(size=(300, 3)) * 10)
    write_ply(tmp_path / "p.ply", cloud)
    code, _ = run(["infer", "--checkpoint", tmp_path / "model.ckpt", "--input", tmp_path / "p.ply",
                   "--out-dir", tmp_path, *FAST], capsys)
    assert code == 0
    out = read_point_cloud(tmp_path / "completed.ply")
    from spinecomplete.model import load_checkpoint

    mcfg = load_checkpoint(tmp_path / "model.ckpt").config
    assert out.points.shape == (mcfg.n_coarse * mcfg.fold_factor, 3)


@pytest.fixture(scope="module")
def crossval_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cv")
    argv = ["crossval", "--manifest", str(FIXTURE_MANIFEST), *FAST]
    assert cli.main(argv + ["--out-dir", str(base / "a")]) == 0
    assert cli.main(argv + ["--out-dir", str(base / "b")]) == 0
    snap = base / "a" / "config.resolved.json"
    assert cli.main(["crossval", "--manifest", str(FIXTURE_MANIFEST), "--config", str(snap),
                     "--out-dir", str(base / "c")]) == 0
    return base


def test_crossval_reproducible(crossval_runs):
    a = crossval_runs / "a"
    assert (a / "fold_S1.csv").exists() and (a / "fold_S2.csv").exists()
    for name in ("fold_S1.csv", "fold_S2.csv", "report.csv", "skipped.csv"):
        assert (a / name).read_bytes() == (crossval_runs / "b" / name).read_bytes()
        assert (a / name).read_bytes() == (crossval_runs / "c" / name).read_bytes()


def test_report(crossval_runs, tmp_path, capsys):
    a = crossval_runs / "a"
    code, _ = run(["report", a / "fold_S1.csv", a / "fold_S2.csv", "--out-dir", tmp_path], capsys)
    assert code == 0
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    assert set(agg) >= {"overall", "per_level", "per_specimen"}
    header = (tmp_path / "correlation.csv").read_text().splitlines()[0]
    assert header.startswith("variable,specimen,level")
    assert (tmp_path / "report.csv").read_bytes() == (a / "report.csv").read_bytes()


def test_make_fixture_matches_bundled(tmp_path, capsys):
    code, _ = run(["make-fixture", "--out-dir", tmp_path], capsys)
    assert code == 0
    for root, _, files in os.walk(FIXTURE_DIR):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), FIXTURE_DIR)
            assert filecmp.cmp(os.path.join(root, name), tmp_path / rel, shallow=False), rel
