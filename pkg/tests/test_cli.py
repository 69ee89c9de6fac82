import numpy as np
import pytest

from headforge.cli import main
from headforge.head_prior import load_mesh
from headforge.images import load_png

TINY_TOML = """
[camera]
theta = [80, 90]
radius = [1.2, 1.3]
fov = [40, 48]

[render]
n_samples = 10
prior_grid_res = 32
export_resolution = 16

[field]
table_size_log2 = 8
base_resolution = 4
max_resolution = 32

[coarse]
iterations = 3
resolution = 10
batch_size = 1
seed = 7

[fine]
iterations = 2
resolution = 10
batch_size = 1
grid_resolution = 10

[edit]
iterations = 2
resolution = 10
batch_size = 1
grid_resolution = 10
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.toml").write_text(TINY_TOML)
    return root


@pytest.fixture(scope="module")
def coarse_ckpt(workdir):
    out = workdir / "gen"
    rc = main([
        "generate", "--prompt", "a test subject", "--prior", "standin",
        "--config", str(workdir / "run.toml"), "--out", str(out),
    ])
    assert rc == 0
    ckpt = out / "coarse.hsck"
    assert ckpt.exists()
    assert (out / "metrics.jsonl").exists()
    return ckpt


def test_generate_produces_checkpoint(coarse_ckpt):
    assert coarse_ckpt.stat().st_size > 0


def test_refine_uses_stored_prompt(workdir, coarse_ckpt):
    out = workdir / "fine"
    rc = main([
        "refine", "--from", str(coarse_ckpt),
        "--config", str(workdir / "run.toml"), "--out", str(out),
    ])
    assert rc == 0
    assert (out / "fine.hsck").exists()
    assert (out / "fine_mesh.obj").exists()


def test_edit_with_instruction(workdir, coarse_ckpt):
    out = workdir / "edit"
    rc = main([
        "edit", "--from", str(coarse_ckpt), "--instruction", "make it matte",
        "--edit-scale", "0.6", "--config", str(workdir / "run.toml"), "--out", str(out),
    ])
    assert rc == 0
    assert (out / "edit.hsck").exists()


def test_export_mesh_writes_valid_obj(workdir, coarse_ckpt):
    target = workdir / "head.obj"
    rc = main([
        "export-mesh", "--from", str(coarse_ckpt),
        "--config", str(workdir / "run.toml"), "--out", str(target),
    ])
    assert rc == 0
    mesh = load_mesh(target)
    assert len(mesh.faces) > 0


def test_turntable_frames(workdir, coarse_ckpt):
    out = workdir / "tt"
    rc = main([
        "turntable", "--from", str(coarse_ckpt), "--frames", "3",
        "--config", str(workdir / "run.toml"), "--out", str(out),
    ])
    assert rc == 0
    frames = sorted(out.glob("turntable_*.png"))
    assert len(frames) == 3
    img = load_png(frames[0])
    assert img.shape == (16, 16, 3)
    assert np.isfinite(img).all()
