import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from headforge.camera import CameraPose, CameraRanges
from headforge.config import FieldSettings, RenderSettings, RunConfig, StageSettings
from headforge.errors import CheckpointIntegrityError, CheckpointVersionError, PoisonedGradientError
from headforge.guidance import LocalScoreProvider, MockNoisePredictor, PromptSet
from headforge.head_prior import PriorField, make_standin_head
from headforge.pipeline import (
    AdamState,
    adam_step,
    checkpoint_load,
    checkpoint_save,
    export_textured_mesh,
    extract_mesh,
    make_schedule,
    metrics_digest,
    render_reference,
    render_turntable,
    run_coarse,
    run_edit,
    run_fine,
)


def tiny_config(iterations=3, resolution=8, fine_iterations=2):
    return RunConfig(
        camera=CameraRanges((60, 100), (1.1, 1.4), (40, 50)),
        render=RenderSettings(n_samples=8, background="random", prior_grid_res=32, export_resolution=24),
        field_cfg=FieldSettings(table_size_log2=8, base_resolution=4, max_resolution=32),
        coarse=StageSettings(iterations, resolution, lr_field=1e-2, batch_size=1, seed=3),
        fine=StageSettings(fine_iterations, resolution, batch_size=1, seed=4, grid_resolution=10),
        edit=StageSettings(fine_iterations, resolution, batch_size=1, seed=5, grid_resolution=10),
    )


@pytest.fixture(scope="module")
def small_prior():
    return PriorField(make_standin_head(1))


def mock_provider(config, resolution, seed=0):
    schedule = make_schedule(config)
    rng = np.random.default_rng(np.random.PCG64(seed))
    target = rng.uniform(0, 1, (resolution, resolution, 3))
    return LocalScoreProvider(MockNoisePredictor(target, schedule), schedule)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0, 3.0], np.float32)
        state = AdamState.zeros(3)
        new, state = adam_step(p, np.zeros(3, np.float32), state, lr=0.1)
        np.testing.assert_array_equal(new, p)
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = np.zeros(1, np.float32)
        new, _ = adam_step(p, np.ones(1, np.float32), AdamState.zeros(1), lr=0.01)
        assert new[0] == pytest.approx(-0.01, rel=1e-5)

    def test_constant_gradient_recurrence_matches_hand_evaluation(self):
        # two steps with g = 1, lr = 1, betas (0.9, 0.99): hand-evaluated update
        p = np.zeros(1, np.float32)
        s = AdamState.zeros(1)
        p, s = adam_step(p, np.ones(1, np.float32), s, lr=1.0)
        p, s = adam_step(p, np.ones(1, np.float32), s, lr=1.0)
        m2 = 0.9 * 0.1 + 0.1  # 0.19
        v2 = 0.99 * 0.01 + 0.01
        expected = -1.0 - (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.99**2)) + 1e-8)
        assert p[0] == pytest.approx(expected, rel=1e-6)

    def test_two_runs_identical(self, rng):
        g1 = rng.standard_normal(50).astype(np.float32)
        g2 = rng.standard_normal(50).astype(np.float32)
        outs = []
        for _ in range(2):
            p = np.zeros(50, np.float32)
            s = AdamState.zeros(50)
            p, s = adam_step(p, g1, s, lr=0.05)
            p, s = adam_step(p, g2, s, lr=0.05)
            outs.append((p, s.m.copy(), s.v.copy()))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        np.testing.assert_array_equal(outs[0][1], outs[1][1])
        np.testing.assert_array_equal(outs[0][2], outs[1][2])

    def test_nan_gradient_rejected(self):
        with pytest.raises(PoisonedGradientError):
            adam_step(np.zeros(2, np.float32), np.array([1.0, np.nan], np.float32), AdamState.zeros(2), 0.1)


class TestCoarseRun:
    def test_smoke_and_metrics(self, small_prior, tmp_path):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("a test head"), small_prior, config, provider, out_dir=tmp_path)
        assert state.iteration == 3
        lines = [json.loads(l) for l in open(tmp_path / "metrics.jsonl")]
        assert len(lines) == 3
        assert all("grad_norm" in l and "wall_ms" in l for l in lines)

    def test_bit_reproducible(self, small_prior):
        config = tiny_config()
        runs = []
        for _ in range(2):
            provider = mock_provider(config, 8)
            state = run_coarse(PromptSet("a test head"), small_prior, config, provider)
            runs.append(state)
        np.testing.assert_array_equal(runs[0].params.flatten(), runs[1].params.flatten())
        assert metrics_digest(runs[0].metrics) == metrics_digest(runs[1].metrics)

    def test_digest_ignores_wall_clock(self):
        a = [{"iter": 0, "grad_norm": "1e-3", "wall_ms": 1.0}]
        b = [{"iter": 0, "grad_norm": "1e-3", "wall_ms": 99.0}]
        assert metrics_digest(a) == metrics_digest(b)

    def test_poisoned_provider_skips_iterations(self, small_prior):
        config = tiny_config()

        class SometimesNan:
            def __init__(self, inner):
                self.inner = inner
                self.calls = 0

            def predict(self, request):
                self.calls += 1
                out = self.inner.predict(request)
                if self.calls <= 2:
                    out = out + np.nan
                return out

        schedule = make_schedule(config)
        rng = np.random.default_rng(0)
        predictor = SometimesNan(MockNoisePredictor(rng.uniform(0, 1, (8, 8, 3)), schedule))
        provider = LocalScoreProvider(predictor, schedule)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        assert state.skipped_nan >= 1
        assert state.iteration == 3  # skipped iterations still advance


class TestResume:
    def test_checkpoint_resume_equals_uninterrupted(self, small_prior, tmp_path):
        config = tiny_config(iterations=6)
        provider = mock_provider(config, 8)
        straight = run_coarse(PromptSet("x"), small_prior, config, provider)

        half_cfg = tiny_config(iterations=3)
        provider2 = mock_provider(half_cfg, 8)
        half = run_coarse(PromptSet("x"), small_prior, half_cfg, provider2)
        ckpt_path = tmp_path / "half.hsck"
        checkpoint_save(half, ckpt_path)

        resumed_state = checkpoint_load(ckpt_path, tiny_config(iterations=6))
        provider3 = mock_provider(config, 8)
        resumed = run_coarse(
            PromptSet("x"), resumed_state.prior, tiny_config(iterations=6), provider3, state=resumed_state
        )
        np.testing.assert_array_equal(resumed.params.flatten(), straight.params.flatten())
        np.testing.assert_array_equal(resumed.adam["field"].m, straight.adam["field"].m)
        np.testing.assert_array_equal(resumed.adam["field"].v, straight.adam["field"].v)

    def test_rng_state_roundtrip(self, small_prior, tmp_path):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        checkpoint_save(state, tmp_path / "s.hsck")
        loaded = checkpoint_load(tmp_path / "s.hsck", config)
        assert loaded.rng.integers(0, 2**31) == state.rng.integers(0, 2**31)

    def test_truncated_file_integrity_error(self, small_prior, tmp_path):
        config = tiny_config(iterations=1)
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        p = tmp_path / "c.hsck"
        checkpoint_save(state, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointIntegrityError):
            checkpoint_load(p, config)

    def test_field_params_container_roundtrip_bit_exact(self, tmp_path, rng):
        from headforge.checkpoint import load_container, save_container
        from headforge.field import FieldConfig, FieldParams

        cfg = FieldConfig(table_size_log2=10, base_resolution=4, max_resolution=64)
        params = FieldParams.init(cfg, rng)
        save_container(tmp_path / "p.hsck", {f"field.{k}": v.numpy() for k, v in params.tensors.items()})
        blobs = load_container(tmp_path / "p.hsck")
        for name, tensor in params.tensors.items():
            np.testing.assert_array_equal(blobs[f"field.{name}"], tensor.numpy())

    def test_version_mismatch_fatal(self, small_prior, tmp_path):
        import hashlib

        config = tiny_config(iterations=1)
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        p = tmp_path / "c.hsck"
        checkpoint_save(state, p)
        data = bytearray(p.read_bytes())[:-32]
        data[4] = 99  # format version byte
        data += hashlib.sha256(bytes(data)).digest()
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            checkpoint_load(p, config)


@pytest.fixture(scope="module")
def coarse_state(small_prior):
    config = tiny_config(iterations=2)
    provider = mock_provider(config, 8)
    return run_coarse(PromptSet("x"), small_prior, config, provider)


class TestFineAndEdit:

    def test_fine_runs_and_exports(self, coarse_state, tmp_path):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_fine(coarse_state, PromptSet("x"), config, provider, out_dir=tmp_path)
        assert state.iteration == 2
        assert (tmp_path / "fine_mesh.obj").exists()
        assert state.grid.dv.abs().max().item() <= state.grid.cell / 2 + 1e-6

    def test_edit_requires_instruction(self, coarse_state):
        config = tiny_config()
        provider = mock_provider(config, 8)
        with pytest.raises(ValueError):
            run_edit(coarse_state, PromptSet("x"), config, provider)

    def test_edit_populates_reference_cache(self, coarse_state):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_edit(coarse_state, PromptSet("x", edit_instruction="make it blue"), config, provider)
        assert state.iteration == 2
        assert len(state.reference_cache) >= 1

    def test_reference_cache_hit_returns_same_image(self, coarse_state):
        cache = {}
        pose = CameraPose(12.0, 80.0, 1.2, 45.0)
        a = render_reference(coarse_state, pose, 16, cache=cache)
        b = render_reference(coarse_state, pose, 16, cache=cache)
        assert a is b  # cache hit
        near = CameraPose(12.3, 80.2, 1.201, 45.2)  # same 1-degree bin
        c = render_reference(coarse_state, near, 16, cache=cache)
        assert c is a
        assert len(cache) == 1

    def test_reference_of_prior_only_model_matches_mesh_silhouette(self, small_prior):
        import torch

        from headforge.camera import generate_rays
        from headforge.field import FieldConfig, FieldParams
        from headforge.head_prior import ray_mesh_first_hit
        from headforge.pipeline import RunState

        config = tiny_config()
        params = FieldParams.zeros(FieldConfig(table_size_log2=8, base_resolution=4, max_resolution=32))
        rng = np.random.default_rng(0)
        state = RunState("coarse", 0, params, small_prior, rng, config)
        pose = CameraPose(40.0, 80.0, 1.25, 45.0)
        res = 128
        img = render_reference(state, pose, res)
        # zero field leaves an activation-floor haze, so the solid interior
        # (strongly non-white pixels under the white background) is the mask
        origins, dirs = generate_rays(pose, res, res)
        hits = ray_mesh_first_hit(small_prior.mesh, origins.reshape(-1, 3), dirs.reshape(-1, 3))
        mesh_mask = np.isfinite(hits).reshape(res, res)
        dark = np.abs(img - 1.0).max(axis=2) > 0.45
        iou = (mesh_mask & dark).sum() / (mesh_mask | dark).sum()
        assert iou >= 0.95, f"IoU {iou:.3f}"


class TestOutputs:
    def test_turntable_frames(self, small_prior):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        frames = render_turntable(state, 4, resolution=16)
        assert frames.shape == (4, 16, 16, 3)
        assert np.isfinite(frames).all()

    def test_extract_mesh_from_coarse(self, small_prior):
        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        mesh = extract_mesh(state)
        assert len(mesh.faces) > 0
        assert mesh.vertex_colors is not None
        assert mesh.vertex_colors.min() >= 0 and mesh.vertex_colors.max() <= 1

    def test_export_roundtrip(self, small_prior, tmp_path):
        from headforge.head_prior import load_mesh

        config = tiny_config()
        provider = mock_provider(config, 8)
        state = run_coarse(PromptSet("x"), small_prior, config, provider)
        mesh = export_textured_mesh(state, tmp_path / "out.obj")
        back = load_mesh(tmp_path / "out.obj")
        assert len(back.vertices) == len(mesh.vertices)
        assert sorted(map(tuple, back.faces.tolist())) == sorted(map(tuple, mesh.faces.tolist()))
