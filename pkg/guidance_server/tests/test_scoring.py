import numpy as np
import pytest
import torch

from guidance_server.backends import SyntheticBackend
from guidance_server.schedule import alpha_bar, alpha_bar_table, loss_weight
from guidance_server.scoring import cfg, compute_gradient


def test_schedule_monotone_unit_interval():
    table = alpha_bar_table()
    assert len(table) == 1000
    assert np.all(table > 0) and np.all(table <= 1)
    assert np.all(np.diff(table) < 0)


def test_loss_weight_formula():
    ab = alpha_bar(700)
    assert loss_weight(700) == pytest.approx(np.sqrt(ab) * (1 - ab), rel=1e-12)


def test_cfg_extrapolation():
    u = np.zeros((2, 2))
    c = np.full((2, 2), 0.01)
    np.testing.assert_allclose(cfg(torch.tensor(u), torch.tensor(c), 100.0).numpy(), 1.0)


class TestEncoderVJP:
    def test_gradient_matches_finite_differences(self):
        backend = SyntheticBackend()
        rng = np.random.default_rng(np.random.PCG64(2))
        image = rng.uniform(0.2, 0.8, (8, 8, 3))
        grad, _ = compute_gradient(
            backend, "generate", image, "probe prompt", None, 500, 77, 3.0, 0.6, None, None
        )
        assert grad.shape == image.shape

        # the latent-side factor is constant w.r.t. the image, so the pulled
        # back gradient must match finite differences of <z, G_latent>
        x = torch.tensor(image, requires_grad=True)
        z = backend.encode_image(x)
        z.backward(torch.ones_like(z))
        h = 1e-6
        probe = [(1, 2, 0), (5, 7, 2), (0, 0, 1)]
        for idx in probe:
            up = image.copy()
            up[idx] += h
            dn = image.copy()
            dn[idx] -= h
            fd = (
                backend.encode_image(torch.tensor(up)).sum().item()
                - backend.encode_image(torch.tensor(dn)).sum().item()
            ) / (2 * h)
            assert fd == pytest.approx(x.grad[idx].item(), rel=1e-5)

    def test_gradient_depends_on_prompt(self):
        backend = SyntheticBackend()
        image = np.full((8, 8, 3), 0.5)
        g1, _ = compute_gradient(backend, "generate", image, "one prompt", None, 300, 5, 7.5, 0.6, None, None)
        g2, _ = compute_gradient(backend, "generate", image, "another text", None, 300, 5, 7.5, 0.6, None, None)
        assert np.linalg.norm(g1 - g2) > 0


class TestTokenRegistration:
    def test_registered_token_changes_prediction(self):
        backend = SyntheticBackend()
        image = np.full((8, 8, 3), 0.5)
        before, _ = compute_gradient(
            backend, "generate", image, "portrait, <back-view>", None, 300, 5, 7.5, 0.6, None, None
        )
        rng = np.random.default_rng(np.random.PCG64(9))
        backend.register_token("<back-view>", rng.standard_normal(backend.text_width))
        after, _ = compute_gradient(
            backend, "generate", image, "portrait, <back-view>", None, 300, 5, 7.5, 0.6, None, None
        )
        assert np.linalg.norm(before - after) > 0

    def test_dimension_mismatch_fatal(self):
        backend = SyntheticBackend()
        with pytest.raises(ValueError, match="width"):
            backend.register_token("<back-view>", np.zeros(backend.text_width + 1))


def test_edit_requires_instruction():
    backend = SyntheticBackend()
    with pytest.raises(ValueError):
        compute_gradient(backend, "edit", np.zeros((4, 4, 3)), "p", None, 100, 1, 2.0, 0.6, None, None)
