import math

import numpy as np
import pytest
import torch

from headforge.errors import PoisonedParameterError
from headforge.field import FieldConfig, FieldParams, color_eval, encode, field_eval

TINY = FieldConfig(table_size_log2=6, base_resolution=4, max_resolution=32, dtype=torch.float64)


def _flat_distance(values=0.0):
    return lambda pts: np.full(len(pts), values)


def _central_diff_rel_err(params, flat, objective, idx, analytic, h):
    base = flat[idx]
    flat[idx] = base + h
    params.load_flat(flat)
    up = objective().item()
    flat[idx] = base - h
    params.load_flat(flat)
    dn = objective().item()
    flat[idx] = base
    params.load_flat(flat)
    fd = (up - dn) / (2 * h)
    return abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)


@pytest.fixture
def tiny_params(rng):
    return FieldParams.init(TINY, rng)


class TestEncoder:
    def test_output_dim_is_32(self, tiny_params):
        out = encode(tiny_params, torch.zeros((5, 3), dtype=torch.float64))
        assert out.shape == (5, 32)

    def test_config_must_produce_32_features(self):
        with pytest.raises(ValueError):
            FieldConfig(levels=8, features_per_level=2)

    def test_zero_tables_give_zero_vector(self):
        params = FieldParams.zeros(TINY)
        out = encode(params, torch.tensor([[0.3, -0.2, 0.9]], dtype=torch.float64))
        assert torch.all(out == 0)

    def test_grid_corner_returns_table_entry(self):
        cfg = FieldConfig(table_size_log2=19, base_resolution=16, max_resolution=64, dtype=torch.float64)
        params = FieldParams.zeros(cfg)
        n = cfg.level_resolution(0)
        assert n == 16 and cfg.level_is_dense(0)
        corner = np.array([5, 9, 2])
        row = corner[0] + (n + 1) * (corner[1] + (n + 1) * corner[2])
        with torch.no_grad():
            params.tensors["enc.level00"][row] = torch.tensor([3.5, -1.25])
        x = torch.tensor(corner / n * 2.0 - 1.0, dtype=torch.float64)[None]
        out = encode(params, x)
        np.testing.assert_allclose(out[0, :2].numpy(), [3.5, -1.25], rtol=0, atol=1e-12)

    def test_out_of_box_points_are_clamped(self, tiny_params):
        inside = encode(tiny_params, torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64))
        outside = encode(tiny_params, torch.tensor([[3.0, 5.0, 2.0]], dtype=torch.float64))
        np.testing.assert_array_equal(inside.numpy(), outside.numpy())

    def test_table_gradients_match_finite_differences(self, rng):
        params = FieldParams.init(TINY, rng)
        x = torch.tensor(rng.uniform(-0.9, 0.9, (6, 3)), dtype=torch.float64)
        weight = torch.tensor(rng.standard_normal((6, 32)), dtype=torch.float64)
        params.set_requires_grad(True)
        (encode(params, x) * weight).sum().backward()
        h = 1e-5
        for name in ("enc.level00", "enc.level07"):
            table = params.tensors[name]
            grad = table.grad.numpy()
            rows = np.argwhere(np.abs(grad).sum(axis=1) > 0)
            assert len(rows) > 0
            for row in rows[:5, 0]:
                for col in range(2):
                    with torch.no_grad():
                        table[row, col] += h
                    up = (encode(params, x) * weight).sum().item()
                    with torch.no_grad():
                        table[row, col] -= 2 * h
                    dn = (encode(params, x) * weight).sum().item()
                    with torch.no_grad():
                        table[row, col] += h
                    fd = (up - dn) / (2 * h)
                    assert fd == pytest.approx(grad[row, col], rel=1e-4, abs=1e-10)
        params.set_requires_grad(False)

    def test_deterministic(self, tiny_params, rng):
        x = torch.tensor(rng.uniform(-1, 1, (50, 3)), dtype=torch.float64)
        a = encode(tiny_params, x)
        b = encode(tiny_params, x)
        assert torch.equal(a, b)


class TestFieldEval:
    def test_zero_weights_surface_density(self, prior):
        params = FieldParams.zeros(TINY)
        x = torch.zeros((1, 3), dtype=torch.float64)
        sigma, rgb, normals = field_eval(params, prior, x, distance_fn=_flat_distance(0.0))
        # raw density 0 + residual 100, softplus(100) = 100 to double precision
        assert sigma[0].item() == pytest.approx(100.0, abs=1e-6)
        assert normals.shape == (1, 3)

    def test_zero_weights_far_field_density(self, prior):
        params = FieldParams.zeros(TINY)
        x = torch.zeros((1, 3), dtype=torch.float64)
        sigma, _, _ = field_eval(params, prior, x, distance_fn=_flat_distance(10.0))
        assert sigma[0].item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_colors_in_unit_interval(self, prior, rng):
        params = FieldParams.init(TINY, rng)
        x = torch.tensor(rng.uniform(-1, 1, (64, 3)), dtype=torch.float64)
        _, rgb, _ = field_eval(params, prior, x, distance_fn=_flat_distance(1.0))
        assert torch.all(rgb > 0) and torch.all(rgb < 1)

    def test_residual_dominates_with_small_weights(self, prior, rng):
        params = FieldParams.init(TINY, rng)
        with torch.no_grad():  # shrink every weight to std ~1e-4
            for name, t in params.tensors.items():
                if name.startswith("mlp.w"):
                    t *= 1e-4 / t.std()
        inside = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
        outside = torch.tensor([[0.0, 0.0, 0.9]], dtype=torch.float64)
        grid = None
        from headforge.head_prior import signed_distance

        sig_in, _, _ = field_eval(params, prior, inside)
        sig_out, _, _ = field_eval(params, prior, outside)
        assert sig_in.item() / sig_out.item() >= 10.0

    def test_parameter_gradients_match_finite_differences(self, prior, rng):
        params = FieldParams.init(TINY, rng)
        x = torch.tensor(rng.uniform(-0.5, 0.5, (8, 3)), dtype=torch.float64)
        dist = _flat_distance(0.01)
        weight_s = torch.tensor(rng.standard_normal(8), dtype=torch.float64)
        weight_c = torch.tensor(rng.standard_normal((8, 3)), dtype=torch.float64)

        def objective():
            sigma, rgb, _ = field_eval(params, prior, x, distance_fn=dist)
            return (sigma * weight_s).sum() + (rgb * weight_c).sum()

        params.set_requires_grad(True)
        objective().backward()
        flat_grad = params.collect_grad()
        params.set_requires_grad(False)

        flat = params.flatten()
        probed = 0
        candidates = np.argwhere(np.abs(flat_grad) > 1e-6)[:, 0]
        rng.shuffle(candidates)
        for idx in candidates[:100]:
            # best step over a ladder: large h loses to relu kinks, small h to
            # roundoff cancellation on near-zero gradients
            rel = min(
                _central_diff_rel_err(params, flat, objective, idx, flat_grad[idx], h)
                for h in (1e-5, 1e-6, 1e-7)
            )
            assert rel < 1e-3, f"param {idx} rel err {rel}"
            probed += 1
        assert probed == 100

    def test_nan_parameters_poison(self, prior):
        params = FieldParams.zeros(TINY)
        with torch.no_grad():
            params.tensors["mlp.w1"][0, 0] = float("nan")
        with pytest.raises(PoisonedParameterError):
            field_eval(params, prior, torch.zeros((1, 3), dtype=torch.float64))

    def test_determinism_bit_exact(self, prior, rng):
        params = FieldParams.init(TINY, rng)
        x = torch.tensor(rng.uniform(-1, 1, (32, 3)), dtype=torch.float64)
        s1, c1, n1 = field_eval(params, prior, x, distance_fn=_flat_distance(0.0))
        s2, c2, n2 = field_eval(params, prior, x, distance_fn=_flat_distance(0.0))
        assert torch.equal(s1, s2) and torch.equal(c1, c2) and torch.equal(n1, n2)


class TestFieldParams:
    def test_flat_roundtrip_bit_exact(self, rng):
        cfg = FieldConfig(table_size_log2=6, base_resolution=4, max_resolution=32)
        params = FieldParams.init(cfg, rng)
        flat = params.flatten()
        clone = FieldParams.zeros(cfg)
        clone.load_flat(flat)
        np.testing.assert_array_equal(clone.flatten(), flat)

    def test_index_map_covers_all_parameters(self, tiny_params):
        index_map = tiny_params.index_map()
        total = sum(int(np.prod(shape)) for _, shape in index_map.values())
        assert total == tiny_params.size == len(tiny_params.flatten())

    def test_mlp_parameter_count_fixed_by_widths(self, tiny_params):
        mlp = sum(
            int(np.prod(shape)) for name, (off, shape) in tiny_params.index_map().items() if name.startswith("mlp.")
        )
        assert mlp == 32 * 64 + 64 + 64 * 64 + 64 + 64 * 7 + 7

    def test_color_eval_matches_field_eval(self, prior, rng):
        params = FieldParams.init(TINY, rng)
        x = torch.tensor(rng.uniform(-0.5, 0.5, (10, 3)), dtype=torch.float64)
        _, rgb, _ = field_eval(params, prior, x, distance_fn=_flat_distance(5.0))
        np.testing.assert_array_equal(color_eval(params, x).detach().numpy(), rgb.detach().numpy())
