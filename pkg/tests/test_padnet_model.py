import numpy as np
import pytest

from padnet_model import (
    ModelSpec,
    build_model,
    check_gradient_flow,
    dan_forward,
    fel_forward,
    fen_forward,
    ffn_forward,
    padnet_forward,
    parameter_count,
    scaled,
    spp_vector,
)
from tensor_core import Tensor, backward, grad_check, no_grad, tensor_sum
from training import compute_loss


def tiny(**overrides):
    return ModelSpec(**{"N": 2, "channel_scale": 0.0625, "fen_channels": [4, 4], **overrides})


def image(rng, size=32, batch=1, dtype=np.float32):
    return Tensor(rng.standard_normal((batch, 1, size, size)).astype(dtype))


def lift_biases(model, rng):
    """Move every bias and BN shift off zero so no ReLU input sits exactly on the kink."""
    for name, p in model.named_parameters():
        if name.endswith((".bias", ".beta")):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)


class TestModelSpec:
    @pytest.mark.parametrize("N", [0, 5])
    def test_level_count_bounds(self, N):
        with pytest.raises(ValueError, match="between 1 and 4"):
            build_model(tiny(N=N), check_flow=False)

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelSpec.from_dict({"N": 2, "depth": 3})

    def test_downsample(self):
        assert ModelSpec().downsample == 4
        assert ModelSpec(fen="vgg").downsample == 8

    def test_scaled_channels_never_vanish(self):
        assert scaled(16, 0.01) == 1


# ============================================================================
# Construction
# ============================================================================

class TestBuild:
    def test_single_level_has_no_fusion(self):
        model = build_model(tiny(N=1), check_flow=False)
        assert model.fel is None and model.ffn is None
        assert len(model.dan) == 1

    def test_fel_input_width(self):
        model = build_model(tiny(N=3), check_flow=False)
        assert model.fel.in_features == 42
        assert model.fel.fc.weight.shape == (3, 42)

    def test_fusion_head_width(self):
        spec = tiny(N=3)
        model = build_model(spec, check_flow=False)
        assert model.ffn.head.weight.shape[1] == scaled(32, spec.channel_scale) + 3

    def test_same_seed_same_parameters(self):
        a = build_model(tiny(), seed=7, check_flow=False).state_dict()
        b = build_model(tiny(), seed=7, check_flow=False).state_dict()
        c = build_model(tiny(), seed=8, check_flow=False).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_parameter_count_grows_with_levels(self):
        counts = [parameter_count(build_model(tiny(N=n), check_flow=False)) for n in range(1, 5)]
        assert all(b > a for a, b in zip(counts, counts[1:]))

    def test_sparse_level_has_largest_kernels(self):
        model = build_model(tiny(N=4), check_flow=False)
        assert model.dan[0].blocks[0].conv.weight.shape[-1] == 9
        assert model.dan[3].blocks[0].conv.weight.shape[-1] == 5

    def test_gradient_flow_reaches_every_parameter(self):
        model = build_model(tiny(), check_flow=False)
        before = {name: buf.copy() for name, buf in model.named_buffers()}
        assert check_gradient_flow(model, seed=1) == []
        after = dict(model.named_buffers())
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert all(p.grad is None for p in model.parameters())


# ============================================================================
# Forward pass
# ============================================================================

class TestForward:
    @pytest.mark.parametrize("N", [1, 2, 3, 4])
    def test_output_is_quarter_resolution(self, rng, N):
        model = build_model(tiny(N=N), check_flow=False).eval()
        with no_grad():
            density, w = padnet_forward(model, image(rng, 32))
        assert density.shape == (1, 1, 8, 8)
        assert (w is None) == (N == 1)

    def test_front_end_shape(self, rng):
        model = build_model(tiny(), check_flow=False)
        assert fen_forward(model, image(rng, 64)).shape == (1, 4, 16, 16)

    def test_indivisible_input_rejected(self, rng):
        model = build_model(tiny(), check_flow=False)
        with pytest.raises(ValueError, match="divisible"):
            fen_forward(model, image(rng, 30))

    def test_output_non_negative(self, rng):
        model = build_model(tiny(N=3), check_flow=False)
        density, _ = padnet_forward(model, image(rng, 32, batch=2))
        assert np.all(density.data >= 0)

    def test_zero_image_is_finite(self):
        model = build_model(tiny(), check_flow=False).eval()
        with no_grad():
            density, w = padnet_forward(model, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))
        assert np.all(np.isfinite(density.data))
        assert np.all(np.isfinite(w.data))

    def test_eval_forward_is_repeatable(self, rng):
        model = build_model(tiny(), check_flow=False).eval()
        x = image(rng, 32)
        with no_grad():
            first = padnet_forward(model, x)[0].data.copy()
            second = padnet_forward(model, x)[0].data
        np.testing.assert_array_equal(first, second)

    def test_subnetworks_disagree(self, rng):
        model = build_model(tiny(), check_flow=False)
        maps = dan_forward(model, fen_forward(model, image(rng, 32)))
        assert [m.shape for m in maps] == [(1, 1, 8, 8), (1, 1, 8, 8)]
        assert not np.allclose(maps[0].data, maps[1].data)

    def test_every_subnetwork_reaches_front_end(self, rng):
        model = build_model(tiny(), check_flow=False)
        x = image(rng, 32)
        for level in range(2):
            model.zero_grad()
            maps = dan_forward(model, fen_forward(model, x))
            weights = Tensor(rng.standard_normal(maps[level].shape).astype(np.float32))
            backward(tensor_sum(maps[level] * weights))
            assert all(p.grad is not None and np.any(p.grad) for p in model.fen.parameters())
            other = model.dan[1 - level].head.weight
            assert other.grad is None

    def test_skip_ablation_changes_output(self, rng):
        x = image(rng, 32)
        with no_grad():
            full = padnet_forward(build_model(tiny(), check_flow=False).eval(), x)[0].data
            ablated = padnet_forward(build_model(tiny(ablate_skip=True), check_flow=False).eval(), x)[0].data
        assert not np.allclose(full, ablated)

    def test_fusion_emits_one_non_negative_map(self, rng):
        model = build_model(tiny(N=3), check_flow=False)
        maps = [Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32)) for _ in range(3)]
        fused = ffn_forward(model, maps, maps)
        assert fused.shape == (2, 1, 8, 8)
        assert np.all(fused.data >= 0)

    def test_fusion_needs_one_map_per_level(self, rng):
        model = build_model(tiny(N=3), check_flow=False)
        maps = [Tensor(rng.random((1, 1, 8, 8)).astype(np.float32)) for _ in range(2)]
        with pytest.raises(ValueError, match="refined and raw"):
            ffn_forward(model, maps, maps)


# ============================================================================
# Feature enhancement layer
# ============================================================================

class TestFeatureEnhancement:
    def test_weights_form_a_simplex(self, rng):
        model = build_model(tiny(N=3), check_flow=False)
        maps = [Tensor(rng.standard_normal((4, 1, 8, 8)).astype(np.float32)) for _ in range(3)]
        w, refined = fel_forward(model, maps)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((w.data > 0) & (w.data < 1))
        for raw, out in zip(maps, refined):
            multiplier = out.data / raw.data
            assert np.all((multiplier > 1) & (multiplier < 2))

    def test_simplex_holds_over_many_inputs(self, rng):
        model = build_model(tiny(N=3), check_flow=False).to_dtype(np.float64)
        scales = 10.0 ** rng.uniform(-2, 1, (1000, 1, 1, 1))
        maps = [Tensor(rng.standard_normal((1000, 1, 8, 8)) * scales, dtype=np.float64) for _ in range(3)]
        w, refined = fel_forward(model, maps)
        assert w.shape == (1000, 3)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(w.data >= 0)
        for raw, out in zip(maps, refined):
            multiplier = out.data / raw.data
            assert np.all((multiplier > 1) & (multiplier < 2))

    @pytest.mark.parametrize("weighting,offset", [("one_plus_w", 1.0), ("w", 0.0)])
    def test_weighting_modes(self, rng, weighting, offset):
        model = build_model(tiny(N=3, weighting=weighting), check_flow=False).to_dtype(np.float64)
        maps = [Tensor(rng.standard_normal((4, 1, 8, 8)), dtype=np.float64) for _ in range(3)]
        w, refined = fel_forward(model, maps)
        for i, (raw, out) in enumerate(zip(maps, refined)):
            expected = raw.data * (w.data[:, i] + offset).reshape(4, 1, 1, 1)
            np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_weighting_changes_the_output(self, rng):
        x = image(rng, 32)
        with no_grad():
            outputs = [padnet_forward(build_model(tiny(weighting=mode), check_flow=False).eval(), x)[0].data
                       for mode in ("one_plus_w", "w")]
        assert not np.allclose(outputs[0], outputs[1])

    def test_unknown_weighting_rejected(self):
        with pytest.raises(ValueError, match="weighting"):
            build_model(tiny(weighting="sqrt_w"), check_flow=False)

    def test_equal_logits_give_uniform_weights(self, rng):
        model = build_model(tiny(), check_flow=False)
        model.fel.fc.weight.data[...] = 0.0
        model.fel.fc.bias.data[...] = 0.0
        maps = [Tensor(rng.random((1, 1, 8, 8)).astype(np.float32)) for _ in range(2)]
        w, refined = fel_forward(model, maps)
        np.testing.assert_allclose(w.data, [[0.5, 0.5]])
        np.testing.assert_allclose(refined[0].data, 1.5 * maps[0].data, rtol=1e-6)

    def test_ablated_fel_is_uniform(self, rng):
        model = build_model(tiny(N=3, ablate_fel=True), check_flow=False)
        assert model.fel is None
        _, w = padnet_forward(model, image(rng, 32))
        np.testing.assert_allclose(w.data, np.full((1, 3), 1 / 3), rtol=1e-6)

    def test_pyramid_length_ignores_map_size(self, rng):
        shapes = {spp_vector([Tensor(rng.random((1, 1, size, size))) for _ in range(2)], [1, 2, 3]).shape
                  for size in (16, 24, 48)}
        assert shapes == {(1, 28)}

    def test_map_smaller_than_pyramid_rejected(self, rng):
        model = build_model(tiny(), check_flow=False)
        maps = [Tensor(rng.random((1, 1, 2, 2)).astype(np.float32)) for _ in range(2)]
        with pytest.raises(ValueError, match="pyramid"):
            fel_forward(model, maps)


# ============================================================================
# Gradient checks in double precision
# ============================================================================

class TestGradients:
    def test_front_end(self, rng):
        model = build_model(tiny(), check_flow=False).to_dtype(np.float64)
        x = Tensor(rng.standard_normal((1, 1, 8, 8)), dtype=np.float64)
        weights = Tensor(rng.standard_normal((1, 4, 2, 2)), dtype=np.float64)
        first = model.fen.blocks[0].conv.weight
        err = grad_check(lambda w: tensor_sum(fen_forward(model, x) * weights), [first],
                         eps=1e-6, max_coords=4, rng=rng)
        assert err < 1e-4

    def test_full_loss_late_parameters(self, rng):
        model = build_model(tiny(), check_flow=False).to_dtype(np.float64)
        x = Tensor(rng.standard_normal((2, 1, 16, 16)), dtype=np.float64)
        gt = Tensor(np.abs(rng.standard_normal((2, 1, 4, 4))), dtype=np.float64)
        params = [model.ffn.head.weight, model.fel.fc.weight]

        def loss(*_):
            pred, w = padnet_forward(model, x)
            return compute_loss(pred, gt, w, [0, 1], 0.1)[0]

        assert grad_check(loss, params, max_coords=6, rng=rng) < 1e-4

    def test_full_loss_every_parameter(self, rng):
        model = build_model(tiny(), seed=0, check_flow=False).to_dtype(np.float64)
        lift_biases(model, rng)
        x = Tensor(rng.standard_normal((1, 1, 32, 32)), dtype=np.float64)
        gt = Tensor(np.abs(rng.standard_normal((1, 1, 8, 8))) * 0.1, dtype=np.float64)

        def loss(*_):
            pred, w = padnet_forward(model, x)
            return compute_loss(pred, gt, w, [1], 1.0)[0]

        errors = {name: grad_check(loss, [p], eps=1e-6, max_coords=4, rng=rng)
                  for name, p in model.named_parameters()}
        assert len(errors) == len(model.parameters())
        assert {name.split(".")[0] for name in errors} == {"fen", "dan", "fel", "ffn"}
        failing = {name: err for name, err in errors.items() if not err < 1e-4}
        assert failing == {}
