import numpy as np
import pytest

from hpsnet import ConfigError, ShapeError, Tape, Tensor
from hpsnet.networks import (
    VARIANTS,
    NetworkSpec,
    StageSpec,
    canonical_variant,
    forward,
    forward_main,
    forward_mini,
    init_params,
    predict,
    toy_spec,
)
from hpsnet.ops import cross_entropy


def small_spec(variant="hps", **kw):
    args = dict(
        stages=[StageSpec(1, 4), StageSpec(2, 6), StageSpec(1, 8)],
        mini_channels=2,
        num_classes=3,
        variant=variant,
        reduce_channels=2,
    )
    args.update(kw)
    return NetworkSpec(**args)


class TestSpec:
    def test_aliases(self):
        assert canonical_variant("ps") == "hps_ps"
        assert canonical_variant("fh") == "hps_fh"
        assert canonical_variant("ig") == "hps_ig"
        with pytest.raises(ConfigError):
            canonical_variant("nope")

    def test_layer_numbering_and_paths(self):
        layers = small_spec().layers()
        assert [l.index for l in layers] == [0, 1, 2, 3]
        assert [l.entry for l in layers] == [True, True, False, True]
        assert [l.paths for l in layers] == [3, 3, 2, 3]
        assert [l.stride for l in layers] == [2, 2, 1, 2]

    def test_hidden_layers_and_index(self):
        spec = small_spec()
        assert spec.hidden_layers == (0, 2, 3)
        assert spec.hidden_index(0) == 0
        assert spec.hidden_index(1) == 2
        assert spec.hidden_index(2) == 2
        assert spec.hidden_index(3) == 3

    def test_ranges(self):
        spec = small_spec()
        layers = spec.layers()
        assert spec.range_for(layers[0]) == (0.5, 1.5)
        assert spec.range_for(layers[2]) == (0.75, 1.25)

    def test_bad_hps_layer(self):
        with pytest.raises(ConfigError):
            small_spec(hps_layers=frozenset({9}))

    def test_bad_range_override(self):
        with pytest.raises(ConfigError):
            small_spec(alpha_beta={0: (1.2, 1.0)})

    def test_spatial_sizes(self):
        assert toy_spec().spatial_sizes(64, 64) == [(32, 32), (16, 16), (8, 8)]


class TestParams:
    def test_shared_parameters_identical_across_variants(self):
        base = init_params(small_spec("baseline"), 3)
        hps = init_params(small_spec("hps"), 3)
        for name, t in base.items():
            np.testing.assert_array_equal(t.data, hps[name].data)

    def test_variant_parameter_sets(self):
        names = {v: set(init_params(small_spec(v), 0).names()) for v in VARIANTS}
        assert not any(n.startswith(("mini.", "hp.")) for n in names["baseline"])
        assert any(n.startswith("mini.") for n in names["hps"])
        assert not any(n.startswith("mini.") for n in names["hps_fh"])
        assert not any(n.startswith("mini.") for n in names["gated"])
        assert names["hps"] == names["hps_ig"] == names["hps_ps"]

    def test_gated_mask_conv_sees_features_only(self):
        p = init_params(small_spec("gated"), 0)
        assert p["hp.0.mask.w"].shape == (3, 2, 3, 3)
        q = init_params(small_spec("hps"), 0)
        assert q["hp.0.mask.w"].shape == (3, 4, 3, 3)

    def test_seed_changes_values(self):
        a = init_params(small_spec(), 0)["main.stem.w"].data
        b = init_params(small_spec(), 1)["main.stem.w"].data
        assert not np.array_equal(a, b)

    def test_only_selected_layers_have_modules(self):
        p = init_params(small_spec(hps_layers=frozenset({1, 3})), 0)
        assert "hp.1.mask.w" in p and "hp.3.mask.w" in p
        assert "hp.0.mask.w" not in p

    def test_missing_parameter(self):
        with pytest.raises(ConfigError):
            init_params(small_spec("baseline"), 0)["hp.0.mask.w"]


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_logits_at_input_resolution(self, rng, variant):
        spec = small_spec(variant)
        out = forward(Tensor(rng.random((2, 3, 20, 18))), spec, init_params(spec, 0))
        assert out.shape == (2, 3, 20, 18)
        assert np.all(np.isfinite(out.data))

    def test_mini_returns_stage_outputs(self, rng):
        spec = small_spec()
        hidden = forward_mini(Tensor(rng.random((1, 3, 16, 16))), spec, init_params(spec, 0))
        assert sorted(hidden) == [0, 2, 3]
        assert hidden[0].shape == (1, 2, 8, 8)
        assert hidden[3].shape == (1, 2, 2, 2)

    def test_masks_collected_with_ranges(self, rng):
        spec = small_spec()
        masks = {}
        forward(Tensor(rng.random((1, 3, 16, 16))), spec, init_params(spec, 0), masks=masks)
        assert sorted(masks) == [0, 1, 2, 3]
        assert (masks[0].alpha, masks[0].beta) == (0.5, 1.5)
        assert (masks[2].alpha, masks[2].beta) == (0.75, 1.25)
        for m in masks.values():
            assert m.alpha <= m.values.data.min() and m.values.data.max() <= m.beta

    def test_per_image_shared_mask_is_constant(self, rng):
        spec = small_spec("hps_ps")
        masks = {}
        forward(Tensor(rng.random((2, 3, 16, 16))), spec, init_params(spec, 0), masks=masks)
        v = masks[2].values.data
        np.testing.assert_allclose(v, v[:, :, :1, :1] * np.ones_like(v))

    def test_hps_needs_hidden(self, rng):
        spec = small_spec()
        with pytest.raises(ConfigError):
            forward_main(Tensor(rng.random((1, 3, 16, 16))), None, spec, init_params(spec, 0))

    def test_wrong_input_channels(self, rng):
        spec = small_spec("baseline")
        with pytest.raises(ShapeError):
            forward(Tensor(rng.random((1, 4, 16, 16))), spec, init_params(spec, 0))

    def test_unit_masks_equal_baseline(self, rng):
        img = Tensor(rng.random((2, 3, 16, 16)))
        base = forward(img, small_spec("baseline"), init_params(small_spec("baseline"), 5)).data
        spec = small_spec("hps")
        got = forward_main(img, None, spec, init_params(spec, 5), force_unit_masks=True).data
        np.testing.assert_allclose(got, base, rtol=0, atol=1e-12)

    def test_hidden_receives_gradient_only_when_used(self, rng):
        img = Tensor(rng.random((1, 3, 16, 16)))
        labels = rng.integers(0, 3, size=(1, 16, 16))
        for variant, expect in (("hps", True), ("hps_fh", False)):
            spec = small_spec(variant)
            p = init_params(spec, 0)
            with Tape() as tape:
                g = tape.backward(cross_entropy(forward(img, spec, p), labels))
            mini_grads = [np.abs(tape.grad(g, t)).sum() for n, t in p.items() if n.startswith("mini.")]
            assert bool(mini_grads and sum(mini_grads) > 0) == expect


class TestPredict:
    def test_ties_go_to_lowest_index(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[0, 2, 0, 0] = 1.0
        np.testing.assert_array_equal(predict(Tensor(logits))[0], [[2, 0], [0, 0]])
