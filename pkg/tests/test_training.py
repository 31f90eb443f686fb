import math

import numpy as np
import pytest

from hpsnet import ContractError, IoError, TrainingError
from hpsnet.data import batch, gen_synthetic
from hpsnet import Tape, Tensor
from hpsnet.networks import VARIANTS, NetworkSpec, StageSpec, forward, init_params
from hpsnet.ops import cross_entropy
from hpsnet.training import (
    SGD,
    TrainConfig,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    format_metrics,
    load_checkpoint,
    loss_and_grads,
    poly_lr,
    save_checkpoint,
    sgd_step,
    train,
)


def tiny_spec(variant="hps"):
    return NetworkSpec(
        stages=[StageSpec(1, 4), StageSpec(1, 6)], mini_channels=2, num_classes=4, variant=variant, reduce_channels=2
    )


@pytest.fixture(scope="module")
def tiny_data():
    return gen_synthetic(10, 4, 16, 5)


class TestPoly:
    def test_examples(self):
        cfg = TrainConfig(base_lr=0.01, poly_power=0.9)
        assert poly_lr(0, 100, cfg) == 0.01
        assert poly_lr(100, 100, cfg) == 0.0
        assert poly_lr(50, 100, cfg) == pytest.approx(0.01 * 0.5**0.9, rel=1e-12)

    def test_monotone(self):
        cfg = TrainConfig()
        lrs = [poly_lr(i, 30, cfg) for i in range(31)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_contract(self):
        with pytest.raises(ContractError):
            poly_lr(11, 10, TrainConfig())
        with pytest.raises(ContractError):
            poly_lr(0, 0, TrainConfig())


class TestSgd:
    def params(self):
        from hpsnet.networks import ParameterStore
        from hpsnet.tensor import Tensor

        return ParameterStore(
            {"a.w": Tensor(np.array([1.0, -2.0]).reshape(1, 2, 1, 1)), "a.b": Tensor(np.full((1, 1, 1, 1), 0.5))}
        )

    def test_two_steps_by_hand(self):
        cfg = TrainConfig(momentum=0.9, weight_decay=0.1)
        p = self.params()
        g = {"a.w": np.array([0.2, 0.4]).reshape(1, 2, 1, 1), "a.b": np.ones((1, 1, 1, 1))}
        p, opt = sgd_step(p, g, 0.5, cfg)
        # v1 = g + wd * w on weights only
        v1 = np.array([0.2 + 0.1, 0.4 - 0.2]).reshape(1, 2, 1, 1)
        w1 = np.array([1.0, -2.0]).reshape(1, 2, 1, 1) - 0.5 * v1
        np.testing.assert_allclose(p["a.w"].data, w1, rtol=0, atol=1e-15)
        np.testing.assert_allclose(p["a.b"].data.ravel(), [0.0], atol=1e-15)
        p, _ = sgd_step(p, g, 0.5, cfg, opt)
        v2 = 0.9 * v1 + g["a.w"] + 0.1 * w1
        np.testing.assert_allclose(p["a.w"].data, w1 - 0.5 * v2, atol=1e-15)
        np.testing.assert_allclose(p["a.b"].data.ravel(), [0.0 - 0.5 * (0.9 + 1.0)], atol=1e-15)

    def test_vanilla_scalar_step(self):
        p = self.params()
        cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
        sgd_step(p, {"a.w": np.full((1, 2, 1, 1), 0.25)}, 1.0, cfg)
        np.testing.assert_array_equal(p["a.w"].data.ravel(), [0.75, -2.25])

    def test_zero_lr_leaves_params(self):
        p = self.params()
        sgd_step(p, {"a.w": np.ones((1, 2, 1, 1)), "a.b": np.ones((1, 1, 1, 1))}, 0.0, TrainConfig())
        np.testing.assert_array_equal(p["a.w"].data.ravel(), [1.0, -2.0])

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingError, match="a.w"):
            SGD(TrainConfig()).step(self.params(), {"a.w": np.full((1, 2, 1, 1), np.nan)}, 0.1)

    def test_unknown_parameter(self):
        with pytest.raises(ContractError):
            SGD(TrainConfig()).step(self.params(), {"zz.w": np.zeros((1, 2, 1, 1))}, 0.1)

    def test_config_contracts(self):
        with pytest.raises(ContractError):
            TrainConfig(batch_size=0)
        with pytest.raises(ContractError):
            TrainConfig(base_lr=-1)
        with pytest.raises(ContractError):
            TrainConfig(dtype="int32")


class TestLoss:
    def test_zero_head_gives_log_classes(self, tiny_data):
        spec = tiny_spec()
        params = init_params(spec, 0)
        params["main.head.w"].data[...] = 0
        params["main.head.b"].data[...] = 0
        images, labels = batch(tiny_data[:3])
        loss, _ = loss_and_grads(images, labels, spec, params)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_initial_loss_near_uniform(self, tiny_data):
        for v in VARIANTS:
            spec = tiny_spec(v)
            images, labels = batch(tiny_data[:4])
            loss, _ = loss_and_grads(images, labels, spec, init_params(spec, 0))
            assert abs(loss - math.log(4)) < 0.5, v

    def test_sharding_matches_single_thread(self, tiny_data):
        spec = tiny_spec()
        params = init_params(spec, 0)
        images, labels = batch(tiny_data[:5])
        l1, g1 = loss_and_grads(images, labels, spec, params, threads=1)
        l3, g3 = loss_and_grads(images, labels, spec, params, threads=3)
        assert l1 == pytest.approx(l3, rel=1e-12)
        assert g1.keys() == g3.keys()
        for k in g1:
            np.testing.assert_allclose(g1[k], g3[k], rtol=1e-10, atol=1e-14)

    def test_loss_invariant_under_joint_flip(self, tiny_data):
        spec = tiny_spec()
        params = init_params(spec, 0)
        images, labels = batch(tiny_data[:2])
        with Tape(np.float64):
            logits = forward(Tensor(images), spec, params)
        flipped = Tensor(logits.data[:, :, ::-1, ::-1].copy())
        a = cross_entropy(logits, labels).item()
        b = cross_entropy(flipped, labels[:, ::-1, ::-1].copy()).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_all_ignored(self, tiny_data):
        spec = tiny_spec()
        images, labels = batch(tiny_data[:2])
        labels[...] = 255
        loss, grads = loss_and_grads(images, labels, spec, init_params(spec, 0))
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_every_parameter_gets_gradient(self, tiny_data):
        for v in ("hps", "hps_fh", "gated", "baseline"):
            spec = tiny_spec(v)
            params = init_params(spec, 0)
            images, labels = batch(tiny_data[:2])
            _, grads = loss_and_grads(images, labels, spec, params)
            assert set(grads) == set(params.names()), v


class TestTrain:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_loss_decreases(self, tiny_data, variant):
        cfg = TrainConfig(epochs=5, batch_size=5, base_lr=0.02, dtype="float64")
        _, rows = train(tiny_data, tiny_spec(variant), cfg)
        assert len(rows) == 5
        assert rows[-1]["loss"] < rows[0]["loss"]
        assert all(math.isnan(r["miou"]) for r in rows)

    def test_deterministic(self, tiny_data):
        cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
        p1, r1 = train(tiny_data, tiny_spec(), cfg, eval_set=tiny_data[:3])
        p2, r2 = train(tiny_data, tiny_spec(), cfg, eval_set=tiny_data[:3])
        assert format_metrics(r1) == format_metrics(r2)
        assert encode_checkpoint(p1) == encode_checkpoint(p2)

    def test_seed_changes_run(self, tiny_data):
        cfg = TrainConfig(epochs=1, batch_size=4)
        _, r1 = train(tiny_data, tiny_spec(), cfg)
        _, r2 = train(tiny_data, tiny_spec(), TrainConfig(epochs=1, batch_size=4, seed=1))
        assert r1[0]["loss"] != r2[0]["loss"]

    def test_iteration_count_and_final_lr(self, tiny_data):
        cfg = TrainConfig(epochs=3, batch_size=4)
        _, rows = train(tiny_data, tiny_spec(), cfg)
        assert [r["iter"] for r in rows] == [3, 6, 9]
        assert rows[-1]["lr"] == pytest.approx(poly_lr(8, 9, cfg))

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train([], tiny_spec(), TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, tiny_data):
        with pytest.raises(TrainingError):
            train(tiny_data, tiny_spec(), TrainConfig(epochs=3, batch_size=2, base_lr=1e6, dtype="float64"))

    def test_memorises_one_sample(self):
        data = gen_synthetic(1, 4, 16, 9, ignore_fraction=0.0)
        spec = tiny_spec("baseline")
        cfg = TrainConfig(epochs=150, batch_size=1, base_lr=0.05, flip_augment=False, dtype="float64")
        params, _ = train(data, spec, cfg)
        assert evaluate(data, spec, params)[0] > 0.6


class TestMetrics:
    def test_format(self):
        text = format_metrics([{"epoch": 1, "iter": 4, "lr": 0.007, "loss": 1.25, "miou": math.nan}])
        assert text == "epoch,iter,lr,loss,miou\n1,4,0.00700000,1.25000000,\n"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(tiny_spec(), 0)
        save_checkpoint(tmp_path / "c.hpsn", params)
        back = load_checkpoint(tmp_path / "c.hpsn")
        assert back.names() == params.names()
        for name, t in params.items():
            np.testing.assert_array_equal(back[name].data, t.data)

    def test_forward_identical_after_load(self, tmp_path, tiny_data):
        spec = tiny_spec()
        params = init_params(spec, 3)
        save_checkpoint(tmp_path / "c.hpsn", params)
        images, _ = batch(tiny_data[:2])
        a = forward(Tensor(images), spec, params).data
        b = forward(Tensor(images), spec, load_checkpoint(tmp_path / "c.hpsn")).data
        assert np.array_equal(a, b)

    def test_float32_load(self, tmp_path):
        params = init_params(tiny_spec(), 0)
        save_checkpoint(tmp_path / "c.hpsn", params)
        assert load_checkpoint(tmp_path / "c.hpsn", np.float32).dtype == np.float32

    @pytest.mark.parametrize("cut", [3, 6, 10, 40, -1])
    def test_truncated(self, cut):
        buf = encode_checkpoint(init_params(tiny_spec(), 0))
        with pytest.raises(IoError):
            decode_checkpoint(buf[:cut])

    def test_bad_magic(self):
        with pytest.raises(IoError) as e:
            decode_checkpoint(b"XXXX\x01\x00\x00\x00")
        assert e.value.offset == 0
