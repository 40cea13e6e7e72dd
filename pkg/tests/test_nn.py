import numpy as np
import pytest

from cellpk.nn import (
    AdamState,
    Dataset,
    EarlyStopping,
    GraphError,
    ModelGraph,
    ShapeError,
    TrainConfig,
    WeightFileError,
    adam_step,
    backward,
    forward,
    forward_all,
    load_checkpoint,
    load_weights,
    read_tensors,
    save_checkpoint,
    save_weights,
    train,
)
from cellpk.nn.io import MAGIC, decode_tensors, encode_tensors
from cellpk.nn.layers import conv2d_forward, dropout_forward

from gradcheck import LAYER_KINDS, build_probe_graph, max_relative_error


def tiny_net(input_shape=(1, 6, 6), dtype=np.float32, p=0.5, seed=0):
    g = ModelGraph(input_shape, dtype=dtype)
    g.add("conv", "conv2d", "input", filters=2, kernel=3)
    g.add("relu", "relu", "conv")
    g.add("pool", "maxpool", "relu")
    g.add("flat", "flatten", "pool")
    g.add("drop", "dropout", "flat", p=p)
    g.add("fc", "dense", "drop", units=1)
    g.output_node = g.add("sig", "sigmoid", "fc")
    g.init_weights(seed)
    return g


def toy_data(n, shape=(1, 6, 6), seed=0):
    r = np.random.default_rng(seed)
    x = r.random((n,) + shape).astype(np.float32)
    return Dataset(x, x.mean(axis=(1, 2, 3)))


class TestGradients:
    @pytest.mark.parametrize("kind", LAYER_KINDS)
    def test_finite_differences(self, kind):
        errs = [max_relative_error(*build_probe_graph(kind, s), seed=s) for s in range(20)]
        assert max(errs) < 1e-4

    def test_full_model_graph(self):
        from cellpk.models import build_tiny_deep

        g = build_tiny_deep((3, 16, 16), seed=3).astype(np.float64)
        batch = np.random.default_rng(0).random((2, 3, 16, 16))
        assert max_relative_error(g, batch, seed=1, max_entries=6) < 1e-4

    def test_loss_scale_doubles_gradients(self):
        g = tiny_net(dtype=np.float64)
        x, y = toy_data(4)
        forward(g, x, "train", seed=1)
        g1 = backward(g, x, y)
        g2 = backward(g, x, y, loss_scale=2.0)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=0)

    def test_grad_stored_on_tensors(self):
        g = tiny_net()
        x, y = toy_data(3)
        forward(g, x, "train")
        grads = backward(g, x, y)
        for k, t in g.weights.items():
            assert t.grad is grads[k]

    def test_backward_needs_forward(self):
        g = tiny_net()
        x, y = toy_data(2)
        with pytest.raises(GraphError):
            backward(g, x, y)
        forward(g, x, "eval")
        with pytest.raises(GraphError):
            backward(g, x, y)


class TestLayers:
    def test_dropout_inactive_in_eval(self):
        g = tiny_net(p=0.9)
        x, _ = toy_data(5)
        no_drop = tiny_net(p=0.0)
        no_drop.set_state(g.get_state())
        np.testing.assert_array_equal(forward(g, x, "eval"), forward(no_drop, x, "eval"))

    def test_zero_weights_give_sigmoid_of_bias(self):
        g = tiny_net()
        for k, t in g.weights.items():
            t.values = np.zeros_like(t.values)
        g.weights["fc.bias"].values[:] = 0.7
        out = forward(g, toy_data(3)[0], "eval")
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.7)), rtol=1e-6)
        g.weights["fc.bias"].values[:] = 0.0
        assert np.all(forward(g, toy_data(3)[0], "eval") == 0.5)

    def test_identity_conv(self, rng):
        x = rng.random((2, 1, 5, 4))
        out, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_dropout_expectation(self):
        x = np.ones((10_000, 50))
        out, _ = dropout_forward(x, 0.8, np.random.default_rng(0))
        assert abs(out.mean() - 1.0) < 0.02
        assert np.isclose((out > 0).mean(), 0.2, atol=0.005)

    def test_shape_errors_name_the_node(self):
        g = ModelGraph((3, 8, 8))
        with pytest.raises(ShapeError, match="'fc'"):
            g.add("fc", "dense", "input", units=2)
        with pytest.raises(ShapeError, match="'pool'"):
            ModelGraph((3, 1, 1)).add("pool", "maxpool", "input")
        with pytest.raises(GraphError, match="unknown input"):
            g.add("x", "relu", "nope")

    def test_batch_shape_checked(self):
        g = tiny_net()
        with pytest.raises(ShapeError):
            forward(g, np.zeros((1, 1, 5, 5), dtype=np.float32))

    def test_forward_all_exposes_every_node(self):
        g = tiny_net()
        acts = forward_all(g, toy_data(2)[0])
        assert set(acts) == set(g.nodes)
        assert acts["conv"].shape == (2, 2, 6, 6)


class TestAdam:
    def test_zero_gradient_leaves_weights(self):
        w = {"w": np.array([1.0, -2.0])}
        adam_step(w, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(w["w"], [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        w = {"w": np.array([1.0, 1.0, 1.0])}
        adam_step(w, {"w": np.array([3.0, -0.01, 250.0])}, AdamState(), lr=0.01, eps=1e-12)
        np.testing.assert_allclose(w["w"], [0.99, 1.01, 0.99], rtol=0, atol=1e-9)

    def test_second_step_matches_hand_update(self):
        w = {"w": np.array([0.0])}
        st = AdamState()
        adam_step(w, {"w": np.array([1.0])}, st, lr=1.0, eps=0.0)
        adam_step(w, {"w": np.array([3.0])}, st, lr=1.0, eps=0.0)
        m = (0.1 * 0.9 * 1 + 0.1 * 3) / (1 - 0.9**2)
        v = (0.001 * 0.999 * 1 + 0.001 * 9) / (1 - 0.999**2)
        assert w["w"][0] == pytest.approx(-1.0 - m / np.sqrt(v), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


class TestEarlyStopping:
    def test_patience_arithmetic(self):
        stopper = EarlyStopping(10)
        losses = [1.0] + [1.0 + 0.01 * i for i in range(1, 20)]
        stopped_at = next(e for e, loss in enumerate(losses, 1) if stopper.update(e, loss))
        assert stopped_at == 11
        assert stopper.best_epoch == 1

    def test_equal_loss_is_not_improvement(self):
        stopper = EarlyStopping(2)
        assert not stopper.update(1, 0.5)
        assert not stopper.update(2, 0.5)
        assert stopper.update(3, 0.5)
        assert stopper.best_epoch == 1

    def test_improvement_resets(self):
        stopper = EarlyStopping(2)
        for e, loss in enumerate([0.5, 0.6, 0.4, 0.7], 1):
            assert not stopper.update(e, loss)
        assert stopper.best_epoch == 3


class TestTraining:
    CFG = TrainConfig(learning_rate=1e-2, max_epochs=12, batch_size=4, early_stop_patience=3, seed=5)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            g, log = train(tiny_net(), toy_data(10), toy_data(4, seed=1), self.CFG)
            runs.append((g.get_state(), [r.train_loss for r in log.records]))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])

    def test_best_weights_restored(self):
        g, log = train(tiny_net(), toy_data(10), toy_data(4, seed=1), self.CFG)
        best = min(log.records, key=lambda r: r.val_loss)
        assert log.best_epoch == best.epoch
        from cellpk.nn import predict_array
        from cellpk.nn.graph import mse_loss

        xv, yv = toy_data(4, seed=1)
        assert mse_loss(predict_array(g, xv), yv) == best.val_loss

    def test_early_stop_reason(self):
        cfg = TrainConfig(learning_rate=1e-9, max_epochs=100, batch_size=4, early_stop_patience=2, seed=0)
        _, log = train(tiny_net(p=0.0), toy_data(6), toy_data(3, seed=1), cfg)
        assert log.stop_reason == "early_stopping"
        assert len(log) < 100

    def test_callback_stops(self):
        _, log = train(tiny_net(), toy_data(6), None, self.CFG, on_epoch=lambda rec, g: rec.epoch == 3)
        assert len(log) == 3 and log.stop_reason == "callback"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(train_fraction=1.0)


class TestWeightFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        g = tiny_net(seed=4)
        save_weights(g, tmp_path / "w.cpkw")
        assert (tmp_path / "w.cpkw").read_bytes().startswith(MAGIC)
        other = tiny_net(seed=9)
        load_weights(other, tmp_path / "w.cpkw")
        for k, t in g.weights.items():
            assert t.values.tobytes() == other.weights[k].values.tobytes()
        save_weights(other, tmp_path / "w2.cpkw")
        assert (tmp_path / "w.cpkw").read_bytes() == (tmp_path / "w2.cpkw").read_bytes()

    def test_wrong_topology_names_tensor(self, tmp_path):
        save_weights(tiny_net(), tmp_path / "w.cpkw")
        bigger = tiny_net(input_shape=(1, 8, 8))
        with pytest.raises(WeightFileError, match="'fc.weight'"):
            load_weights(bigger, tmp_path / "w.cpkw")

    def test_corrupt_files(self):
        data = encode_tensors({"a": np.arange(3, dtype=np.float32)})
        with pytest.raises(WeightFileError, match="magic"):
            decode_tensors(b"XXXXX\n" + data[6:])
        with pytest.raises(WeightFileError, match="truncated"):
            decode_tensors(data[:-1])
        with pytest.raises(WeightFileError, match="trailing"):
            decode_tensors(data + b"\0")

    def test_metadata_records_input_shape(self, tmp_path):
        save_weights(tiny_net(), tmp_path / "w.cpkw")
        np.testing.assert_array_equal(read_tensors(tmp_path / "w.cpkw")["__input_shape__"], [1, 6, 6])


class TestWarmStart:
    CFG = TrainConfig(learning_rate=5e-3, max_epochs=10, batch_size=3, early_stop_patience=4, seed=11)

    @pytest.mark.parametrize("with_val, split_at", [(True, 2), (True, 5), (True, 9), (False, 5)])
    def test_resume_equals_uninterrupted(self, tmp_path, with_val, split_at):
        tr, va = toy_data(8), (toy_data(4, seed=2) if with_val else None)
        full_graph, full = train(tiny_net(), tr, va, self.CFG)

        half_cfg = TrainConfig(**{**self.CFG.__dict__, "max_epochs": split_at})
        g, first = train(tiny_net(), tr, va, half_cfg)
        save_checkpoint(first.checkpoint, g, tmp_path / "c.cpkw")
        # a fresh process: new graph object, state only from disk
        resumed_graph, second = train(tiny_net(seed=99), tr, va, self.CFG, resume=load_checkpoint(tmp_path / "c.cpkw"))

        records = first.records + second.records
        assert [(r.epoch, r.train_loss, r.val_loss) for r in records] == [
            (r.epoch, r.train_loss, r.val_loss) for r in full.records
        ]
        assert second.best_epoch == full.best_epoch
        assert second.stop_reason == full.stop_reason
        for k, t in full_graph.weights.items():
            assert t.values.tobytes() == resumed_graph.weights[k].values.tobytes()

    def test_plain_weights_are_not_a_checkpoint(self, tmp_path):
        save_weights(tiny_net(), tmp_path / "w.cpkw")
        with pytest.raises(WeightFileError):
            load_checkpoint(tmp_path / "w.cpkw")

    def test_checkpoint_topology_checked(self, tmp_path):
        g, log = train(tiny_net(), toy_data(4), None, TrainConfig(max_epochs=1, batch_size=2))
        with pytest.raises(ValueError, match="tensor"):
            train(tiny_net(input_shape=(1, 8, 8)), toy_data(4, shape=(1, 8, 8)), None, TrainConfig(max_epochs=2), resume=log.checkpoint)
