"""Emulator tests: forward pass, analytic gradients, training, validation."""

import numpy as np
import pytest

from emucal import ann, doe

from .helpers import toy_design


class TestLogistic:
    def test_symmetry_point(self):
        assert ann.logistic(0.0) == 0.5

    def test_analytic_value(self):
        assert ann.logistic(np.log(3.0)) == pytest.approx(0.75, rel=1e-12)

    def test_symmetry_identity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=3.0, size=200)
        assert np.allclose(ann.logistic(-z), 1.0 - ann.logistic(z), atol=1e-12)

    def test_stable_for_large_inputs(self):
        assert ann.logistic(800.0) == 1.0
        assert ann.logistic(-800.0) == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(ann.logistic(np.array([-1e4, 1e4]))))


def _one_one_one_model():
    config = ann.AnnConfig(input_dim=1, hidden_layers=(1,), output_dim=1)
    return ann.AnnModel(config,
                        weights=[np.array([[1.0]]), np.array([[2.0]])],
                        biases=[np.zeros(1), np.array([-1.0])])


class TestForward:
    def test_zero_network_outputs_zeros(self):
        config = ann.AnnConfig(input_dim=3, hidden_layers=(5,), output_dim=4)
        model = ann.AnnModel.initialize(config, seed=0)
        for w in model.weights:
            w[...] = 0.0
        out = model.forward(np.ones(3))
        assert np.array_equal(out, np.zeros(4))

    def test_hand_computed_net(self):
        model = _one_one_one_model()
        assert model.forward(np.zeros(1))[0] == pytest.approx(0.0, abs=1e-15)

    def test_batched_matches_rowwise(self):
        config = ann.AnnConfig(input_dim=9, hidden_layers=(11, 7), output_dim=36)
        model = ann.AnnModel.initialize(config, seed=1)
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (20, 9))
        batch = model.forward(x)
        rows = np.stack([model.forward(xi) for xi in x])
        # identical math; BLAS may pick different kernels for the two shapes
        np.testing.assert_allclose(batch, rows, rtol=1e-13, atol=1e-15)

    def test_finite_on_widened_box(self):
        config = ann.AnnConfig()
        model = ann.AnnModel.initialize(config, seed=3)
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, (1000, 9))
        assert np.all(np.isfinite(model.forward(x)))

    def test_shape_mismatch_raises(self):
        model = _one_one_one_model()
        with pytest.raises(ValueError):
            model.forward(np.zeros(3))


class TestInputGradient:
    def test_zero_network_zero_jacobian(self):
        config = ann.AnnConfig(input_dim=3, hidden_layers=(5,), output_dim=4)
        model = ann.AnnModel.initialize(config, seed=0)
        for w in model.weights:
            w[...] = 0.0
        assert np.array_equal(model.input_gradient(np.ones(3)), np.zeros((4, 3)))

    def test_hand_computed_chain_rule(self):
        model = _one_one_one_model()
        jac = model.input_gradient(np.zeros(1))
        assert jac[0, 0] == pytest.approx(0.5, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_central_finite_differences(self, seed):
        from .helpers import jacobian_fd_max_rel
        rng = np.random.default_rng(seed)
        hidden = tuple(rng.integers(3, 20, size=rng.integers(1, 4)))
        config = ann.AnnConfig(input_dim=9, hidden_layers=hidden, output_dim=12)
        model = ann.AnnModel.initialize(config, seed=seed + 100)
        x = rng.uniform(-1.5, 1.5, 9)
        assert jacobian_fd_max_rel(model, x) <= 1e-5

    def test_vjp_consistent_with_jacobian(self):
        config = ann.AnnConfig(input_dim=6, hidden_layers=(8, 8), output_dim=10)
        model = ann.AnnModel.initialize(config, seed=5)
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, 6)
        v = rng.normal(size=10)
        acts = model._forward_cached(x[None, :])
        vjp = model.backprop_input(acts, v[None, :])[0]
        assert np.allclose(vjp, v @ model.input_gradient(x), atol=1e-12)


class TestTrain:
    def test_linear_data_reaches_point_nine_nine_nine(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((36, 9))
        c = rng.standard_normal(36)
        design = toy_design(500, rng, lambda x: x @ A.T + c)
        train_d, valid_d = doe.split(design, 0.8, seed=7)

        # least-squares oracle: the data really is noiselessly linear
        xa = np.hstack([train_d.inputs, np.ones((train_d.n_rows, 1))])
        coef, *_ = np.linalg.lstsq(xa, train_d.outputs, rcond=None)
        xv = np.hstack([valid_d.inputs, np.ones((valid_d.n_rows, 1))])
        assert np.abs(xv @ coef - valid_d.outputs).max() < 1e-8

        opts = ann.TrainOptions(batch_size=32, max_epochs=3000, patience=150)
        _, report = ann.train(train_d, valid_d, opts=opts, seed=11)
        assert report.aggregate_r2 >= 0.999

    def test_deterministic_training(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((36, 9))
        design = toy_design(200, rng, lambda x: x @ A.T)
        train_d, valid_d = doe.split(design, 0.8, seed=2)
        opts = ann.TrainOptions(max_epochs=30)
        m1, _ = ann.train(train_d, valid_d, opts=opts, seed=5)
        m2, _ = ann.train(train_d, valid_d, opts=opts, seed=5)
        for w1, w2 in zip(m1.weights + m1.biases, m2.weights + m2.biases):
            assert np.array_equal(w1, w2)

    def test_teacher_student_representational_sanity(self):
        config = ann.AnnConfig()
        teacher = ann.AnnModel.initialize(config, seed=8)
        rng = np.random.default_rng(9)
        design = toy_design(3000, rng, teacher.forward)
        train_d, valid_d = doe.split(design, 0.8, seed=3)
        _, report = ann.train(train_d, valid_d, config, seed=21)
        assert report.aggregate_r2 >= 0.999

    def test_loss_non_increasing_after_warmup_when_early_stopped(self):
        config = ann.AnnConfig(input_dim=4, hidden_layers=(16, 16), output_dim=6)
        teacher = ann.AnnModel.initialize(config, seed=10)
        rng = np.random.default_rng(11)

        def noisy(x):
            return teacher.forward(x) + 0.05 * rng.standard_normal((x.shape[0], 6))

        design = toy_design(600, rng, noisy, input_dim=4, output_dim=6)
        train_d, valid_d = doe.split(design, 0.8, seed=4)
        _, report = ann.train(train_d, valid_d, config,
                              ann.TrainOptions(max_epochs=1500), seed=12)
        assert report.early_stopped
        loss = np.array(report.train_loss)
        tail = loss[len(loss) // 2:]
        running_min = np.minimum.accumulate(tail)
        assert np.all(tail <= running_min * 1.01 + 1e-12)

    def test_divergence_raises(self):
        rng = np.random.default_rng(13)
        design = toy_design(64, rng, lambda x: x @ rng.normal(size=(9, 36)))
        train_d, valid_d = doe.split(design, 0.8, seed=1)
        opts = ann.TrainOptions(learning_rate=1e200, max_epochs=50)
        with pytest.raises(RuntimeError):
            ann.train(train_d, valid_d, opts=opts, seed=1)

    def test_rejects_empty_designs(self):
        rng = np.random.default_rng(14)
        design = toy_design(20, rng, lambda x: x @ rng.normal(size=(9, 36)))
        empty = doe.Design(inputs=design.inputs[:0], outputs=design.outputs[:0],
                           input_scaler=design.input_scaler,
                           output_scaler=design.output_scaler,
                           param_names=design.param_names,
                           output_names=design.output_names)
        with pytest.raises(ValueError):
            ann.train(empty, design)


class TestValidate:
    def _design(self, rng, n=50):
        A = rng.standard_normal((36, 9))
        return toy_design(n, rng, lambda x: x @ A.T)

    def test_perfect_prediction_gives_r2_one(self):
        rng = np.random.default_rng(0)
        design = self._design(rng)

        class Oracle:
            def forward(self, x):
                return design.scaled_outputs()

        result = ann.validate(Oracle(), design)
        assert np.allclose(result.r2_per_output, 1.0)
        assert result.aggregate_r2 == pytest.approx(1.0)

    def test_column_mean_prediction_gives_r2_zero(self):
        rng = np.random.default_rng(1)
        design = self._design(rng)
        means = design.scaled_outputs().mean(axis=0)

        class MeanModel:
            def forward(self, x):
                return np.tile(means, (x.shape[0], 1))

        result = ann.validate(MeanModel(), design)
        assert np.allclose(result.r2_per_output, 0.0, atol=1e-12)

    def test_zero_variance_column_reported_missing(self):
        rng = np.random.default_rng(2)
        design = self._design(rng)
        design.outputs[:, 5] = 3.0

        class Zero:
            def forward(self, x):
                return np.zeros((x.shape[0], 36))

        result = ann.validate(Zero(), design)
        assert np.isnan(result.r2_per_output[5])
        assert np.isfinite(result.aggregate_r2)

    def test_scatter_csv(self, tmp_path):
        rng = np.random.default_rng(3)
        design = self._design(rng, n=10)
        config = ann.AnnConfig()
        model = ann.AnnModel.initialize(config, seed=1)
        result = ann.validate(model, design)
        path = tmp_path / "scatter.csv"
        result.to_scatter_csv(path, comment="t")
        lines = path.read_text().strip().splitlines()
        assert lines[1] == "output_id,observed_scaled,predicted_scaled"
        assert len(lines) == 2 + 10 * 36


class TestModelIo:
    def test_save_load_roundtrip(self, tmp_path):
        config = ann.AnnConfig(input_dim=5, hidden_layers=(7, 3), output_dim=4)
        rng = np.random.default_rng(4)
        model = ann.AnnModel.initialize(config, seed=2)
        model.input_scaler = doe.Scaler(lo=np.zeros(5), hi=np.ones(5))
        model.output_scaler = doe.Scaler(lo=-np.ones(4), hi=np.ones(4))
        path = tmp_path / "model.json"
        model.save(path, comment="test model")
        back = ann.AnnModel.load(path)
        assert back.config == model.config
        for a, b in zip(back.weights + back.biases, model.weights + model.biases):
            assert np.array_equal(a, b)
        x = rng.uniform(0, 1, 5)
        assert np.array_equal(back.predict_natural(x), model.predict_natural(x))

    def test_rejects_wrong_version(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 99}')
        with pytest.raises(ValueError):
            ann.AnnModel.load(path)

    def test_rejects_mismatched_shapes(self):
        config = ann.AnnConfig(input_dim=2, hidden_layers=(3,), output_dim=1)
        with pytest.raises(ValueError):
            ann.AnnModel(config, weights=[np.zeros((3, 2)), np.zeros((1, 2))],
                         biases=[np.zeros(3), np.zeros(1)])
