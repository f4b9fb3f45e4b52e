"""Optimizer loop, evaluation metrics, and the results file format."""

import io

import numpy as np
import pytest

from nsde import (
    ClassifierModel,
    Dataset,
    DiffusionSpec,
    DriftNet,
    Metrics,
    OptimizerConfig,
    PredictOptions,
    RandomStream,
    TrainDivergenceError,
    evaluate,
    evaluate_corruptions,
    make_time_grid,
    make_two_moons,
    train,
)
from nsde.training import results_header, severity_echo_rows, write_results_csv


def fresh_model(
    seed: int = 4,
    variant: str = "zero",
    sigma: float = 0.0,
    state_dim: int = 6,
    hidden: tuple[int, ...] = (12,),
    n_steps: int = 40,
) -> ClassifierModel:
    return ClassifierModel.initialize(
        2, state_dim, 2, hidden, "tanh",
        DiffusionSpec(variant=variant, sigma=sigma),
        make_time_grid(1.0, n_steps),
        RandomStream(seed),
    )


def frozen_state_model(input_dim: int, n_classes: int) -> ClassifierModel:
    """Zero drift: the head reads the encoded input back unchanged."""
    n = max(input_dim, 2)
    drift = DriftNet.initialize(n, (4,), "tanh", RandomStream(0))
    drift = DriftNet(
        layer_dims=drift.layer_dims,
        activation="tanh",
        params=np.zeros_like(drift.params),
    )
    enc_w = np.zeros((n, input_dim))
    enc_w[:input_dim, :input_dim] = np.eye(input_dim)
    head_w = np.zeros((n_classes, n))
    head_w[:, :input_dim] = np.eye(n_classes, input_dim)
    return ClassifierModel(
        enc_w=enc_w,
        enc_b=np.zeros(n),
        drift=drift,
        diffusion=DiffusionSpec("zero"),
        grid=make_time_grid(1.0, 10),
        head_w=head_w,
        head_b=np.zeros(n_classes),
    )


def model_param_copies(m: ClassifierModel) -> list[np.ndarray]:
    return [
        m.enc_w.copy(), m.enc_b.copy(), m.drift.params.copy(),
        m.head_w.copy(), m.head_b.copy(),
    ]


class TestOptimizerConfig:
    def test_zero_lr_allowed(self):
        assert OptimizerConfig(lr=0.0).lr == 0.0

    def test_validation(self):
        with pytest.raises(ValueError, match="optimizer"):
            OptimizerConfig(kind="rmsprop")
        with pytest.raises(ValueError, match="lr"):
            OptimizerConfig(lr=-0.1)
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=0)
        with pytest.raises(ValueError):
            OptimizerConfig(batch_size=0)
        with pytest.raises(ValueError):
            OptimizerConfig(k_paths=0)


class TestTrain:
    def test_zero_lr_leaves_parameters_untouched(self):
        m = fresh_model(variant="dropout", sigma=0.5, n_steps=20)
        before = model_param_copies(m)
        data = make_two_moons(60, 0.2, seed=1)
        opt = OptimizerConfig(lr=0.0, epochs=3, batch_size=20, k_paths=2)
        trained, hist = train(m, data, opt, RandomStream(2))
        assert trained is m
        for a, b in zip(before, model_param_copies(trained)):
            assert np.array_equal(a, b)
        assert len(hist.epoch_loss) == 3 and len(hist.epoch_accuracy) == 3

    def test_zero_lr_history_is_flat(self):
        # batch_size divides n, so every epoch averages the same per-sample
        # losses (shuffled grouping shifts only rounding)
        m = fresh_model(n_steps=20)
        data = make_two_moons(60, 0.2, seed=1)
        opt = OptimizerConfig(lr=0.0, epochs=4, batch_size=20, k_paths=1)
        _, hist = train(m, data, opt, RandomStream(2))
        assert np.allclose(hist.epoch_loss, hist.epoch_loss[0], rtol=1e-12)
        assert all(a == hist.epoch_accuracy[0] for a in hist.epoch_accuracy)

    def test_moons_deterministic_drift_reaches_95_percent(self):
        data = make_two_moons(200, 0.2, seed=11)
        m = fresh_model(seed=4)
        opt = OptimizerConfig(lr=0.1, epochs=8, batch_size=50, k_paths=1)
        m, hist = train(m, data, opt, RandomStream(5))
        acc = evaluate(m, data, PredictOptions(RandomStream(6), ttn_passes=1))
        assert acc.accuracy_top1 >= 0.95
        assert len(hist.epoch_loss) == 8

    def test_same_seed_same_final_parameters(self):
        data = make_two_moons(60, 0.2, seed=9)
        opt = OptimizerConfig(lr=0.05, epochs=3, batch_size=30, k_paths=2)
        runs = []
        for _ in range(2):
            m = fresh_model(seed=7, variant="dropout", sigma=0.5, n_steps=20)
            m, hist = train(m, data, opt, RandomStream(3))
            runs.append((model_param_copies(m), hist))
        for a, b in zip(runs[0][0], runs[1][0]):
            assert np.array_equal(a, b)
        assert runs[0][1].epoch_loss == runs[1][1].epoch_loss
        assert runs[0][1].epoch_accuracy == runs[1][1].epoch_accuracy

    def test_different_seed_changes_the_run(self):
        data = make_two_moons(60, 0.2, seed=9)
        opt = OptimizerConfig(lr=0.05, epochs=2, batch_size=30, k_paths=2)
        m1 = fresh_model(seed=7, variant="dropout", sigma=0.5, n_steps=20)
        m2 = fresh_model(seed=7, variant="dropout", sigma=0.5, n_steps=20)
        train(m1, data, opt, RandomStream(3))
        train(m2, data, opt, RandomStream(4))
        assert not np.array_equal(m1.drift.params, m2.drift.params)

    def test_adam_also_learns(self):
        data = make_two_moons(100, 0.2, seed=2)
        m = fresh_model(seed=6)
        opt = OptimizerConfig(kind="adam", lr=0.02, epochs=6, batch_size=50, k_paths=1)
        _, hist = train(m, data, opt, RandomStream(8))
        assert hist.epoch_loss[-1] < hist.epoch_loss[0]

    def test_divergence_reports_epoch(self):
        data = make_two_moons(64, 0.2, seed=3)
        m = fresh_model(seed=1, state_dim=4, hidden=(8,), n_steps=20)
        opt = OptimizerConfig(lr=1e6, epochs=40, batch_size=64, k_paths=1)
        with pytest.raises(TrainDivergenceError, match="epoch") as exc_info:
            train(m, data, opt, RandomStream(2))
        assert isinstance(exc_info.value.epoch, int)
        assert 0 <= exc_info.value.epoch < 40

    def test_input_dim_mismatch(self):
        m = fresh_model()
        data = Dataset(np.zeros((4, 3)), np.zeros(4, np.int64))
        with pytest.raises(ValueError, match="input_dim"):
            train(m, data, OptimizerConfig(epochs=1), RandomStream(0))


class TestEvaluate:
    def test_constant_prediction_scores_chance(self):
        m = frozen_state_model(4, 4)
        m.head_w[:] = 0.0
        g = np.random.default_rng(0)
        data = Dataset(g.random((80, 4)), np.tile(np.arange(4), 20))
        acc = evaluate(m, data, PredictOptions(RandomStream(0), ttn_passes=1))
        assert acc.accuracy_top1 == 0.25

    def test_oracle_model_scores_one(self):
        g = np.random.default_rng(5)
        feats = g.normal(size=(50, 3))
        labels = np.argmax(feats, axis=1).astype(np.int64)
        m = frozen_state_model(3, 3)
        acc = evaluate(m, Dataset(feats, labels), PredictOptions(RandomStream(0), ttn_passes=1))
        assert acc.accuracy_top1 == 1.0

    def test_repeat_same_stream_identical(self):
        m = fresh_model(variant="multiplicative", sigma=0.4, n_steps=20)
        data = make_two_moons(40, 0.2, seed=0)
        opts = PredictOptions(RandomStream(5), ttn_passes=4)
        a = evaluate(m, data, opts)
        b = evaluate(m, data, opts)
        assert a.accuracy_top1 == b.accuracy_top1

    def test_empty_dataset_rejected(self):
        m = fresh_model()
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, np.int64))
        with pytest.raises(ValueError, match="empty"):
            evaluate(m, empty, PredictOptions(RandomStream(0)))

    def test_metrics_container(self):
        m = Metrics(accuracy_top1=0.5)
        assert m.per_severity is None and m.m_acc is None


class TestEvaluateCorruptions:
    def test_aggregates_per_cell_table(self):
        g = np.random.default_rng(5)
        feats = g.normal(size=(40, 3)) * 0.3 + 0.5
        labels = np.argmax(feats, axis=1).astype(np.int64)
        data = Dataset(feats, labels)
        m = frozen_state_model(3, 3)
        kinds = ("gaussian_noise", "contrast")
        metrics, cells = evaluate_corruptions(
            m, data, PredictOptions(RandomStream(0), ttn_passes=1),
            seed=3, kinds=kinds, severities=(1, 3),
        )
        assert set(cells) == {(k, s) for k in kinds for s in (1, 3)}
        for sev in (1, 3):
            expected = np.mean([cells[(k, sev)] for k in kinds])
            assert metrics.per_severity[sev] == pytest.approx(expected, rel=1e-15)
        assert metrics.m_acc == pytest.approx(np.mean(list(cells.values())), rel=1e-15)
        assert metrics.accuracy_top1 == 1.0  # clean oracle accuracy

    def test_deterministic(self):
        data = Dataset(np.random.default_rng(1).random((20, 4)), np.zeros(20, np.int64))
        m = frozen_state_model(4, 2)
        args = (m, data, PredictOptions(RandomStream(0), ttn_passes=1))
        a = evaluate_corruptions(*args, seed=9, kinds=("gaussian_noise",), severities=(2,))
        b = evaluate_corruptions(*args, seed=9, kinds=("gaussian_noise",), severities=(2,))
        assert a[1] == b[1]


class TestResultsFormat:
    def test_header(self):
        assert results_header() == "experiment,dataset,variant,sigma,seed,metric,value"

    def test_rows_serialize_types(self):
        buf = io.StringIO()
        rows = [
            ("toy", "moons", "dropout", 0.5, 7, "accuracy", 0.875),
            ("toy", "moons", "zero", 0.0, 7, "stable", True),
        ]
        write_results_csv(rows, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == results_header()
        assert lines[1] == "toy,moons,dropout,0.5,7,accuracy,0.875"
        assert lines[2] == "toy,moons,zero,0,7,stable,true"

    def test_floats_keep_full_precision(self):
        buf = io.StringIO()
        write_results_csv([("e", "d", "v", 0.0, 1, "m", 1 / 3)], buf)
        assert "0.33333333333333331" in buf.getvalue()

    def test_row_arity_checked(self):
        with pytest.raises(ValueError, match="fields"):
            write_results_csv([("too", "short")], io.StringIO())

    def test_writes_to_path(self, tmp_path):
        p = tmp_path / "results.csv"
        write_results_csv([("e", "d", "v", 0.1, 1, "m", 2)], p)
        assert p.read_text().startswith(results_header())

    def test_severity_echo_rows_pin_the_table(self):
        rows = severity_echo_rows("corrupt", "digits", "dropout", 0.5, 3)
        assert len(rows) == 1 + 5 * 5
        assert rows[0][5:] == ("severity_table_version", 1)
        assert ("corrupt", "digits", "dropout", 0.5, 3, "param:gaussian_noise@1", 0.04) in rows
        assert all(r[:5] == ("corrupt", "digits", "dropout", 0.5, 3) for r in rows)
