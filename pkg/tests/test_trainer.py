import numpy as np
import pytest

from distill_lab.datasets import BlobSpec, gen_blobs, split
from distill_lab.network import init
from distill_lab.regsample import EXCLUDE_RS, TrainingPolicy
from distill_lab.trainer import (
    ConfigError,
    DivergenceError,
    TrainConfig,
    fit,
    parse_report_csv,
    sgd_step,
    student_spec,
    teacher_config,
)


@pytest.fixture(scope="module")
def small_task():
    ds = gen_blobs(BlobSpec(num_classes=4, per_class=60, dim=6, center_scale=1.5, seed=5))
    return split(ds, 0.75, seed=1)


@pytest.fixture(scope="module")
def small_teacher(small_task):
    train, test = small_task
    cfg = teacher_config(TrainConfig(epochs=15, seed=9), hidden=(24,))
    model, _ = fit(cfg, train, test)
    return model


class TestSgdStep:
    def test_plain_gradient_step(self):
        p = [np.array([1.0, 2.0])]
        sgd_step(p, [np.array([0.5, -1.0])], lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p[0], [0.95, 2.1], atol=1e-15)

    def test_zero_gradient_decays_velocity(self):
        p = [np.zeros(1)]
        v = [np.array([1.0])]
        sgd_step(p, [np.zeros(1)], lr=0.1, momentum=0.9, velocity=v)
        np.testing.assert_allclose(v[0], [0.9], atol=1e-15)
        np.testing.assert_allclose(p[0], [0.9], atol=1e-15)

    def test_quadratic_bowl_converges(self):
        theta = [np.array([3.0, -2.0])]
        v = None
        for _ in range(200):
            v = sgd_step(theta, [theta[0].copy()], lr=0.1, momentum=0.9, velocity=v)
        assert np.linalg.norm(theta[0]) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([np.zeros(2)], [np.zeros(3)], lr=0.1, momentum=0.0)


class TestConfig:
    def test_roundtrip(self):
        cfg = TrainConfig(mode="kd", tau=2.0, policy=TrainingPolicy(0.25, 1.0), hidden=(8, 4))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize(
        "changes",
        [
            {"mode": "nope"},
            {"tau": 0.0},
            {"lr": -1.0},
            {"momentum": 1.0},
            {"epochs": 0},
            {"label_smoothing": 0.1, "mode": "kd"},
            {"masked_form": "other"},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=0.1, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
        assert [cfg.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]

    def test_distill_coef(self):
        assert TrainConfig(mode="wsl", alpha=3.0).distill_coef == 3.0
        assert TrainConfig(mode="kd", alpha=3.0).distill_coef == 1.0

    def test_masked_policy_maps_to_masked_mode(self):
        cfg = TrainConfig(mode="kd", policy=TrainingPolicy(1.0, 1.0, masked=True))
        assert cfg.effective_mode == "masked-kd"


class TestFit:
    def test_two_point_task(self):
        ds = gen_blobs(BlobSpec(num_classes=2, per_class=1, dim=2, spread=0.0, seed=0))
        cfg = TrainConfig(epochs=50, batch_size=2, lr=0.1, hidden=(4,), lr_decay_epochs=())
        _, report = fit(cfg, ds, ds)
        assert any(r.train_acc == 1.0 for r in report.rows)
        assert report.rows[-1].train_acc == 1.0

    def test_requires_teacher(self, small_task):
        with pytest.raises(ConfigError):
            fit(TrainConfig(mode="kd"), *small_task)

    def test_deterministic(self, small_task, small_teacher):
        cfg = TrainConfig(mode="wsl", epochs=3, seed=3, policy=TrainingPolicy(0.5, 1.0))
        m1, r1 = fit(cfg, *small_task, teacher=small_teacher)
        m2, r2 = fit(cfg, *small_task, teacher=small_teacher)
        assert r1.to_csv() == r2.to_csv()
        assert m1.flat_params().tobytes() == m2.flat_params().tobytes()

    def test_zero_distill_weight_matches_ce(self, small_task, small_teacher):
        base = TrainConfig(epochs=4, seed=2)
        m_ce, r_ce = fit(base, *small_task)
        m_kd, r_kd = fit(base.replace(mode="kd", kd_weight=0.0), *small_task, teacher=small_teacher)
        assert m_ce.flat_params().tobytes() == m_kd.flat_params().tobytes()
        assert [r.test_acc for r in r_ce.rows] == [r.test_acc for r in r_kd.rows]

    def test_teacher_unchanged(self, small_task, small_teacher):
        before = small_teacher.flat_params().copy()
        fit(TrainConfig(mode="kd", epochs=2), *small_task, teacher=small_teacher)
        np.testing.assert_array_equal(small_teacher.flat_params(), before)

    def test_report_fields(self, small_task, small_teacher):
        train, _ = small_task
        _, rep = fit(TrainConfig(mode="wsl", epochs=3), *small_task, teacher=small_teacher)
        assert [r.epoch for r in rep.rows] == [0, 1, 2]
        for r in rep.rows:
            assert 0 <= r.rs_count <= len(train)
            assert 0.0 <= r.mean_weight < 1.0
            assert 0.0 <= r.test_acc <= 1.0
        counts = rep.rs_counts()
        assert counts[-1].dataset_size == len(train)

    def test_ce_has_no_counts(self, small_task):
        _, rep = fit(TrainConfig(epochs=2), *small_task)
        assert rep.final_rs_count is None
        assert "rs_count" in rep.to_csv().splitlines()[0]

    def test_frozen_counting(self, small_task, small_teacher):
        cfg = TrainConfig(mode="kd", epochs=2, rs_counting="frozen")
        _, rep = fit(cfg, *small_task, teacher=small_teacher)
        assert rep.final_rs_count is not None

    def test_exclude_rs_differs_from_standard(self, small_task, small_teacher):
        cfg = TrainConfig(mode="kd", epochs=3, tau=4.0)
        m1, _ = fit(cfg, *small_task, teacher=small_teacher)
        m2, _ = fit(cfg.replace(policy=EXCLUDE_RS), *small_task, teacher=small_teacher)
        assert not np.array_equal(m1.flat_params(), m2.flat_params())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, small_task):
        with pytest.raises(DivergenceError):
            fit(TrainConfig(epochs=5, lr=1e300, lr_decay_epochs=()), *small_task)

    def test_continue_training(self, small_task):
        train, test = small_task
        cfg = TrainConfig(epochs=2)
        model = init(student_spec(cfg, train))
        out, _ = fit(cfg, train, test, model=model)
        assert out is model

    def test_csv_roundtrip(self, small_task, small_teacher):
        _, rep = fit(TrainConfig(mode="sigmoid-wsl", epochs=2), *small_task, teacher=small_teacher)
        assert parse_report_csv(rep.to_csv()) == rep.rows
