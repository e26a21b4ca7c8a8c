import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hardtsp import autodiff as ad
from hardtsp import curriculum as cur
from hardtsp.curriculum import (
    CurriculumState,
    TrainConfig,
    TrainingError,
    run_training,
    sample_weights,
    temperature_step,
    transform_hardness,
    weighted_train_step,
)
from hardtsp.errors import BatchShapeError, CheckpointCompatibilityError, ConfigError
from hardtsp.generators import HagConfig, SurrogateConfig
from hardtsp.io import read_metrics
from hardtsp.policy import PolicyConfig, PolicyModel, reinforce_gradient

TINY = PolicyConfig(embed_dim=8, heads=2, layers=1, ff_hidden=16)

hardness_batches = st.integers(2, 64).flatmap(
    lambda k: arrays(np.float64, k, elements=st.floats(-5, 5, allow_nan=False)))


def tiny_config(**kw):
    base = dict(n=6, epochs=2, batch_size=8, instances_per_epoch=16, warmup_epochs=1,
                policy=TINY, lr=1e-3, baseline_size=20, eval_count=6, eval_gen="gmm",
                hag=HagConfig(steps=1, rollouts=2, batch_size=8), hardness_rollouts=2,
                surrogate=SurrogateConfig(inner_lr=1e-3), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def params_equal(a, b, atol=0.0):
    return all(float((a.store[k] - b.store[k]).detach().abs().max()) <= atol
               for k in a.store.names())


class TestSampleWeights:
    def test_two_point_closed_form(self):
        w = sample_weights([0.0, 1.0], CurriculumState.start(t_start=1.0))
        np.testing.assert_allclose(w, [1 / (1 + math.e), math.e / (1 + math.e)], rtol=1e-14)
        np.testing.assert_allclose(w, [0.26894, 0.73106], atol=1e-5)

    def test_equal_hardness(self):
        w = sample_weights(np.full(7, 0.3), CurriculumState.start(t_start=0.01))
        np.testing.assert_allclose(w, 1 / 7, rtol=1e-14)

    def test_high_temperature(self):
        h = np.random.default_rng(0).normal(size=50)
        w = sample_weights(h, CurriculumState.start(t_start=1e6))
        assert np.abs(w - 1 / 50).max() < 1e-5

    def test_infinite_temperature_is_exactly_uniform(self):
        w = sample_weights([0.1, 0.9, -0.3, 2.0], CurriculumState(temperature=math.inf))
        assert list(w) == [0.25] * 4

    def test_standardize(self):
        h = np.array([0.001, 0.002, 0.003])
        np.testing.assert_allclose(transform_hardness(h, "standardize"),
                                   [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], rtol=1e-10)
        assert list(transform_hardness([2.0, 2.0], "standardize")) == [0.0, 0.0]
        # standardizing makes the weights invariant to the scale of H
        s = CurriculumState.start(t_start=1.0, transform="standardize")
        np.testing.assert_allclose(sample_weights(h, s), sample_weights(1000 * h, s), rtol=1e-12)

    def test_errors(self):
        s = CurriculumState.start()
        with pytest.raises(ConfigError):
            sample_weights([], s)
        with pytest.raises(ConfigError):
            sample_weights([0.1, np.nan], s)
        with pytest.raises(ConfigError):
            CurriculumState(temperature=0.0)
        with pytest.raises(ConfigError):
            CurriculumState(decay=0.0)
        with pytest.raises(ConfigError):
            CurriculumState(transform="rank")

    @settings(max_examples=1000, deadline=None)
    @given(hardness_batches, st.floats(0.01, 100), st.sampled_from(["identity", "standardize"]))
    def test_probability_vector(self, h, temp, transform):
        w = sample_weights(h, CurriculumState(temperature=temp, transform=transform))
        f = transform_hardness(h, transform)
        assert np.all(w >= 0)
        if np.ptp(f) / temp < 700:  # beyond that exp underflows to exactly zero
            assert np.all(w > 0)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert w[np.argmax(f)] == w.max()

    @settings(max_examples=1000, deadline=None)
    @given(hardness_batches, st.floats(0.1, 10), st.floats(-3, 3))
    def test_shift_invariance(self, h, temp, shift):
        s = CurriculumState(temperature=temp)
        np.testing.assert_allclose(sample_weights(h + shift, s), sample_weights(h, s),
                                   rtol=1e-9, atol=1e-15)

    @settings(max_examples=1000, deadline=None)
    @given(hardness_batches, st.floats(0.05, 5), st.floats(0.1, 0.95))
    def test_monotone_sharpening(self, h, temp, ratio):
        order = np.sort(h)
        if np.unique(h).size < 2 or order[-1] - order[-2] < 1e-6:
            return  # needs a unique argmax with distinct competitors
        hot = sample_weights(h, CurriculumState(temperature=temp))
        cold = sample_weights(h, CurriculumState(temperature=temp * ratio))
        top = int(np.argmax(h))
        if hot[top] >= 1.0:
            return  # already saturated in floating point
        assert cold[top] > hot[top]


class TestTemperature:
    def test_three_halvings(self):
        s = CurriculumState.start(t_start=10.0, t_end=0.1, decay=0.5)
        for _ in range(3):
            s = temperature_step(s)
        assert s.temperature == 1.25 and s.epoch == 3

    def test_floor(self):
        s = CurriculumState.start(t_start=10.0, t_end=0.1, decay=0.5)
        for _ in range(20):
            s = temperature_step(s)
        assert s.temperature == 0.1

    def test_identity_schedule(self):
        s = CurriculumState.start(t_start=3.0, decay=1.0)
        for _ in range(5):
            s = temperature_step(s)
        assert s.temperature == 3.0

    def test_increasing_schedule_is_capped(self):
        s = CurriculumState.start(t_start=1.0, t_end=3.0, decay=2.0)
        temps = []
        for _ in range(4):
            s = temperature_step(s)
            temps.append(s.temperature)
        assert temps == [2.0, 3.0, 3.0, 3.0]

    def test_infinite_stays_infinite(self):
        assert temperature_step(CurriculumState(temperature=math.inf)).temperature == math.inf


class TestWeightedStep:
    def setup_method(self):
        self.model = PolicyModel(TINY, seed=1)
        self.x = np.random.default_rng(0).random((4, 6, 2))
        self.bl = np.full(4, 2.5)

    def test_one_instance_equals_unweighted(self):
        a, b = self.model.copy(), self.model.copy()
        weighted_train_step(self.x[:1], [1.0], a, None, 5, lr=1e-2, baseline_costs=self.bl[:1])
        terms = reinforce_gradient(self.x[:1], b, None, 5, baseline_costs=self.bl[:1])
        ad.optimizer_step(b.store, ad.clip_gradients(terms.mean(), 1.0), lr=1e-2)
        assert params_equal(a, b)

    def test_zero_weight_eliminates_instance(self):
        a, b = self.model.copy(), self.model.copy()
        weighted_train_step(self.x[:2], [1.0, 0.0], a, None, 5, lr=1e-2,
                            baseline_costs=self.bl[:2], training=False)
        weighted_train_step(self.x[:1], [1.0], b, None, 5, lr=1e-2,
                            baseline_costs=self.bl[:1], training=False)
        assert params_equal(a, b, atol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_uniform_weights_equal_mean_step(self, training):
        a, b = self.model.copy(), self.model.copy()
        weighted_train_step(self.x, np.full(4, 0.25), a, None, 9, lr=1e-2,
                            baseline_costs=self.bl, training=training)
        terms = reinforce_gradient(self.x, b, None, 9, training=training, baseline_costs=self.bl)
        ad.optimizer_step(b.store, ad.clip_gradients(terms.mean(), 1.0), lr=1e-2)
        assert params_equal(a, b, atol=1e-12)

    def test_uniform_weighted_loss_equals_mean_loss(self):
        terms = reinforce_gradient(self.x, self.model, None, 2, baseline_costs=self.bl)
        weighted = float((torch.full((4,), 0.25, dtype=torch.float64) * terms.losses.detach()).sum())
        assert weighted == pytest.approx(float(terms.losses.mean()), abs=1e-12)

    def test_metrics_and_errors(self):
        _, m = weighted_train_step(self.x, np.full(4, 0.25), self.model.copy(), None, 0,
                                   baseline_costs=self.bl)
        assert m.mean_advantage == pytest.approx(m.mean_cost - 2.5)
        with pytest.raises(BatchShapeError):
            weighted_train_step(self.x, [0.5, 0.5], self.model.copy(), None, 0,
                                baseline_costs=self.bl)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = tiny_config(transform="standardize")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_hag_size_follows_n(self):
        assert tiny_config(n=9).hag.n == 9

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(epochs=0), dict(hard_fraction=1.5),
                                     dict(eval_gen="x"), dict(instances_per_epoch=4)])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            tiny_config(**bad)


class TestRunTraining:
    def test_record_count_and_schema(self, tmp_path):
        res = run_training(tiny_config(epochs=3), out_dir=tmp_path)
        assert len(res.metrics) == 3
        records = read_metrics(tmp_path / "metrics.jsonl")
        assert [r["epoch"] for r in records] == [0, 1, 2]
        assert all(r["v"] == 1 and "seconds" not in r for r in records)
        assert all(r["mean_hardness"] is not None and r["oracle"] == "exact" for r in records)
        assert records[-1]["temperature"] == pytest.approx(5.0 * 0.8 ** 3)
        timing = [json.loads(l) for l in (tmp_path / "timing.jsonl").read_text().splitlines()]
        assert [t["epoch"] for t in timing] == [0, 1, 2]

    def test_byte_identical_reruns(self, tmp_path):
        cfg = tiny_config()
        for d in ("a", "b"):
            run_training(cfg, out_dir=tmp_path / d)
        for name in ("metrics.jsonl", "model.htck", "baseline.htck", "state.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_no_hard_samples_at_infinite_temperature_is_uniform_training(self):
        off = run_training(tiny_config(hard_fraction=0.0, curriculum=False, eval_count=0))
        on = run_training(tiny_config(hard_fraction=0.0, curriculum=True, t_start=math.inf,
                                      eval_count=0))
        assert params_equal(on.model, off.model)
        assert [m.mean_cost for m in on.metrics] == [m.mean_cost for m in off.metrics]
        assert on.metrics[0].mean_hardness is not None and off.metrics[0].mean_hardness is None

    def test_resume_matches_uninterrupted(self, tmp_path, monkeypatch):
        cfg = tiny_config(epochs=3)
        run_training(cfg, out_dir=tmp_path / "full")
        real = cur._checkpoint

        def crash_after_first(out, config, model, baseline, state, metrics):
            real(out, config, model, baseline, state, metrics)
            raise KeyboardInterrupt

        monkeypatch.setattr(cur, "_checkpoint", crash_after_first)
        with pytest.raises(KeyboardInterrupt):
            run_training(cfg, out_dir=tmp_path / "part")
        monkeypatch.setattr(cur, "_checkpoint", real)
        run_training(cfg, out_dir=tmp_path / "part", resume=True)
        for name in ("metrics.jsonl", "model.htck", "baseline.htck", "state.json"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_resume_rejects_changed_config(self, tmp_path):
        run_training(tiny_config(epochs=1), out_dir=tmp_path)
        with pytest.raises(CheckpointCompatibilityError):
            run_training(tiny_config(epochs=1, lr=5e-3), out_dir=tmp_path, resume=True)
        with pytest.raises(ConfigError):
            run_training(tiny_config(epochs=1), out_dir=tmp_path / "missing", resume=True)

    def test_init_model_must_match(self):
        with pytest.raises(CheckpointCompatibilityError):
            run_training(tiny_config(), init_model=PolicyModel(PolicyConfig.desk()))

    def test_errors_carry_context(self, monkeypatch):
        def boom(*a, **k):
            raise ConfigError("broken surrogate")

        monkeypatch.setattr(cur, "surrogate_update", boom)
        with pytest.raises(TrainingError, match=r"epoch 0: batch 0: broken surrogate"):
            run_training(tiny_config(warmup_epochs=0, hard_fraction=0.0, eval_count=0))

    def test_init_model_is_not_mutated(self):
        init = PolicyModel(TINY, seed=0)
        before = init.store.copy()
        res = run_training(tiny_config(epochs=1, hard_fraction=0.0, eval_count=0),
                           init_model=init)
        assert all(torch.equal(before[k], init.store[k]) for k in before.names())
        assert not params_equal(res.model, init)
