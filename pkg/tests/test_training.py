import json

import numpy as np
import pytest

from robustcl import data, models, training
from robustcl.attacks import AttackSpec
from robustcl.data import AugmentSpec
from robustcl.losses import LossConfig
from robustcl.models import EncoderConfig
from robustcl.tensor import Tensor
from robustcl.training import (Adam, RunRecord, ScenarioSpec, TrainingError,
                               run_scenario)


def small_spec(**kw):
    kw.setdefault("pretrain_epochs", 2)
    kw.setdefault("finetune_epochs", 2)
    kw.setdefault("batch_size", 128)
    kw.setdefault("adv_batch_size", 128)
    kw.setdefault("augment", AugmentSpec(gaussian_noise_sigma=0.05,
                                         feature_dropout_prob=0.1))
    return ScenarioSpec(**kw)


def fresh_model(seed=0):
    return models.init_model(EncoderConfig("dense", (16, 8, 4), (20,)), 2, 4, seed=seed)


def encoder_snapshot(model):
    return [t.data.copy() for t in model.encoder_tensors()]


def encoder_unchanged(model, snap):
    return all(np.array_equal(t.data, s) for t, s in zip(model.encoder_tensors(), snap))


class TestAdam:
    def test_first_step_is_signed(self):
        p = Tensor(np.array([1.0, -1.0]))
        opt = Adam([p], lr=0.1)
        opt.step({p: np.array([3.0, -0.5])})
        # with zeroed state the first bias-corrected step is lr * sign(g)
        assert np.allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_state_advances_on_zero_grads(self):
        p = Tensor(np.array([1.0]))
        opt = Adam([p], lr=0.1)
        opt.step({})
        assert opt.t == 1
        assert np.array_equal(p.data, [1.0])

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([10.0]))
        opt = Adam([p], lr=0.05)
        for _ in range(2000):
            opt.step({p: 2.0 * (p.data - 3.0)})
        assert abs(p.data[0] - 3.0) < 1e-3


class TestScenarioSpec:
    def test_unknown_scenario(self):
        with pytest.raises(TrainingError):
            ScenarioSpec(scenario="PGD-AT")

    def test_unknown_scheme(self):
        with pytest.raises(TrainingError):
            ScenarioSpec(scheme="MOCO")

    def test_sl_has_no_partial_at(self):
        for scenario in ("Partial-AT", "Full-AT"):
            with pytest.raises(TrainingError):
                ScenarioSpec(scenario=scenario, scheme="SL",
                             train_attack=AttackSpec(epsilon=0.1, steps=2))

    def test_combos_are_st_only(self):
        with pytest.raises(TrainingError):
            ScenarioSpec(scenario="AT", scheme="SL+CL",
                         train_attack=AttackSpec(epsilon=0.1, steps=2))

    def test_adversarial_requires_attack(self):
        with pytest.raises(TrainingError):
            ScenarioSpec(scenario="AT", scheme="CL")

    def test_effective_batch_size(self):
        st = small_spec(scenario="ST", scheme="CL")
        at = small_spec(scenario="AT", scheme="CL",
                        train_attack=AttackSpec(epsilon=0.1, steps=2), adv_batch_size=256)
        assert st.effective_batch_size == 128
        assert at.effective_batch_size == 256


class TestPretrain:
    def test_st_generates_no_attacks(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        counter = []
        spec = small_spec(scenario="ST", scheme="CL", pretrain_epochs=1)
        training.pretrain(m, d_p, spec, attack_counter=counter)
        assert counter == []

    def test_at_attacks_every_step(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        counter = []
        spec = small_spec(scenario="AT", scheme="CL", pretrain_epochs=2,
                          train_attack=AttackSpec(epsilon=0.05, steps=2, clamp=None))
        training.pretrain(m, d_p, spec, attack_counter=counter)
        steps_per_epoch = sum(1 for _ in data.iter_batches(
            d_p, spec.effective_batch_size, spec.seed, 0))
        assert len(counter) == 2 * steps_per_epoch

    def test_requires_contrastive_scheme(self, gauss_splits):
        d_p, _ = gauss_splits
        with pytest.raises(TrainingError):
            training.pretrain(fresh_model(), d_p, small_spec(scheme="SL"))

    def test_loss_decreases(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        spec = small_spec(scenario="ST", scheme="CL", pretrain_epochs=8)
        rec = training.pretrain(m, d_p, spec)
        assert rec.loss_curve[-1][2] < rec.loss_curve[0][2]


class TestFinetune:
    def test_standard_leaves_encoder_bitwise_unchanged(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        spec = small_spec(scenario="ST", scheme="CL", pretrain_epochs=1)
        training.pretrain(m, d_p, spec)
        snap = encoder_snapshot(m)
        head_snap = [t.data.copy() for t in m.head_tensors()]
        training.finetune(m, d_p, spec)
        assert encoder_unchanged(m, snap)
        assert all(np.array_equal(t.data, s) for t, s in zip(m.head_tensors(), head_snap))
        assert m.freeze_encoder

    def test_partial_at_keeps_encoder_fixed(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        spec = small_spec(scenario="Partial-AT", scheme="CL", pretrain_epochs=1,
                          train_attack=AttackSpec(epsilon=0.05, steps=2, clamp=None))
        training.pretrain(m, d_p, spec)
        snap = encoder_snapshot(m)
        training.finetune(m, d_p, spec)
        assert encoder_unchanged(m, snap)

    def test_full_at_updates_encoder(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        spec = small_spec(scenario="Full-AT", scheme="CL", pretrain_epochs=1,
                          train_attack=AttackSpec(epsilon=0.05, steps=2, clamp=None))
        training.pretrain(m, d_p, spec)
        snap = encoder_snapshot(m)
        training.finetune(m, d_p, spec)
        assert not encoder_unchanged(m, snap)

    def test_classifier_reinitialized(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        w = m.classifier_params[0]
        w.data = np.full_like(w.data, 7.0)
        spec = small_spec(scenario="ST", scheme="CL", finetune_epochs=0)
        training.finetune(m, d_p, spec)
        w_after = m.classifier_params[0].data
        assert not np.array_equal(w_after, np.full(w_after.shape, 7.0))


class TestRunScenario:
    def test_sl_is_single_phase(self, gauss_splits):
        d_p, _ = gauss_splits
        rec = run_scenario(fresh_model(), d_p, d_p,
                           small_spec(scenario="ST", scheme="SL", finetune_epochs=3))
        assert {phase for _, phase, _ in rec.loss_curve} == {"train"}

    def test_two_phase_curve(self, gauss_splits):
        d_p, _ = gauss_splits
        rec = run_scenario(fresh_model(), d_p, d_p,
                           small_spec(scenario="ST", scheme="CL"))
        phases = [phase for _, phase, _ in rec.loss_curve]
        assert phases == ["pretrain"] * 2 + ["finetune"] * 2

    def test_combo_gets_linear_finetune(self, gauss_splits):
        d_p, _ = gauss_splits
        m = fresh_model()
        rec = run_scenario(m, d_p, d_p, small_spec(scenario="ST", scheme="SL+CL"))
        phases = [phase for _, phase, _ in rec.loss_curve]
        assert phases == ["train"] * 2 + ["finetune"] * 2
        assert m.freeze_encoder

    def test_determinism(self, gauss_splits):
        d_p, _ = gauss_splits

        def run():
            m = fresh_model(seed=3)
            rec = run_scenario(m, d_p, d_p, small_spec(scenario="ST", scheme="CL", seed=3))
            return rec, m

        rec1, m1 = run()
        rec2, m2 = run()
        assert rec1.loss_curve == rec2.loss_curve
        assert all(np.array_equal(a.data, b.data)
                   for a, b in zip(m1.all_params(), m2.all_params()))

    def test_manifest_fields(self, gauss_splits):
        d_p, _ = gauss_splits
        rec = run_scenario(fresh_model(), d_p, d_p,
                           small_spec(scenario="ST", scheme="SL", finetune_epochs=1))
        for key in ("scenario", "scheme", "seed", "dataset_pretrain", "runtime_s"):
            assert key in rec.manifest


def test_loss_csv_format(tmp_path):
    rec = RunRecord([(0, "pretrain", 1.5), (1, "finetune", 0.25)], None, {})
    p = tmp_path / "loss.csv"
    training.write_loss_csv(rec, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,phase,loss"
    assert lines[1] == "0,pretrain,1.5"


def test_manifest_roundtrip(tmp_path):
    p = tmp_path / "m.json"
    training.write_manifest({"b": 1, "a": [2, 3]}, p)
    assert json.loads(p.read_text()) == {"b": 1, "a": [2, 3]}
