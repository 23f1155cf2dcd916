import numpy as np
import pytest

from dvp import training
from dvp.descriptions import Description, DescriptionSet, Partitioning, partition_by_cause
from dvp.encoder import LinearEncoder, MLPEncoder, TableEncoder
from dvp.errors import CapabilityError, DataError, DivergenceError, FormatError
from dvp.reprogram import (
    PromptSet,
    VisualPrompt,
    avg_omega,
    check_reweighting,
    estimate_prm,
    frame_mask,
    logits_from_row,
    similarity_matrix,
)
from dvp.training import (
    Dataset,
    TrainConfig,
    empirical_risk,
    evaluate_accuracy,
    init_state,
    integrated_logits,
    load_checkpoint,
    lr_at,
    partition_logits,
    prompt_gradient,
    save_checkpoint,
    sgd_momentum_step,
    train_dvp,
    train_standard_vr,
    zero_shot_accuracy,
)

from conftest import DESK, desc_set
from oracles import partition_loss


def _task_parts(task):
    return task.train, task.descriptions, partition_by_cause(task.descriptions, v=3), task.encoder


class TestLogits:
    def test_single_partition_avg_matches_row(self, small_task):
        data, dset, _, enc = _task_parts(small_task)
        mask = frame_mask(enc.input_dims, 2)
        delta = VisualPrompt(np.random.default_rng(0).standard_normal(mask.shape) * mask, mask)
        W = avg_omega(dset)
        got = partition_logits(data.images, delta, W, np.arange(len(dset)), dset, enc)
        S = similarity_matrix(data.images, PromptSet([delta]), None, dset, enc)
        np.testing.assert_allclose(got, logits_from_row(S, W), rtol=0, atol=1e-12)

    def test_empty_partition(self, small_task):
        data, dset, _, enc = _task_parts(small_task)
        delta = VisualPrompt.zeros(frame_mask(enc.input_dims, 2))
        out = partition_logits(data.images[:3], delta, avg_omega(dset), [], dset, enc)
        assert np.array_equal(out, np.zeros((3, dset.num_classes)))

    def test_hand_built(self):
        enc = LinearEncoder((1, 2, 1), 2, weights=np.eye(2))
        mask = np.array([[[0.0], [1.0]]])
        delta = VisualPrompt(np.array([[[0.0], [1.0]]]), mask)
        dset = DescriptionSet([Description("a", 0, np.array([1.0, 0.0])),
                               Description("b", 1, np.array([0.0, 1.0]))])
        # z = (1, 1): both cosines are 1/sqrt2, scaled by tau=1
        out = partition_logits(np.ones((1, 1, 1)), delta, avg_omega(dset), [0, 1], dset, enc, tau=1.0)
        np.testing.assert_allclose(out, [1 / np.sqrt(2)] * 2, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_integrated_is_disjoint_union(self, small_task, seed):
        data, dset, part, enc = _task_parts(small_task)
        r = np.random.default_rng(seed)
        masks = [frame_mask(enc.input_dims, 2)] * 3
        prompts = PromptSet([VisualPrompt(r.standard_normal(m.shape) * m, m, i)
                             for i, m in enumerate(masks)])
        om = estimate_prm(r.standard_normal((20, len(dset))), r.integers(0, 3, 20), dset)
        got = integrated_logits(data.images, prompts, om, part, dset, enc)
        S = similarity_matrix(data.images, prompts, part, dset, enc)
        np.testing.assert_allclose(got, logits_from_row(S, om), rtol=0, atol=1e-12)

    def test_tied_prompts_equal_single(self, small_task):
        data, dset, part, enc = _task_parts(small_task)
        m = frame_mask(enc.input_dims, 2)
        delta = VisualPrompt(np.random.default_rng(1).standard_normal(m.shape) * m, m)
        W = avg_omega(dset)
        a = integrated_logits(data.images, PromptSet.tied(delta, 3), W, part, dset, enc)
        b = integrated_logits(data.images, PromptSet([delta]), W, None, dset, enc)
        assert np.max(np.abs(a - b)) <= 1e-12


class TestGradient:
    def _instance(self, seed=0):
        r = np.random.default_rng(seed)
        enc = MLPEncoder((12, 12, 1), 6, seed=seed, hidden=16)
        dset = desc_set([0, 1, 2, 3, 0, 1, 2, 3, 1], dim=6, seed=seed)
        mask = frame_mask((12, 12, 1), 3)
        delta = VisualPrompt(0.5 * r.standard_normal(mask.shape) * mask, mask)
        X = r.standard_normal((6, 6, 6, 1))
        y = r.integers(0, 4, 6)
        om = estimate_prm(r.standard_normal((12, 9)), r.integers(0, 4, 12), dset, 2)
        idx = np.array([0, 1, 2, 3, 5, 8])
        return enc, dset, delta, X, y, om, idx

    def test_matches_central_differences(self):
        enc, dset, delta, X, y, om, idx = self._instance()
        tau = 0.2
        g, loss = prompt_gradient(X, y, delta, om, idx, dset, enc, tau)
        E, W = dset.embeddings[idx], om.values[idx]
        assert loss == pytest.approx(partition_loss(delta.pattern, X, y, E, W, enc, tau), abs=1e-12)
        coords = np.argwhere(delta.mask > 0)
        assert len(coords) >= 100
        h = 1e-5
        for c in map(tuple, coords):
            p = delta.pattern.copy()
            p[c] += h
            fp = partition_loss(p, X, y, E, W, enc, tau)
            p[c] -= 2 * h
            fm = partition_loss(p, X, y, E, W, enc, tau)
            fd = (fp - fm) / (2 * h)
            assert abs(g[c] - fd) / max(abs(fd), 1e-8) <= 1e-4, c

    def test_zero_off_mask(self):
        enc, dset, delta, X, y, om, idx = self._instance(1)
        g, _ = prompt_gradient(X, y, delta, om, idx, dset, enc, 0.2)
        assert np.all(g[delta.mask == 0] == 0)

    def test_single_class_has_zero_gradient(self):
        enc = MLPEncoder((6, 6, 1), 4, seed=0, hidden=8)
        dset = desc_set([0, 0, 0], dim=4)
        mask = frame_mask((6, 6, 1), 1)
        delta = VisualPrompt(mask * 0.3, mask)
        X = np.random.default_rng(0).standard_normal((5, 4, 4, 1))
        g, loss = prompt_gradient(X, np.zeros(5, int), delta, avg_omega(dset), [0, 1, 2], dset, enc)
        assert loss == 0 and np.all(g == 0)

    def test_table_encoder_refuses(self):
        enc = TableEncoder(np.zeros((2, 6, 6, 1)), np.eye(2))
        dset = desc_set([0, 1], dim=2)
        delta = VisualPrompt.zeros(frame_mask((6, 6, 1), 1))
        with pytest.raises(CapabilityError):
            prompt_gradient(np.zeros((1, 4, 4, 1)), [0], delta, avg_omega(dset), [0, 1], dset, enc)


class TestOptimizer:
    def test_plain_step_without_momentum(self, small_task):
        dset, enc = small_task.descriptions, small_task.encoder
        cfg = TrainConfig(momentum=0.0, learning_rate=0.5, epochs=10, frame_width=2)
        state = init_state(cfg, dset, None, enc)
        g = np.random.default_rng(0).standard_normal(state.prompts[0].mask.shape)
        sgd_momentum_step(state, [g], 0)
        sgd_momentum_step(state, [g], 0)
        np.testing.assert_array_equal(state.prompts[0].pattern, -1.0 * g * state.prompts[0].mask)

    def test_momentum_accumulates(self, small_task):
        dset, enc = small_task.descriptions, small_task.encoder
        cfg = TrainConfig(momentum=0.9, learning_rate=1.0, epochs=10, frame_width=2)
        state = init_state(cfg, dset, None, enc)
        m = state.prompts[0].mask
        sgd_momentum_step(state, [m], 0)
        sgd_momentum_step(state, [m], 0)
        np.testing.assert_allclose(state.prompts[0].pattern, -(1 + 1.9) * m, atol=1e-15)

    def test_schedule_endpoints(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 0) == 40.0
        assert abs(lr_at(cfg, 200)) <= 1e-12
        assert lr_at(cfg, 100) == pytest.approx(20.0)

    def test_large_scale_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.momentum, cfg.epochs) == (40.0, 0.9, 200)

    def test_non_finite_step(self, small_task):
        cfg = TrainConfig(frame_width=2)
        state = init_state(cfg, small_task.descriptions, None, small_task.encoder)
        g = np.where(state.prompts[0].mask > 0, np.inf, 0.0)
        with pytest.raises(DivergenceError) as info:
            sgd_momentum_step(state, [g], 7)
        assert info.value.epoch == 7


class TestTraining:
    def test_zero_epochs_is_zero_shot(self, small_task):
        data, dset, part, enc = _task_parts(small_task)
        cfg = TrainConfig(epochs=0, **DESK)
        state = train_dvp(data, dset, part, enc, cfg)
        assert all(np.all(p.pattern == 0) for p in state.prompts)
        for split in (small_task.train, small_task.test):
            assert evaluate_accuracy(split, state, dset, enc) == zero_shot_accuracy(
                split, dset, enc, "prm", 3, DESK["tau"], fit=data)

    def test_single_partition_reduces_to_vr(self, small_task):
        data, dset, _, enc = _task_parts(small_task)
        cfg = TrainConfig(epochs=5, batch_size=8, **DESK)
        a = train_dvp(data, dset, Partitioning.single(dset), enc, cfg.replace(reweighting="avg"))
        b = train_standard_vr(data, dset, enc, cfg.replace(method="vr-avg"))
        assert a.history == b.history
        assert np.array_equal(a.prompts[0].pattern, b.prompts[0].pattern)

    def test_descent(self, small_task):
        data, dset, part, enc = _task_parts(small_task)
        st = train_dvp(data, dset, part, enc, TrainConfig(epochs=20, **DESK))
        assert st.history[-1]["risk_dvp_integrated"] <= st.history[0]["risk_dvp_integrated"]
        assert len(st.history) == 21

    def test_vr_loss_decreases(self, small_task):
        data, dset, _, enc = _task_parts(small_task)
        for method in ("vr-avg", "vr-max"):
            st = train_standard_vr(data, dset, enc, TrainConfig(epochs=20, method=method, **DESK))
            assert st.history[-1]["risk_vr"] < st.history[0]["risk_vr"]

    def test_deterministic(self, small_task):
        data, dset, part, enc = _task_parts(small_task)
        cfg = TrainConfig(epochs=4, batch_size=5, **DESK)
        a = train_dvp(data, dset, part, enc, cfg)
        b = train_dvp(data, dset, part, enc, cfg)
        assert a.history == b.history

    def test_masks_and_omega_hold_every_step(self, small_task, monkeypatch):
        data, dset, part, enc = _task_parts(small_task)
        step, estimate = training.sgd_momentum_step, training._estimate_omega
        seen = {"steps": 0, "omegas": 0}

        def checked_step(state, grads, epoch, which=None):
            out = step(state, grads, epoch, which)
            for p in out.prompts:
                assert np.all(p.pattern * (1 - p.mask) == 0)
            seen["steps"] += 1
            return out

        def checked_estimate(*args):
            om = estimate(*args)
            check_reweighting(om, dset)
            seen["omegas"] += 1
            return om

        monkeypatch.setattr(training, "sgd_momentum_step", checked_step)
        monkeypatch.setattr(training, "_estimate_omega", checked_estimate)
        train_dvp(data, dset, part, enc, TrainConfig(epochs=3, batch_size=6, method="dvplite",
                                                     v=3, **DESK))
        assert seen["steps"] == 3 * 3 * 3 and seen["omegas"] == 4

    def test_runaway_loss_is_reported(self, small_task):
        # tau this small scales logits past the 1e6 loss guard
        data, dset, part, enc = _task_parts(small_task)
        cfg = TrainConfig(epochs=5, learning_rate=0.1, frame_width=2, tau=1e-9)
        with pytest.raises(DivergenceError) as info:
            train_dvp(data, dset, part, enc, cfg)
        assert info.value.epoch == 0

    def test_table_encoder_cannot_train(self, small_task):
        data, dset = small_task.train, small_task.descriptions
        enc = TableEncoder(np.zeros((2, 24, 24, 3)), np.ones((2, dset.embeddings.shape[1])))
        with pytest.raises(CapabilityError):
            train_dvp(data, dset, Partitioning.single(dset), enc, TrainConfig(epochs=1))

    def test_empty_data(self, small_task):
        with pytest.raises(DataError):
            evaluate_accuracy(Dataset(np.zeros((0, 20, 20, 3)), []), None, None, None)


class TestRisk:
    def test_uniform_logits(self):
        enc = LinearEncoder((4, 4, 1), 2, seed=0)
        e = np.array([1.0, 1.0])
        dset = DescriptionSet([Description(f"a{i}", i % 4, e) for i in range(8)])
        part = Partitioning(2, {f"a{i}": i // 4 for i in range(8)}, "cause")
        cfg = TrainConfig(frame_width=1, reweighting="avg")
        state = init_state(cfg, dset, part, enc)
        data = Dataset(np.random.default_rng(0).standard_normal((5, 2, 2, 1)), [0, 1, 2, 3, 0])
        rep = empirical_risk(data, state, dset, enc)
        np.testing.assert_allclose(rep.per_partition, [np.log(4)] * 2, atol=1e-12)
        assert rep.risk_dvp_sum == pytest.approx(2 * np.log(4), abs=1e-12)
        assert rep.risk_dvp_integrated == pytest.approx(np.log(4), abs=1e-12)

    def test_tied_vr_equals_integrated(self, small_task):
        data, dset, part, enc = _task_parts(small_task)
        state = init_state(TrainConfig(frame_width=2), dset, part, enc)
        m = state.prompts[0].mask
        delta = VisualPrompt(np.random.default_rng(4).standard_normal(m.shape) * m, m)
        state.prompts = PromptSet.tied(delta, 3)
        rep = empirical_risk(data, state, dset, enc)
        assert rep.risk_vr == rep.risk_dvp_integrated


class TestCheckpoint:
    def test_round_trip(self, small_task, tmp_path):
        data, dset, part, enc = _task_parts(small_task)
        st = train_dvp(data, dset, part, enc, TrainConfig(epochs=2, **DESK))
        save_checkpoint(st, dset, tmp_path / "c.npz")
        back = load_checkpoint(tmp_path / "c.npz", dset)
        for a, b in zip(st.prompts, back.prompts):
            assert np.array_equal(a.pattern.astype(np.float32).astype(np.float64), b.pattern)
            assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(back.omega.values, st.omega.values)
        assert back.config == st.config and back.epoch == 2

    def test_wrong_description_set(self, small_task, tmp_path):
        data, dset, part, enc = _task_parts(small_task)
        st = init_state(TrainConfig(frame_width=2), dset, part, enc)
        save_checkpoint(st, dset, tmp_path / "c.npz")
        other = DescriptionSet(list(reversed(dset.descriptions)))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c.npz", other)
