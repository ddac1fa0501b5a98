"""Preference probabilities, reward models, ensembles, teachers, and the log."""
import json

import numpy as np
import pytest

from stagepref.mdp import Trajectory, make_rng, make_segment
from stagepref.optim import flatten_params, set_params
from stagepref.rewards import (
    LabeledPair,
    NetworkRewardModel,
    PreferenceLog,
    PreferenceRecord,
    RewardEnsemble,
    TabularRewardModel,
    Teacher,
    bt_log_probs,
    label_pair,
    make_tabular_ensemble,
    preference_probability,
    reward_loss_and_grad,
    timestamp,
)


def make_pair(states0, actions0, states1, actions1, label) -> LabeledPair:
    return LabeledPair(
        states0=np.asarray(states0, dtype=int),
        actions0=np.asarray(actions0, dtype=int),
        states1=np.asarray(states1, dtype=int),
        actions1=np.asarray(actions1, dtype=int),
        label=label,
    )


def random_pairs(n_pairs, n_states, n_actions, length, rng) -> list[LabeledPair]:
    out = []
    for _ in range(n_pairs):
        out.append(make_pair(
            rng.integers(0, n_states, length), rng.integers(0, n_actions, length),
            rng.integers(0, n_states, length), rng.integers(0, n_actions, length),
            int(rng.integers(2)),
        ))
    return out


class TestPreferenceProbability:
    def test_log_probs_are_complementary(self):
        lp0, lp1 = bt_log_probs(np.array([1.3]), np.array([0.2]))
        assert np.exp(lp0) + np.exp(lp1) == pytest.approx(1.0, abs=1e-12)

    def test_equal_sums_give_half(self):
        lp0, lp1 = bt_log_probs(np.array([2.0]), np.array([2.0]))
        assert np.exp(lp1)[0] == pytest.approx(0.5)

    def test_probability_uses_summed_rewards(self):
        model = TabularRewardModel(3, 2)
        model.psi = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
        pair = make_pair([0], [0], [2], [1], label=1)  # sums 1 vs 2
        assert preference_probability(model, pair) == pytest.approx(
            1.0 / (1.0 + np.exp(1.0 - 2.0)))

    def test_probability_is_shift_invariant(self):
        # adding a constant to every entry moves both segment sums equally
        # (equal segment lengths), so the preference cannot change
        rng = make_rng(0)
        model = TabularRewardModel(4, 3)
        model.psi = rng.normal(size=(4, 3))
        pair = make_pair([0, 1], [0, 1], [2, 3], [2, 0], label=0)
        before = preference_probability(model, pair)
        model.psi = model.psi + 17.3
        assert preference_probability(model, pair) == pytest.approx(before, abs=1e-12)


class TestTabularGradients:
    @pytest.mark.parametrize("weight_decay", [0.0, 0.05])
    def test_matches_finite_differences(self, weight_decay):
        rng = make_rng(1)
        model = TabularRewardModel(5, 3, init_scale=0.4, rng=rng,
                                   weight_decay=weight_decay)
        pairs = random_pairs(6, 5, 3, 4, rng)
        loss, (grad,) = reward_loss_and_grad(model, pairs)
        eps = 1e-6
        for s, a in [(0, 0), (1, 2), (3, 1), (4, 2)]:
            model.psi[s, a] += eps
            up = model.loss_and_grad(pairs)[0]
            model.psi[s, a] -= 2 * eps
            down = model.loss_and_grad(pairs)[0]
            model.psi[s, a] += eps
            fd = (up - down) / (2 * eps)
            assert grad[s, a] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_rejects_unlabeled_pairs(self):
        model = TabularRewardModel(3, 2)
        pair = make_pair([0], [0], [1], [1], label=None)
        with pytest.raises(ValueError, match="0 or 1"):
            model.loss_and_grad([pair])
        with pytest.raises(ValueError, match="empty"):
            model.loss_and_grad([])

    def test_training_drives_loss_down(self):
        rng = make_rng(2)
        model = TabularRewardModel(6, 2, lr=0.1, init_scale=0.3, rng=rng)
        pairs = random_pairs(10, 6, 2, 3, rng)
        first = model.training_step(pairs)
        for _ in range(150):
            last = model.training_step(pairs)
        assert last < first

    def test_weight_decay_bounds_table_scale(self):
        # the pairwise loss is scale-free: with separable labels the
        # unpenalized table inflates past any fixed bound while the
        # penalized one settles
        pairs = [make_pair([0], [0], [1], [0], label=1)] * 4
        free = TabularRewardModel(2, 1, lr=0.1)
        pinned = TabularRewardModel(2, 1, lr=0.1, weight_decay=0.1)

        def scale_after(model, steps):
            for _ in range(steps):
                model.training_step(pairs)
            return float(np.abs(model.psi).max())

        free_early, free_late = scale_after(free, 400), scale_after(free, 400)
        pinned_early, pinned_late = scale_after(pinned, 400), scale_after(pinned, 400)
        assert free_late > free_early + 0.5  # keeps inflating
        assert abs(pinned_late - pinned_early) < 0.05  # settled
        assert free_late > 2.0 * pinned_late

    def test_json_round_trip_keeps_weight_decay(self):
        rng = make_rng(4)
        model = TabularRewardModel(4, 2, init_scale=0.2, rng=rng, weight_decay=0.07)
        back = TabularRewardModel.from_json_dict(model.to_json_dict())
        np.testing.assert_allclose(back.psi, model.psi)
        assert back.weight_decay == pytest.approx(0.07)

    def test_rejects_negative_weight_decay(self):
        with pytest.raises(ValueError):
            TabularRewardModel(2, 2, weight_decay=-0.1)


class TestNetworkRewardModel:
    def test_gradient_matches_finite_differences(self):
        rng = make_rng(5)
        feats = rng.random((5, 3))
        model = NetworkRewardModel(feats, n_actions=2, hidden=(6,), rng=rng)
        pairs = random_pairs(4, 5, 2, 3, rng)
        loss, grads = model.loss_and_grad(pairs)
        flat = flatten_params(model.params)
        gflat = flatten_params(grads)
        eps = 1e-6
        idx = rng.choice(flat.size, size=12, replace=False)
        for i in idx:
            probe = flat.copy()
            probe[i] += eps
            set_params(model.params, probe)
            up = model.loss_and_grad(pairs)[0]
            probe[i] -= 2 * eps
            set_params(model.params, probe)
            down = model.loss_and_grad(pairs)[0]
            fd = (up - down) / (2 * eps)
            assert gflat[i] == pytest.approx(fd, rel=1e-3, abs=1e-6)
            probe[i] += eps
            set_params(model.params, probe)

    def test_table_matches_predict(self):
        rng = make_rng(6)
        model = NetworkRewardModel(rng.random((4, 2)), n_actions=3, hidden=(8,), rng=rng)
        table = model.table()
        for a in range(3):
            np.testing.assert_allclose(
                table[:, a], model.predict(np.arange(4), np.full(4, a)))

    def test_json_round_trip(self):
        rng = make_rng(7)
        model = NetworkRewardModel(rng.random((3, 2)), n_actions=2, hidden=(4,), rng=rng)
        back = NetworkRewardModel.from_json_dict(model.to_json_dict())
        np.testing.assert_allclose(back.table(), model.table(), atol=1e-12)


class TestRewardEnsemble:
    def test_mean_table_and_predict(self):
        a = TabularRewardModel(2, 2)
        b = TabularRewardModel(2, 2)
        a.psi = np.ones((2, 2))
        b.psi = 3.0 * np.ones((2, 2))
        ens = RewardEnsemble(members=[a, b])
        np.testing.assert_allclose(ens.mean_table(), 2.0)
        np.testing.assert_allclose(
            ens.mean_predict(np.array([0]), np.array([1])), [2.0])

    def test_disagreement_zero_for_identical_members(self):
        a = TabularRewardModel(3, 2)
        b = TabularRewardModel(3, 2)
        ens = RewardEnsemble(members=[a, b])
        pair = make_pair([0, 1], [0, 1], [2, 0], [1, 0], label=0)
        assert ens.disagreement(pair) == pytest.approx(0.0)

    def test_disagreement_is_member_probability_variance(self):
        rng = make_rng(8)
        members = [TabularRewardModel(3, 2, init_scale=0.8, rng=rng) for _ in range(3)]
        ens = RewardEnsemble(members=members)
        pair = make_pair([0, 1], [0, 1], [2, 0], [1, 0], label=0)
        probs = [preference_probability(m, pair) for m in members]
        assert ens.disagreement(pair) == pytest.approx(np.var(probs), abs=1e-12)

    def test_stacked_training_matches_per_pair_path(self):
        # equal-length pairs take the vectorized path; ragged ones fall back.
        # both must produce identical parameters from identical starts.
        rng = make_rng(9)
        pairs = random_pairs(8, 5, 3, 4, rng)
        fast = TabularRewardModel(5, 3, lr=0.05, init_scale=0.3, rng=make_rng(10))
        slow = TabularRewardModel(5, 3, lr=0.05, init_scale=0.3, rng=make_rng(10))
        np.testing.assert_allclose(fast.psi, slow.psi)
        fast_loss = RewardEnsemble(members=[fast]).train(pairs, steps=5)
        slow_loss = 0.0
        for _ in range(5):
            slow_loss = slow.training_step(pairs)
        np.testing.assert_allclose(fast.psi, slow.psi, atol=1e-12)
        assert fast_loss == pytest.approx(slow_loss, abs=1e-12)

    def test_ragged_pairs_still_train(self):
        rng = make_rng(11)
        ens = make_tabular_ensemble(4, 2, 2, rng, lr=0.1)
        pairs = [
            make_pair([0, 1], [0, 1], [2], [1], label=1),
            make_pair([3], [0], [1, 2], [1, 0], label=0),
        ]
        loss = ens.train(pairs, steps=3)
        assert np.isfinite(loss)

    def test_needs_members(self):
        with pytest.raises(ValueError):
            RewardEnsemble(members=[])

    def test_make_tabular_ensemble_varies_inits(self):
        ens = make_tabular_ensemble(4, 3, 3, make_rng(12), init_scale=0.5)
        assert len(ens.members) == 3
        assert not np.allclose(ens.members[0].psi, ens.members[1].psi)

    def test_bags_need_one_per_member(self):
        ens = make_tabular_ensemble(4, 2, 2, make_rng(13))
        pairs = random_pairs(4, 4, 2, 3, make_rng(14))
        with pytest.raises(ValueError):
            ens.train(pairs, steps=1, bags=[[0, 1]])

    def test_bag_indices_must_point_into_pairs(self):
        ens = make_tabular_ensemble(4, 2, 2, make_rng(13))
        pairs = random_pairs(4, 4, 2, 3, make_rng(14))
        with pytest.raises(ValueError):
            ens.train(pairs, steps=1, bags=[[0], [4]])
        with pytest.raises(ValueError):
            ens.train(pairs, steps=1, bags=[[-1], [0]])

    def test_empty_bag_falls_back_to_full_set(self):
        pairs = random_pairs(6, 4, 2, 3, make_rng(15))
        a = make_tabular_ensemble(4, 2, 1, make_rng(16), init_scale=0.4)
        b = make_tabular_ensemble(4, 2, 1, make_rng(16), init_scale=0.4)
        loss_a = a.train(pairs, steps=4)
        loss_b = b.train(pairs, steps=4, bags=[[]])
        np.testing.assert_allclose(a.members[0].psi, b.members[0].psi, atol=1e-12)
        assert loss_a == pytest.approx(loss_b, abs=1e-12)

    def test_bagged_members_fit_their_own_resample(self):
        # a member bagged onto a single pair must match a model trained on
        # that pair alone, not on the full set
        pairs = random_pairs(6, 4, 2, 3, make_rng(17))
        ens = make_tabular_ensemble(4, 2, 2, make_rng(18), init_scale=0.4)
        solo = TabularRewardModel(4, 2, init_scale=0.4, rng=make_rng(18))
        np.testing.assert_allclose(ens.members[0].psi, solo.psi)
        ens.train(pairs, steps=5, bags=[[0], [1, 2, 3]])
        for _ in range(5):
            solo.training_step([pairs[0]])
        np.testing.assert_allclose(ens.members[0].psi, solo.psi, atol=1e-12)
        assert not np.allclose(ens.members[0].psi, ens.members[1].psi)

    def test_bag_repetition_reweights_pairs(self):
        # repeating an index is the bootstrap's with-replacement multiplicity;
        # the duplicated pair must pull harder than it does unduplicated
        pairs = random_pairs(2, 4, 2, 3, make_rng(19))
        once = make_tabular_ensemble(4, 2, 1, make_rng(20), init_scale=0.0)
        thrice = make_tabular_ensemble(4, 2, 1, make_rng(20), init_scale=0.0)
        once.train(pairs, steps=3, bags=[[0, 1]])
        thrice.train(pairs, steps=3, bags=[[0, 0, 0, 1]])
        assert not np.allclose(once.members[0].psi, thrice.members[0].psi)

    def test_ragged_pairs_train_with_bags(self):
        ens = make_tabular_ensemble(4, 2, 2, make_rng(21), lr=0.1)
        pairs = [
            make_pair([0, 1], [0, 1], [2], [1], label=1),
            make_pair([3], [0], [1, 2], [1, 0], label=0),
        ]
        loss = ens.train(pairs, steps=3, bags=[[0], [1, 1]])
        assert np.isfinite(loss)


class TestTeachers:
    def test_oracle_prefers_higher_sum(self):
        rng = make_rng(13)
        t = Teacher(kind="oracle")
        assert label_pair(t, np.array([1.0, 1.0]), np.array([3.0, 3.0]), rng) == 1
        assert label_pair(t, np.array([5.0]), np.array([0.0]), rng) == 0

    def test_oracle_breaks_ties_randomly(self):
        rng = make_rng(14)
        t = Teacher(kind="oracle")
        labels = {label_pair(t, np.array([2.0]), np.array([2.0]), rng)
                  for _ in range(60)}
        assert labels == {0, 1}

    def test_error_teacher_flip_rate(self):
        rng = make_rng(15)
        t = Teacher(kind="error", epsilon=0.25)
        flips = 0
        n = 4000
        for _ in range(n):
            flips += label_pair(t, np.array([0.0]), np.array([1.0]), rng) == 0
        assert flips / n == pytest.approx(0.25, abs=0.02)

    def test_myopic_weights_recent_steps(self):
        # equal sums, mass at different ends: the later-heavy segment wins
        # because weights rise toward the final step
        rng = make_rng(16)
        t = Teacher(kind="myopic", discount=0.5)
        early = np.array([1.0, 0.0])
        late = np.array([0.0, 1.0])
        assert label_pair(t, early, late, rng) == 1
        assert label_pair(t, late, early, rng) == 0

    def test_inconsistent_mixes_subteachers(self):
        # on a pair where myopic and oracle-with-errors disagree sometimes,
        # repeated labels must not be constant
        rng = make_rng(17)
        t = Teacher(kind="inconsistent")
        labels = [label_pair(t, np.array([1.0, 0.0]), np.array([0.0, 1.0]), rng)
                  for _ in range(200)]
        assert 0 < sum(labels) < 200

    def test_human_teacher_defers(self):
        rng = make_rng(18)
        assert label_pair(Teacher(kind="human"), np.array([1.0]),
                          np.array([2.0]), rng) is None

    def test_teacher_validation(self):
        with pytest.raises(ValueError):
            Teacher(kind="psychic")
        with pytest.raises(ValueError):
            Teacher(kind="error", epsilon=1.5)
        with pytest.raises(ValueError):
            Teacher(kind="myopic", discount=0.0)


class TestPreferenceRecordsAndLog:
    def make_traj(self):
        return Trajectory(states=np.arange(6), actions=np.zeros(6, dtype=int),
                          rewards=np.zeros(6), final_state=5)

    def make_record(self, label=1):
        traj = self.make_traj()
        seg0 = make_segment(0, traj, 0, 3)
        seg1 = make_segment(0, traj, 2, 3)
        return PreferenceRecord(sigma0=seg0, sigma1=seg1, label=label,
                                teacher="oracle", created_at=timestamp(),
                                selector="uniform", query_id="q1")

    def test_trainable_and_resolve(self):
        rec = self.make_record(label=1)
        assert rec.trainable()
        pair = rec.resolve([self.make_traj()])
        np.testing.assert_array_equal(pair.states0, [0, 1, 2])
        np.testing.assert_array_equal(pair.states1, [2, 3, 4])
        assert pair.label == 1

    def test_unlabeled_records_are_not_trainable(self):
        rec = self.make_record(label=None)
        assert not rec.trainable()
        with pytest.raises(ValueError):
            rec.resolve([self.make_traj()])
        assert not self.make_record(label="skip").trainable()

    def test_json_round_trip(self):
        rec = self.make_record()
        back = PreferenceRecord.from_json_dict(rec.to_json_dict())
        assert back == rec

    def test_log_persists_and_reloads(self, tmp_path):
        path = str(tmp_path / "prefs.jsonl")
        log = PreferenceLog(path)
        log.append(self.make_record(label=1))
        log.append(self.make_record(label=None))
        log.close()

        # every append hits the disk immediately: two JSONL lines exist
        lines = [l for l in open(path, encoding="utf-8").read().splitlines() if l]
        assert len(lines) == 2
        json.loads(lines[0])

        reopened = PreferenceLog(path)
        assert len(reopened) == 2
        assert len(reopened.trainable_records()) == 1
        reopened.append(self.make_record(label=0))
        reopened.close()
        assert len(PreferenceLog(path)) == 3

    def test_memory_only_log(self):
        log = PreferenceLog(None)
        log.append(self.make_record())
        assert len(log) == 1 and log.path is None
