import math

import numpy as np
import pytest

from fovsearch import autodiff as ad
from fovsearch import irl, model as mdl
from fovsearch.core import ActionGrid, Fixation, Scanpath, SearchTrial
from fovsearch.irl import (ReplayBuffer, Transition, combined_loss,
                           expert_transitions, focal_loss, iq_loss, policy_dist,
                           recover_reward, render_gt_heatmaps, soft_value,
                           termination_class_weights, termination_loss)


class TestSoftValue:
    def test_two_equal_actions(self):
        assert soft_value([0.0, 0.0]) == pytest.approx(math.log(2))

    def test_constant_row_shift_identity(self):
        c = 3.7
        assert soft_value(np.full(640, c)) == pytest.approx(c + math.log(640))

    def test_matches_naive_sum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = rng.standard_normal(10) * 5
            naive = float(np.log(np.sum(np.exp(q.astype(np.longdouble)))))
            assert soft_value(q) == pytest.approx(naive, abs=1e-12)

    def test_stable_under_large_values(self):
        assert math.isfinite(soft_value([1000.0, 999.0]))


class TestPolicyDist:
    def test_uniform_for_equal_q(self):
        p = policy_dist(np.zeros(640))
        assert np.allclose(p, 1 / 640)
        assert p.sum() == pytest.approx(1.0, abs=1e-6)

    def test_argmax_invariant_under_tau(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal(64)
        for tau in (0.01, 0.1, 1.0, 10.0):
            assert np.argmax(policy_dist(q, tau)) == np.argmax(q)

    def test_two_action_value(self):
        p = policy_dist(np.array([1.0, 0.0]), tau=1.0)
        e = math.e
        assert p[0] == pytest.approx(e / (e + 1), abs=1e-12)
        assert p[1] == pytest.approx(1 / (e + 1), abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal(10)
        assert np.allclose(policy_dist(q, 0.5), policy_dist(q + 123.4, 0.5),
                           atol=1e-12)


def _tabular(q0, q1):
    """A 1-state/2-action instance: q_net returns the shared table Var."""
    table = ad.Var(np.array([q0, q1], dtype=np.float64))
    tr = Transition("im", "t", ("s",), 0, ("s",), True, False)
    q_net = lambda s: table
    tgt = lambda s: table.data
    return table, tr, q_net, tgt


class TestIqLoss:
    def test_closed_form_gradient_deterministic_expert(self):
        # minimizing drives the policy toward the expert's only action; the
        # gradient at (q0, q1) is (-1 + softmax0, softmax1)
        for q0, q1 in [(0.0, 0.0), (1.0, -1.0), (-2.0, 0.5)]:
            table, tr, q_net, tgt = _tabular(q0, q1)
            loss = iq_loss([tr], [("s",)], q_net, tgt, gamma=0.0)
            loss.backward()
            soft = np.exp([q0, q1]) / np.sum(np.exp([q0, q1]))
            assert table.grad[0] == pytest.approx(-1 + soft[0], abs=1e-12)
            assert table.grad[1] == pytest.approx(soft[1], abs=1e-12)

    def test_balanced_expert_stationary_at_equal_q(self):
        table = ad.Var(np.zeros(2))
        t0 = Transition("im", "t", ("s",), 0, ("s",), True, False)
        t1 = Transition("im", "t", ("s",), 1, ("s",), True, False)
        loss = iq_loss([t0, t1], [("s",)], lambda s: table, lambda s: table.data,
                       gamma=0.0)
        loss.backward()
        assert np.allclose(table.grad, 0.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal(5)
        trs = [Transition("im", "t", ("s",), a, ("s2",), True, False)
               for a in (0, 3, 3, 1)]
        gamma = 0.8

        def value(shift):
            qv = ad.Var(q + shift)
            tgt = lambda s: q + shift
            return float(iq_loss(trs, [("s",)], lambda s: qv, tgt, gamma).data)

        assert value(0.0) == pytest.approx(value(17.3), abs=1e-6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            iq_loss([], [], None, None, 0.5)

    def test_adam_training_matches_expert_frequencies(self):
        # deterministic expert: policy -> (1, 0); balanced expert -> (1/2, 1/2)
        for probs_want, actions in [((1.0, 0.0), [0]), ((0.5, 0.5), [0, 1])]:
            table = {"q": np.zeros(2, dtype=np.float32)}
            state = mdl.AdamState()
            trs = [Transition("im", "t", ("s",), a, ("s",), True, False)
                   for a in actions]
            for _ in range(5000):
                qv = ad.Var(table["q"].astype(np.float64))
                loss = iq_loss(trs, [("s",)], lambda s: qv, lambda s: qv.data,
                               gamma=0.0)
                loss.backward()
                mdl.adam_step(table, {"q": qv.grad}, state, lr=1e-4)
            learned = policy_dist(table["q"], tau=0.01)
            assert abs(learned[0] - probs_want[0]) <= 1e-2
            assert abs(learned[1] - probs_want[1]) <= 1e-2


class TestRecoverReward:
    def test_gamma_zero(self):
        tr = Transition("im", "t", ("s",), 1, ("s2",), False, False)
        q = {"s": np.array([1.0, 2.0]), "s2": np.array([5.0, 5.0])}
        r = recover_reward(tr, lambda s: q[s[0] if isinstance(s, tuple) else s],
                           lambda s: q["s2"], gamma=0.0)
        assert r == 2.0

    def test_terminal_ignores_successor(self):
        tr = Transition("im", "t", ("s",), 0, ("s2",), False, True)
        r = recover_reward(tr, lambda s: np.array([3.0, 0.0]),
                           lambda s: np.array([1e9, 1e9]), gamma=0.9)
        assert r == 3.0

    def test_uniform_q_identity(self):
        c, gamma, n = 2.0, 0.8, 640
        tr = Transition("im", "t", ("s",), 7, ("s2",), False, False)
        r = recover_reward(tr, lambda s: np.full(n, c), lambda s: np.full(n, c),
                           gamma=gamma)
        assert r == pytest.approx(c - gamma * (c + math.log(n)), abs=1e-9)

    def test_telescoping_on_three_step_chain(self):
        # hand computation on a chain s0 -> s1 -> s2 -> s3 (terminal)
        q = {"s0": np.array([1.0, 0.2]), "s1": np.array([0.5, 0.9]),
             "s2": np.array([0.1, -0.3]), "s3": np.array([0.0, 0.0])}
        gamma = 0.5
        actions = [0, 1, 0]
        states = ["s0", "s1", "s2", "s3"]
        trs = [Transition("im", "t", (states[i],), actions[i],
                          (states[i + 1],), i == 0, i == 2) for i in range(3)]
        q_net = lambda s: q[s[0]]
        rs = [recover_reward(tr, q_net, q_net, gamma) for tr in trs]
        v = {k: soft_value(v_) for k, v_ in q.items()}
        want = [q["s0"][0] - gamma * v["s1"], q["s1"][1] - gamma * v["s2"],
                q["s2"][0]]
        assert rs == pytest.approx(want, abs=1e-12)
        # gamma-discounted sum telescopes to Q(s0,a0) plus intermediate
        # advantage gaps (Q - V) accumulated with discounting
        total = sum(gamma ** i * r for i, r in enumerate(rs))
        gaps = (gamma * (q["s1"][1] - v["s1"]) + gamma ** 2 * (q["s2"][0] - v["s2"]))
        assert total == pytest.approx(q["s0"][0] + gaps, abs=1e-12)


class TestFocalLoss:
    def test_perfect_prediction_near_zero(self):
        gt = np.zeros((2, 4, 4))
        gt[0, 1, 1] = 1.0
        pred = np.where(gt == 1.0, 1 - 1e-4, 1e-4)
        assert focal_loss(pred, gt, n_centers=1) <= 1e-3

    def test_hand_value_center_cell(self):
        gt = np.zeros((1, 1, 1))
        gt[0, 0, 0] = 1.0
        pred = np.full((1, 1, 1), 0.5)
        want = -(0.5 ** 2) * math.log(0.5)
        assert float(focal_loss(pred, gt, n_centers=1)) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.1733, abs=1e-4)

    def test_hand_value_gaussian_shoulder(self):
        gt = np.full((1, 1, 1), 0.9)
        pred = np.full((1, 1, 1), 0.5)
        want = -((0.1) ** 4) * (0.5 ** 2) * math.log(0.5)
        assert float(focal_loss(pred, gt, n_centers=1)) == pytest.approx(want, abs=1e-12)

    def test_nonnegative_and_monotone(self):
        gt = np.zeros((1, 3, 3))
        gt[0, 1, 1] = 1.0
        prev = None
        for p in (0.2, 0.4, 0.6, 0.8, 0.95):
            pred = np.full((1, 3, 3), 1e-4)
            pred[0, 1, 1] = p
            val = float(focal_loss(pred, gt, n_centers=1))
            assert val >= 0
            if prev is not None:
                assert val < prev
            prev = val

    def test_var_path_matches_numpy(self):
        rng = np.random.default_rng(0)
        gt = np.zeros((3, 4, 4))
        gt[0, 1, 1] = 1.0
        gt[2, 3, 0] = 0.7
        pred = rng.uniform(0.05, 0.95, size=(3, 4, 4))
        a = float(focal_loss(pred, gt, n_centers=2))
        b = float(focal_loss(ad.Var(pred), gt, n_centers=2).data)
        assert a == pytest.approx(b, abs=1e-12)


class TestHeatmaps:
    def test_single_object_center_is_one(self):
        maps, n = render_gt_heatmaps([(44, (100, 100, 40, 40))], (20, 32))
        assert n == 1
        assert maps[43].max() == 1.0
        assert (maps[43] == 1.0).sum() == 1
        assert (maps[[i for i in range(80) if i != 43]] == 0).all()

    def test_same_category_overlap_takes_max(self):
        objs = [(5, (96, 96, 64, 64)), (5, (112, 112, 64, 64))]
        maps, n = render_gt_heatmaps(objs, (20, 32))
        assert n == 2
        assert maps.max() <= 1.0

    def test_empty_category_all_zero(self):
        maps, n = render_gt_heatmaps([], (20, 32))
        assert n == 0
        assert (maps == 0).all()

    def test_category_bounds_checked(self):
        with pytest.raises(ValueError):
            render_gt_heatmaps([(81, (0, 0, 10, 10))], (20, 32))


class TestTerminationLoss:
    def test_perfect_predictions_near_zero(self):
        assert termination_loss([1 - 1e-9, 1e-9], [1, 0]) <= 1e-6

    def test_balanced_labels_unit_weights(self):
        assert termination_class_weights([0, 1, 0, 1]) == (1.0, 1.0)

    def test_half_probs_give_log2_regardless_of_weights(self):
        labels = [1, 0, 0, 0, 1, 0]
        w = termination_class_weights(labels)
        loss = termination_loss([0.5] * 6, labels, w)
        assert loss == pytest.approx(math.log(2), abs=1e-9)

    def test_single_class_falls_back_to_plain_bce(self):
        assert termination_class_weights([0, 0, 0]) == (1.0, 1.0)


class TestCombinedLoss:
    def test_omega_zero(self):
        assert combined_loss(1.5, 99.0, omega=0.0) == 1.5

    def test_weighted_sum(self):
        assert combined_loss(0.5, 2.0, omega=0.1) == pytest.approx(0.7)

    def test_gradient_scales_with_omega(self):
        for omega in (0.1, 0.2):
            det = ad.Var(np.array(2.0))
            total = combined_loss(ad.Var(np.array(0.5)), det, omega=omega)
            total.backward()
            assert float(det.grad) == pytest.approx(omega)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=5)
        buf.extend(range(8))
        assert len(buf) == 5
        assert list(buf) == [3, 4, 5, 6, 7]

    def test_capacity_larger_than_data_changes_nothing(self):
        a, b = ReplayBuffer(capacity=100), ReplayBuffer(capacity=200)
        a.extend(range(10))
        b.extend(range(10))
        assert list(a) == list(b)

    def test_sample_seeded(self):
        buf = ReplayBuffer(capacity=10)
        buf.extend(range(10))
        s1 = buf.sample(np.random.default_rng(5), 4)
        s2 = buf.sample(np.random.default_rng(5), 4)
        assert s1 == s2

    def test_sample_empty_raises(self):
        with pytest.raises(ValueError):
            ReplayBuffer(4).sample(np.random.default_rng(0), 1)


class TestExpertTransitions:
    def test_states_are_snapped_and_centered(self):
        grid = ActionGrid()
        center = Fixation(256.0, 160.0)
        sp = Scanpath([Fixation(250.1, 158.3), Fixation(33.0, 47.0),
                       Fixation(470.9, 300.2)], terminated=True)
        trial = SearchTrial("im", "cup", 0, False, sp)
        trs = expert_transitions(trial, grid, center)
        assert len(trs) == 2
        assert trs[0].state == (center,)
        assert trs[0].is_initial and not trs[0].is_terminal
        assert trs[1].is_terminal
        # actions discretize the raw fixations; states hold cell centers
        from fovsearch.core import action_to_fixation, fixation_to_action
        a0 = fixation_to_action(Fixation(33.0, 47.0), grid)
        assert trs[0].action == a0
        assert trs[0].next_state[-1] == action_to_fixation(a0, grid)

    def test_unterminated_scanpath_has_no_terminal(self):
        sp = Scanpath([Fixation(256, 160), Fixation(10, 10)], terminated=False)
        trs = expert_transitions(SearchTrial("im", "cup", 0, False, sp),
                                 ActionGrid(), Fixation(256, 160))
        assert not any(t.is_terminal for t in trs)
