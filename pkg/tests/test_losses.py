import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cilforge.errors import ConfigError
from cilforge.losses import (
    TABLE1_CONFIDENCES,
    AgentConfig,
    Calibration,
    ReplayMode,
    calibration_input,
    ce_loss,
    epe_filter,
    init_calibration_raw,
    kd_loss,
    ls_label,
    replay_loss,
    sc_loss,
    sigmoid,
    table1_diagnostic,
    teacher_agent_label,
    teacher_agent_label_vjp,
)
from cilforge.seeding import make_rng


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += h
        lo[idx] -= h
        out[idx] = (f(hi) - f(lo)) / (2 * h)
    return out


def rel_err(a, n):
    return np.max(np.abs(a - n)) / max(1e-12, np.max(np.abs(n)))


class TestCalibration:
    def test_uniform(self):
        cfg = AgentConfig(calibration=Calibration.UNIFORM, uniform_value=0.5)
        np.testing.assert_array_equal(calibration_input(cfg, 3), [0.5, 0.5, 0.5])

    @pytest.mark.parametrize("mode", [Calibration.LEARNABLE, Calibration.FROZEN])
    def test_zero_raw_gives_half(self, mode):
        cfg = AgentConfig(calibration=mode, learnable_raw=np.zeros(2))
        np.testing.assert_array_equal(calibration_input(cfg, 2), [0.5, 0.5])

    def test_teacher_logistic(self):
        cfg = AgentConfig(calibration=Calibration.TEACHER)
        np.testing.assert_allclose(calibration_input(cfg, 2, teacher_logits=[2.0, -2.0]), [0.880797, 0.119203], atol=1e-6)

    def test_random_is_seeded_and_bounded(self):
        cfg = AgentConfig(calibration=Calibration.RANDOM)
        a = calibration_input(cfg, 4, rng=make_rng(1), batch=3)
        b = calibration_input(cfg, 4, rng=make_rng(1), batch=3)
        assert a.shape == (3, 4) and np.array_equal(a, b)
        assert np.all((a > 0) & (a < 1))

    def test_raw_init_small(self):
        raw = init_calibration_raw(50, make_rng(0))
        assert np.all((raw >= 0) & (raw < 0.01))

    def test_missing_inputs(self):
        with pytest.raises(ConfigError):
            calibration_input(AgentConfig(calibration=Calibration.TEACHER), 2)
        with pytest.raises(ConfigError):
            calibration_input(AgentConfig(calibration=Calibration.LEARNABLE), 2)


class TestTeacherAgent:
    def test_zero_calibration_is_onehot(self):
        np.testing.assert_array_equal(teacher_agent_label([1, 0], [0, 0], 0.2), [1, 0])

    def test_alpha_one(self):
        np.testing.assert_allclose(teacher_agent_label([1, 0], [0.5, 0.5], 1.0), [0.75, 0.25])

    def test_alpha_point_two(self):
        a, b = 1.5**0.2, 0.5**0.2
        expected = [a / (a + b), b / (a + b)]
        got = teacher_agent_label([1, 0], [0.5, 0.5], 0.2)
        np.testing.assert_allclose(got, expected, rtol=1e-14)
        np.testing.assert_allclose(got, [0.55471, 0.44529], atol=5e-6)

    @pytest.mark.parametrize(
        "y,p,alpha", [([1, 1], [0, 0], 0.5), ([0.5, 0.5], [0, 0], 0.5), ([1, 0], [1.2, 0], 0.5), ([1, 0], [0, 0], 0.0)]
    )
    def test_invalid(self, y, p, alpha):
        with pytest.raises(ConfigError):
            teacher_agent_label(y, p, alpha)

    @settings(max_examples=300, deadline=None)
    @given(
        seed=st.integers(0, 10**6),
        classes=st.integers(1, 12),
        alpha=st.floats(1e-3, 1.0),
    )
    def test_simplex_and_argmax(self, seed, classes, alpha):
        rng = make_rng(seed)
        true = int(rng.integers(classes))
        y = np.eye(classes)[true]
        p = rng.random(classes)
        chi = teacher_agent_label(y, p, alpha)
        assert np.all(chi >= 0)
        assert abs(chi.sum() - 1.0) <= 1e-12
        assert np.all(chi[true] >= chi)

    @settings(max_examples=100, deadline=None)
    @given(
        classes=st.integers(2, 10),
        alpha=st.floats(0.05, 1.0),
        u=st.floats(0.0, 0.95),
        du=st.floats(0.01, 0.05),
    )
    def test_more_calibration_softens(self, classes, alpha, u, du):
        y = np.eye(classes)[0]
        lo = teacher_agent_label(y, np.full(classes, u), alpha)[0]
        hi = teacher_agent_label(y, np.full(classes, min(1.0, u + du)), alpha)[0]
        assert hi < lo

    @pytest.mark.parametrize("classes", [2, 5, 10])
    @pytest.mark.parametrize("u", np.round(np.arange(0.1, 1.0, 0.1), 1))
    def test_label_smoothing_special_case(self, classes, u):
        y = np.eye(classes)[1]
        eps = classes * u / (1 + classes * u)
        np.testing.assert_allclose(
            teacher_agent_label(y, np.full(classes, u), 1.0), ls_label(classes, 1, eps), atol=1e-12, rtol=0
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_vjp_matches_finite_differences(self, seed):
        rng = make_rng(seed)
        c = 4
        y = np.eye(c)[int(rng.integers(c))]
        p = rng.uniform(0.1, 0.9, size=c)
        g = rng.normal(size=c)
        alpha = float(rng.uniform(0.1, 1.0))
        numeric = fd_grad(lambda q: float(teacher_agent_label(y, q, alpha) @ g), p)
        assert rel_err(teacher_agent_label_vjp(y, p, alpha, g), numeric) <= 1e-6


class TestLabelSmoothing:
    def test_zero_epsilon(self):
        np.testing.assert_array_equal(ls_label(4, 2, 0.0), np.eye(4)[2])

    def test_binary(self):
        np.testing.assert_allclose(ls_label(2, 0, 0.2), [0.9, 0.1])

    def test_batch(self):
        np.testing.assert_allclose(ls_label(3, [0, 2], 0.3), [[0.8, 0.1, 0.1], [0.1, 0.1, 0.8]])


class TestCrossEntropy:
    def test_tied(self):
        assert ce_loss([0.0, 0.0], 0)[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_three_to_one(self):
        assert ce_loss([math.log(3), 0.0], 0)[0] == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ce_loss([math.log(3), 0.0], 0)[0] == pytest.approx(0.287682, abs=1e-6)

    def test_stable_for_large_logits(self):
        loss, grad = ce_loss([1000.0, -1000.0], 1)
        assert loss == pytest.approx(2000.0) and np.all(np.isfinite(grad))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        o = make_rng(seed).normal(size=5) * 3
        assert rel_err(ce_loss(o, 2)[1], fd_grad(lambda z: ce_loss(z, 2)[0], o)) <= 1e-5


class TestSelfCorrection:
    def test_onehot_tied(self):
        assert sc_loss([0.0, 0.0], [1.0, 0.0])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_soft_label(self):
        expected = -0.75 * math.log(1 / (1 + math.exp(-2))) - 0.25 * math.log(1 / (1 + math.exp(2)))
        got = sc_loss([2.0, -2.0], [0.75, 0.25])[0]
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.626928, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = make_rng(seed)
        o, chi = rng.normal(size=4) * 3, rng.dirichlet(np.ones(4))
        assert rel_err(sc_loss(o, chi)[1], fd_grad(lambda z: sc_loss(z, chi)[0], o)) <= 1e-5

    @settings(max_examples=200, deadline=None)
    @given(o=st.floats(-8, 8), chi=st.floats(0.0, 1.0))
    def test_tied_binary_sign(self, o, chi):
        # logits (o, -o) with label (chi, 1 - chi): d/do = sigmoid(o) - chi
        _, g = sc_loss([o, -o], [chi, 1 - chi])
        d = g[0] - g[1]
        assert d == pytest.approx(float(sigmoid(np.array(o))) - chi, abs=1e-12)
        gap = float(sigmoid(np.array(o))) - chi
        if abs(gap) > 1e-9:
            assert (d > 0) == (gap > 0)


class TestDistillation:
    def test_equal_zero_logits(self):
        assert kd_loss([0.0, 0.0], [0.0, 0.0])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_equal_logits(self):
        assert kd_loss([2.0, -2.0], [2.0, -2.0])[0] == pytest.approx(0.365333, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = make_rng(seed)
        s, t = rng.normal(size=(2, 4)) * 2
        assert rel_err(kd_loss(s, t)[1], fd_grad(lambda z: kd_loss(z, t)[0], s)) <= 1e-5


class TestEPE:
    def test_all_correct(self):
        assert epe_filter([[2, 0], [0, 3]], [0, 1]).tolist() == [True, True]

    def test_wrong(self):
        assert epe_filter([[0, 1]], [0]).tolist() == [False]

    def test_mixed(self):
        assert epe_filter([[2, 0], [0, 1], [0, 5]], [0, 0, 1]).tolist() == [True, False, True]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6), b=st.integers(1, 8))
    def test_masked_loss_not_above_unmasked(self, seed, b):
        rng = make_rng(seed)
        logits, teacher = rng.normal(size=(2, b, 5))
        labels = rng.integers(0, 3, size=b)
        kd = replay_loss(ReplayMode.KD, logits, labels, 3, 0.0, AgentConfig(), teacher)
        epe = replay_loss(ReplayMode.KD_EPE, logits, labels, 3, 0.0, AgentConfig(), teacher)
        assert epe.loss <= kd.loss + 1e-15


def _batch(seed, b=4, c_all=6, c_old=4):
    rng = make_rng(seed)
    return rng.normal(size=(b, c_all)) * 2, rng.integers(0, c_old, size=b), rng.normal(size=(b, c_old)) * 2


class TestReplayLoss:
    def test_lambda_one_is_cross_entropy(self):
        o, y, t = _batch(0)
        for mode in (ReplayMode.KD, ReplayMode.LS, ReplayMode.SC_AGENT):
            res = replay_loss(mode, o, y, 4, 1.0, AgentConfig(calibration=Calibration.TEACHER), t)
            assert res.loss == pytest.approx(float(ce_loss(o, y)[0].mean()), abs=1e-12)
            np.testing.assert_allclose(res.grad_logits, ce_loss(o, y)[1] / 4, atol=1e-15)

    def test_lambda_zero_is_self_correction(self):
        o, y, _ = _batch(1)
        agent = AgentConfig(calibration=Calibration.UNIFORM, uniform_value=0.3, alpha=0.5)
        res = replay_loss(ReplayMode.SC_AGENT, o, y, 4, 0.0, agent)
        chi = teacher_agent_label(np.eye(4)[y], np.full((4, 4), 0.3), 0.5)
        assert res.loss == pytest.approx(float(sc_loss(o[:, :4], chi)[0].mean()), abs=1e-12)
        assert not np.any(res.grad_logits[:, 4:])

    def test_mixture_arithmetic(self):
        o, y, t = _batch(2)
        res = replay_loss(ReplayMode.KD, o, y, 4, 0.5, AgentConfig(), t)
        assert res.loss == pytest.approx(0.5 * res.ce_part + 0.5 * res.replay_part, abs=1e-15)
        assert 0.5 * 0.6 + 0.5 * 0.4 == pytest.approx(0.5)

    def test_finetune_contributes_nothing(self):
        o, y, _ = _batch(3)
        res = replay_loss(ReplayMode.FINETUNE, o, y, 4, 0.5, AgentConfig())
        assert res.loss == 0.0 and not np.any(res.grad_logits)

    def test_teacher_required(self):
        o, y, _ = _batch(4)
        with pytest.raises(ConfigError):
            replay_loss(ReplayMode.KD, o, y, 4, 0.5, AgentConfig())

    def test_labels_must_be_old(self):
        o, _, t = _batch(5)
        with pytest.raises(ConfigError):
            replay_loss(ReplayMode.KD, o, [0, 1, 2, 5], 4, 0.5, AgentConfig(), t)

    @pytest.mark.parametrize(
        "mode,calib",
        [
            (ReplayMode.KD, None),
            (ReplayMode.KD_EPE, None),
            (ReplayMode.LS, None),
            (ReplayMode.SC_AGENT, Calibration.UNIFORM),
            (ReplayMode.SC_AGENT, Calibration.TEACHER),
            (ReplayMode.SC_AGENT, Calibration.FROZEN),
            (ReplayMode.SC_AGENT, Calibration.LEARNABLE),
        ],
    )
    def test_logit_gradient(self, mode, calib):
        o, y, t = _batch(6)
        agent = AgentConfig(calibration=calib or Calibration.FROZEN, learnable_raw=np.array([0.3, -1.0, 0.5, 2.0]))
        res = replay_loss(mode, o, y, 4, 0.3, agent, t)
        numeric = fd_grad(lambda z: replay_loss(mode, z, y, 4, 0.3, agent, t).loss, o)
        assert rel_err(res.grad_logits, numeric) <= 1e-5

    def test_random_calibration_gradient_with_fixed_draws(self):
        o, y, _ = _batch(7)
        agent = AgentConfig(calibration=Calibration.RANDOM)
        res = replay_loss(ReplayMode.SC_AGENT, o, y, 4, 0.5, agent, rng=make_rng(3))
        numeric = fd_grad(lambda z: replay_loss(ReplayMode.SC_AGENT, z, y, 4, 0.5, agent, rng=make_rng(3)).loss, o)
        assert rel_err(res.grad_logits, numeric) <= 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_learnable_calibration_gradient(self, seed):
        o, y, _ = _batch(seed)
        raw = make_rng(seed, 1).normal(size=4)

        def loss(r):
            agent = AgentConfig(calibration=Calibration.LEARNABLE, learnable_raw=r)
            return replay_loss(ReplayMode.SC_AGENT, o, y, 4, 0.4, agent)

        assert rel_err(loss(raw).grad_raw, fd_grad(lambda r: loss(r).loss, raw)) <= 1e-5

    def test_frozen_has_no_raw_gradient(self):
        o, y, _ = _batch(8)
        agent = AgentConfig(calibration=Calibration.FROZEN, learnable_raw=np.zeros(4))
        assert replay_loss(ReplayMode.SC_AGENT, o, y, 4, 0.5, agent).grad_raw is None


class TestTableOne:
    def test_rows(self):
        expected = {0.9: (-0.3100, -0.2100), 0.8: (-0.3543, -0.2543), 0.2: (-0.6457, -0.5457), 0.1: (-0.6900, -0.5900)}
        rows = table1_diagnostic()
        assert [r[0] for r in rows] == list(TABLE1_CONFIDENCES)
        for conf, ce, ls in rows:
            assert abs(ce - expected[conf][0]) <= 5e-5
            assert abs(ls - expected[conf][1]) <= 5e-5

    def test_logistic_values(self):
        rows = dict((r[0], r[1]) for r in table1_diagnostic())
        assert rows[0.9] + 1 == pytest.approx(0.689974, abs=1e-6)
        assert rows[0.8] + 1 == pytest.approx(0.645656, abs=1e-6)
        assert rows[0.1] + 1 == pytest.approx(0.310026, abs=1e-6)

    def test_other_convention_disagrees(self):
        rows = table1_diagnostic(lambda c: c)
        assert abs(rows[0][1] - (-0.3100)) > 5e-5
