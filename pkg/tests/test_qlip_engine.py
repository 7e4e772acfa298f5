import logging
from dataclasses import replace

import numpy as np
import pytest

from engines.autograd import DiffTensor, Tape, backward, finite_difference_gradient, parameter, reduce_mean, squared_error
from engines.diffusion_engine import Denoiser, QuantizedMode, build_schedule, collect_calibration, denoise_forward
from engines.metrics_engine import compute_fab
from engines.qlip_engine import (
    VARIANTS,
    Q2BParams,
    T2QModel,
    merge_bit_plans,
    plan_for_quality,
    plans_for_qualities,
    predict_quality,
    q2b_objective,
    q2b_probs,
    q2b_probs_tensor,
    q2b_relaxed_objective,
    qlip_loss,
    select_bits,
    t2q_forward,
    train_q2b,
    train_t2q,
)
from engines.quant_engine import MixtureRelaxation, build_quant_store
from errors import ContractViolation, NumericFailure
from models import BitMenu

MENU = BitMenu(6, 8, 10, weight_bits=8)


def _random_params(rng, k=3, steps=6, group_size=2, forced=1, variant="full", menu=MENU):
    params = Q2BParams.initialise(k, steps, group_size, forced, menu, variant=variant)
    params.s.data = rng.normal(0, 4, size=params.s.shape)
    params.o.data = rng.normal(0, 2, size=params.o.shape)
    params.u_m.data = rng.normal(0, 2, size=params.u_m.shape)
    params.u_h.data = rng.normal(0, 2, size=params.u_h.shape)
    return params


class TestQ2BProbabilities:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_simplex(self, variant):
        rng = np.random.default_rng(0)
        for _ in range(20):
            params = _random_params(rng, k=4, steps=50, group_size=7, forced=5, variant=variant)
            q = rng.uniform(0, 1, size=500)
            taus = rng.integers(1, 51, size=500)
            p_low, p_med, p_high = (p.data for p in q2b_probs_tensor(q, taus, params))
            np.testing.assert_allclose(p_low + p_med + p_high, 1.0, rtol=0, atol=1e-12)
            for p in (p_low, p_med, p_high):
                assert np.all((p >= 0) & (p <= 1))

    def test_forced_window_never_low(self):
        rng = np.random.default_rng(1)
        params = _random_params(rng, steps=20, group_size=4, forced=3)
        for q in rng.uniform(0, 1, size=50):
            for tau in (1, 2, 3):
                assert np.all(q2b_probs(q, tau, params).p_low == 0.0)
            assert not np.any(plan_for_quality(q, params)[:, :3] == MENU.b_low)

    def test_group_sharing(self):
        rng = np.random.default_rng(2)
        params = _random_params(rng, steps=12, group_size=4, forced=0)
        for tau in range(1, 13):
            first = 4 * ((tau - 1) // 4) + 1
            np.testing.assert_array_equal(
                q2b_probs(0.3, tau, params).stacked(), q2b_probs(0.3, first, params).stacked()
            )

    def test_parameter_count(self):
        assert Q2BParams.initialise(6, 100, 20, 10, MENU).parameter_count == 2 * 6 + 2 * 6 * 5
        assert Q2BParams.initialise(3, 10, 3, 1, MENU).parameter_count == 2 * 3 + 2 * 3 * 4

    def test_worked_example(self):
        params = Q2BParams.initialise(1, 10, 5, 0, MENU)
        params.u_h.data = np.full((1, 2), 2.0)
        probs = q2b_probs(0.8, 4, params)
        assert probs.p_high[0] == pytest.approx(0.6769, abs=1e-4)
        assert probs.p_low[0] == pytest.approx(0.1158, abs=1e-4)
        assert probs.p_med[0] == pytest.approx(0.2073, abs=1e-4)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_bits_escalate_with_quality(self, variant):
        rng = np.random.default_rng(11)
        qualities = np.linspace(0.0, 1.0, 41)
        for _ in range(10):
            params = _random_params(rng, k=3, steps=12, group_size=4, forced=2, variant=variant)
            params.s.data = np.abs(params.s.data)
            taus = np.arange(1, 13)
            p_high = np.stack([
                q2b_probs_tensor(np.full(12, q), taus, params)[2].data for q in qualities
            ])
            assert np.all(np.diff(p_high, axis=0) >= -1e-12)
            plans = plans_for_qualities(qualities, params)
            assert np.all(np.diff(plans, axis=0) >= 0)

    def test_q_only_uses_two_bit_widths(self):
        rng = np.random.default_rng(3)
        params = _random_params(rng, steps=10, variant="q_only")
        plans = plans_for_qualities(rng.uniform(0, 1, size=30), params)
        assert set(np.unique(plans).tolist()) <= {MENU.b_low, MENU.b_high}

    def test_q_plus_h_never_low(self):
        rng = np.random.default_rng(4)
        params = _random_params(rng, steps=10, forced=0, variant="q_plus_h")
        probs = q2b_probs_tensor(rng.uniform(0, 1, 40), rng.integers(1, 11, 40), params)
        np.testing.assert_array_equal(probs[0].data, 0.0)

    def test_q_plus_m_high_equals_pq(self):
        params = Q2BParams.initialise(3, 10, 2, 0, MENU, variant="q_plus_m")
        probs = q2b_probs(1.0, 5, params)
        # s = 4, o = 0: p_q = σ(2)
        np.testing.assert_allclose(probs.p_high, 1 / (1 + np.exp(-2.0)))

    def test_quality_clamped_with_one_warning(self, caplog):
        params = Q2BParams.initialise(3, 10, 2, 0, MENU)
        with caplog.at_level(logging.WARNING, logger="engines.qlip_engine"):
            high = q2b_probs(1.7, 4, params)
            q2b_probs(-0.2, 4, params)
        np.testing.assert_array_equal(high.stacked(), q2b_probs(1.0, 4, params).stacked())
        assert sum("clamping" in r.message for r in caplog.records) == 1

    def test_step_out_of_range(self):
        params = Q2BParams.initialise(3, 10, 2, 0, MENU)
        with pytest.raises(ContractViolation):
            q2b_probs(0.5, 11, params)

    def test_unknown_variant(self):
        with pytest.raises(ContractViolation):
            Q2BParams.initialise(3, 10, 2, 0, MENU, variant="q_plus_x")

    def test_records_keep_everything(self):
        params = _random_params(np.random.default_rng(5), variant="q_plus_m")
        rebuilt = Q2BParams.from_records(params.to_records())
        assert (rebuilt.variant, rebuilt.menu, rebuilt.group_size, rebuilt.forced_steps) == (
            "q_plus_m", MENU, 2, 1
        )
        np.testing.assert_array_equal(rebuilt.u_h.data, params.u_h.data)


class TestBitSelection:
    def test_ties_go_low(self):
        assert select_bits((np.array([1 / 3]), np.array([1 / 3]), np.array([1 / 3])), MENU).tolist() == [6]
        assert select_bits((np.array([0.0]), np.array([0.5]), np.array([0.5])), MENU).tolist() == [8]

    def test_plan_follows_window(self):
        params = Q2BParams.initialise(3, 10, 5, 2, MENU)
        params.o.data = np.full(3, -8.0)
        params.u_m.data = np.full((3, 2), -8.0)
        plan = plan_for_quality(0.0, params)
        assert plan.shape == (3, 10)
        # forced steps: p_q = 1 and p_med = p_high = 0.5, tie resolved to the lower bit
        assert np.all(plan[:, :2] == MENU.b_med)
        assert np.all(plan[:, 2:] == MENU.b_low)

    def test_merge_is_elementwise_max(self):
        rng = np.random.default_rng(6)
        plans = rng.choice(MENU.bits, size=(5, 3, 4))
        np.testing.assert_array_equal(merge_bit_plans(plans), plans.max(axis=0))
        np.testing.assert_array_equal(merge_bit_plans([plans[0]]), plans[0])


class TestLoss:
    def test_bit_penalty_only_when_predictions_match(self):
        eps = np.ones((2, 2))
        probs = (np.array([0.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        loss = qlip_loss(eps, eps, probs, MENU, lambda_bit=1.0)
        assert loss.item() == pytest.approx(18.0)

    def test_lambda_zero_is_plain_mse(self):
        probs = (np.array([1.0]), np.array([0.0]), np.array([0.0]))
        loss = qlip_loss(np.zeros((1, 2)), np.array([[1.0, 3.0]]), probs, MENU, lambda_bit=0.0)
        assert loss.item() == pytest.approx(5.0)

    def test_menu_mismatch(self, denoiser, store):
        params = Q2BParams.initialise(3, 6, 2, 0, BitMenu(4, 6, 8, weight_bits=8))
        with pytest.raises(ContractViolation):
            q2b_objective(params, denoiser, store, np.zeros((1, 2)), 3, np.zeros((1, 6)), np.array([0.5]), 1.0)


def _flat(params):
    return np.concatenate([p.data.reshape(-1) for p in params.trainable().values()])


def _assign(params, theta):
    offset = 0
    for p in params.trainable().values():
        p.data = theta[offset:offset + p.size].reshape(p.shape)
        offset += p.size


class TestGradients:
    @pytest.mark.parametrize("seed", range(50))
    def test_relaxed_objective_matches_finite_differences(self, seed, denoiser, store, schedule):
        rng = np.random.default_rng(seed)
        params = _random_params(rng, k=3, steps=schedule.steps, group_size=2, forced=1)
        params.s.data *= 0.25
        batch = 3
        x_t = rng.standard_normal((batch, 2))
        t = rng.integers(1, schedule.steps + 1, size=batch)
        z = rng.standard_normal((batch, 6))
        q = rng.uniform(0, 1, size=batch)
        relaxation = MixtureRelaxation()
        lam = 0.01

        with Tape() as tape:
            loss = q2b_relaxed_objective(params, denoiser, store, x_t, t, z, q, lam, relaxation)
        backward(loss, tape)
        analytic = np.concatenate([p.grad.reshape(-1) for p in params.trainable().values()])

        theta0 = _flat(params)

        def objective(theta):
            _assign(params, theta)
            return q2b_relaxed_objective(params, denoiser, store, x_t, t, z, q, lam, relaxation).item()

        numeric = finite_difference_gradient(objective, theta0, h=1e-6)
        _assign(params, theta0)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_denoiser_input_gradient(self, seed, denoiser, store):
        rng = np.random.default_rng(100 + seed)
        x0 = rng.standard_normal((2, 2))
        z = rng.standard_normal((2, 6))
        target = rng.standard_normal((2, 2))
        weights = rng.dirichlet(np.ones(3), size=(3, 2))
        probs = [tuple(weights[k, :, i].reshape(-1, 1) for i in range(3)) for k in range(3)]
        mode = QuantizedMode(store=store, bits=np.full((3, 2), 8), probs=probs, relaxation=MixtureRelaxation())

        def loss_of(x):
            return reduce_mean(squared_error(denoise_forward(denoiser, x, np.array([2, 5]), z, mode=mode), target))

        x = parameter(x0)
        with Tape() as tape:
            loss = loss_of(x)
        backward(loss, tape)
        numeric = finite_difference_gradient(lambda v: loss_of(DiffTensor(v)).item(), x0, h=1e-6)
        np.testing.assert_allclose(x.grad, numeric, rtol=1e-4, atol=1e-8)


class TestTraining:
    def test_q2b_steps_and_keeps_shapes(self, denoiser, store):
        schedule = build_schedule(6, 1e-3, 0.2)
        rng = np.random.default_rng(0)
        params = Q2BParams.initialise(3, 6, 2, 1, MENU)
        before = params.copy()
        fit = train_q2b(
            params, denoiser, store, schedule,
            z=rng.standard_normal((8, 6)), qualities=rng.uniform(0, 1, 8), x0=rng.standard_normal((8, 2)),
            iterations=4, lambda_bit=0.1, batch_size=3, seed=0, log_every=0,
        )
        assert len(fit.losses) == 4 and np.isfinite(fit.final_loss)
        assert params.u_m.shape == before.u_m.shape
        assert not np.array_equal(params.o.data, before.o.data)

    def test_high_lambda_pushes_bits_down(self, denoiser, store):
        schedule = build_schedule(6, 1e-3, 0.2)
        rng = np.random.default_rng(1)
        params = Q2BParams.initialise(3, 6, 2, 0, MENU)
        train_q2b(
            params, denoiser, store, schedule,
            z=rng.standard_normal((8, 6)), qualities=rng.uniform(0, 1, 8), x0=rng.standard_normal((8, 2)),
            iterations=100, lambda_bit=10.0, lr=0.05, batch_size=4, seed=0, log_every=0,
        )
        assert np.all(plans_for_qualities([0.2, 0.8], params) == MENU.b_low)

    def test_bit_cost_lowers_fab(self, denoiser, small_config, schedule, prompts_z, menu):
        widened = Denoiser(replace(small_config, outlier_scale=16.0), denoiser.params)
        calibration = collect_calibration(widened, schedule, prompts_z, seed=0, group_size=2)
        store = build_quant_store(calibration, menu, schedule.steps, group_size=2)
        rng = np.random.default_rng(3)
        z, x0 = rng.standard_normal((16, 6)), rng.standard_normal((16, 2))
        qualities = rng.uniform(0, 1, 16)
        fab = {}
        for lam in (0.0, 10.0):
            params = Q2BParams.initialise(3, schedule.steps, 2, 0, MENU)
            train_q2b(
                params, widened, store, schedule, z=z, qualities=qualities, x0=x0,
                iterations=100, lambda_bit=lam, lr=0.05, batch_size=4, seed=0, log_every=0,
            )
            fab[lam] = compute_fab(plans_for_qualities(qualities, params))
        assert fab[10.0] == pytest.approx(MENU.b_low)
        assert fab[0.0] > fab[10.0]

    def test_divergence_carries_snapshot(self, denoiser, store):
        schedule = build_schedule(6, 1e-3, 0.2)
        rng = np.random.default_rng(2)
        params = Q2BParams.initialise(3, 6, 2, 1, MENU)
        with pytest.raises(NumericFailure) as info:
            train_q2b(
                params, denoiser, store, schedule,
                z=rng.standard_normal((4, 6)), qualities=rng.uniform(0, 1, 4), x0=rng.standard_normal((4, 2)),
                iterations=3, lambda_bit=float("inf"), batch_size=2, seed=0, log_every=0,
            )
        snapshot = info.value.snapshot
        assert isinstance(snapshot, Q2BParams)
        np.testing.assert_array_equal(snapshot.s.data, np.full(3, 4.0))

    def test_misaligned_inputs(self, denoiser, store, schedule):
        params = Q2BParams.initialise(3, 6, 2, 1, MENU)
        with pytest.raises(ContractViolation):
            train_q2b(params, denoiser, store, schedule, np.zeros((3, 6)), np.zeros(2), np.zeros((3, 2)), iterations=1)


class TestT2Q:
    def _zero_model(self, embed_dim=4, hidden=5):
        return T2QModel({
            "layer1/w": DiffTensor(np.zeros((embed_dim, embed_dim))),
            "layer1/b": DiffTensor(np.zeros((1, embed_dim))),
            "layer2/w": parameter(np.zeros((embed_dim, hidden))),
            "layer2/b": parameter(np.zeros((1, hidden))),
            "layer3/w": parameter(np.zeros((hidden, 1))),
            "layer3/b": parameter(np.zeros((1, 1))),
        })

    def test_zero_model_predicts_half(self):
        out = t2q_forward(self._zero_model(), np.ones((3, 4)))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_wrong_embedding_length(self):
        with pytest.raises(ContractViolation):
            predict_quality(self._zero_model(), np.ones((2, 3)))

    def test_first_layer_frozen(self):
        rng = np.random.default_rng(0)
        model = T2QModel.initialise(8, 16, seed=0)
        frozen = model.params["layer1/w"].data.copy()
        z = rng.standard_normal((40, 8))
        train_t2q(model, z, rng.uniform(0, 1, 40), epochs=2, seed=0)
        np.testing.assert_array_equal(model.params["layer1/w"].data, frozen)
        assert set(model.trainable()) == {"layer2/w", "layer2/b", "layer3/w", "layer3/b"}

    def test_constant_labels_skip_correlation(self):
        model = self._zero_model()
        fit = train_t2q(model, np.ones((20, 4)), np.full(20, 0.5), epochs=1, seed=0)
        assert fit.srocc is None and fit.plcc is None
        assert fit.train_loss == pytest.approx(0.0)
        assert (fit.n_train, fit.n_val) == (16, 4)

    def test_learns_a_monotone_signal(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((600, 8))
        labels = 1 / (1 + np.exp(-(z[:, 0] + 0.5 * z[:, 1])))
        model = T2QModel.initialise(8, 32, seed=1)
        fit = train_t2q(model, z, labels, epochs=20, lr=1e-2, batch_size=32, seed=0)
        assert fit.srocc > 0.5 and fit.plcc > 0.5
        assert fit.val_loss < np.var(labels)

    def test_planted_labels_recovered(self):
        rng = np.random.default_rng(4)
        model = T2QModel.initialise(8, 64, seed=2)
        z = rng.standard_normal((1000, 8))
        features = np.maximum(z @ model.params["layer1/w"].data + model.params["layer1/b"].data, 0.0)
        w = rng.standard_normal(8)
        labels = 1 / (1 + np.exp(-(features @ w) / np.std(features @ w)))
        fit = train_t2q(model, z, labels, epochs=40, lr=1e-2, batch_size=32, seed=0)
        assert fit.srocc > 0.95

    def test_empty_dataset(self):
        with pytest.raises(ContractViolation):
            train_t2q(self._zero_model(), np.zeros((0, 4)), np.zeros(0))
