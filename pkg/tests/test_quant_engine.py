import numpy as np
import pytest

from engines.autograd import DiffTensor, Tape, backward, parameter, reduce_sum
from engines.quant_engine import (
    CalibrationSet,
    MixtureRelaxation,
    QuantStore,
    calibrate_range,
    fake_quantize,
    fake_quantize_array,
    make_quantizer,
    quantize_weights,
    stack_specs,
    ste_mixture_quantize,
)
from errors import CalibrationError, ContractViolation
from models import BitMenu


def _random_specs(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        lo = rng.uniform(-5, 1)
        hi = lo + rng.uniform(0.1, 6)
        yield make_quantizer((lo, hi), int(rng.integers(2, 13)))


class TestCalibration:
    def test_percentiles_of_uniform_grid(self):
        lo, hi = calibrate_range(np.arange(1001, dtype=np.float64))
        assert lo == 5.0 and hi == 995.0

    def test_tiny_collection_returns_extremes(self):
        assert calibrate_range(np.array([2.0, -1.0, 0.5])) == (-1.0, 2.0)

    def test_constant_collection_is_widened(self):
        lo, hi = calibrate_range(np.full(10, 3.0))
        assert lo < 3.0 < hi

    def test_empty_collection_names_location(self):
        with pytest.raises(CalibrationError, match="layer 2 / group 1"):
            calibrate_range([], label="layer 2 / group 1")

    def test_calibration_set_pools_per_key(self):
        cal = CalibrationSet()
        cal.add(0, 0, np.array([[1.0, 2.0]]))
        cal.add(0, 0, np.array([3.0]))
        cal.add(1, 0, np.array([-1.0, 1.0]))
        assert cal.keys() == [(0, 0), (1, 0)]
        assert cal.ranges()[(0, 0)] == (1.0, 3.0)


class TestQuantizer:
    def test_eight_bit_unit_range(self):
        spec = make_quantizer((0.0, 1.0), 8)
        assert spec.scale == pytest.approx(1 / 255)
        assert spec.zero_point == 0

    def test_range_extended_to_zero(self):
        spec = make_quantizer((2.0, 4.0), 4)
        assert spec.clip_min == 0.0
        assert fake_quantize_array(0.0, spec) == 0.0

    def test_identity_at_32_bits(self):
        x = np.random.default_rng(0).standard_normal(100) * 1e3
        spec = make_quantizer((-1.0, 1.0), 32)
        assert spec.is_identity
        np.testing.assert_array_equal(fake_quantize_array(x, spec), x)

    def test_rejects_one_bit_and_empty_range(self):
        with pytest.raises(ContractViolation):
            make_quantizer((0.0, 1.0), 1)
        with pytest.raises(ContractViolation):
            make_quantizer((1.0, 1.0), 8)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for spec in _random_specs(2000, seed=1):
            x = rng.uniform(-8, 8, size=8)
            once = fake_quantize_array(x, spec)
            np.testing.assert_array_equal(fake_quantize_array(once, spec), once)

    def test_error_bounded_inside_range(self):
        rng = np.random.default_rng(2)
        for spec in _random_specs(2000, seed=2):
            x = rng.uniform(spec.clip_min, spec.clip_max, size=8)
            err = np.abs(fake_quantize_array(x, spec) - x)
            assert np.all(err <= spec.scale / 2 + 1e-12)

    def test_monotone(self):
        rng = np.random.default_rng(3)
        for spec in _random_specs(2000, seed=3):
            x = np.sort(rng.uniform(-8, 8, size=16))
            assert np.all(np.diff(fake_quantize_array(x, spec)) >= 0)

    def test_ste_masks_outside_clip(self):
        spec = make_quantizer((-1.0, 1.0), 4)
        x = parameter(np.array([-2.0, 0.3, 2.0]))
        with Tape() as tape:
            loss = reduce_sum(fake_quantize(x, spec))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_stack_specs_matches_rowwise(self):
        specs = [make_quantizer((-1.0, 1.0), 6), make_quantizer((-3.0, 0.5), 6)]
        x = np.array([[0.37, -0.8], [0.11, -2.2]])
        batched = fake_quantize_array(x, stack_specs(specs))
        for row, spec in enumerate(specs):
            np.testing.assert_array_equal(batched[row], fake_quantize_array(x[row], spec))

    def test_stack_specs_single_bit_width(self):
        with pytest.raises(ContractViolation):
            stack_specs([make_quantizer((0, 1), 6), make_quantizer((0, 1), 8)])


class TestWeights:
    def test_symmetric_levels(self):
        w = np.random.default_rng(4).standard_normal((8, 8))
        q = quantize_weights(w, 4)
        scale = np.max(np.abs(w)) / 7
        np.testing.assert_allclose(q / scale, np.rint(q / scale), atol=1e-9)
        assert np.max(np.abs(q)) == pytest.approx(np.max(np.abs(w)))

    def test_32_bits_is_identity(self):
        w = np.random.default_rng(5).standard_normal((3, 3))
        np.testing.assert_array_equal(quantize_weights(w, 32), w)

    def test_zero_weights(self):
        np.testing.assert_array_equal(quantize_weights(np.zeros((2, 2)), 4), 0.0)


class TestSteMixture:
    specs = [make_quantizer((-1.0, 1.0), b) for b in (2, 4, 8)]

    def test_forward_is_selected_candidate(self):
        a = np.array([[0.33, -0.71], [0.9, 0.05]])
        probs = [np.full((2, 1), 1 / 3)] * 3
        out = ste_mixture_quantize(a, probs, self.specs, selected_bits=np.array([4, 8]))
        np.testing.assert_array_equal(out.data[0], fake_quantize_array(a[0], self.specs[1]))
        np.testing.assert_array_equal(out.data[1], fake_quantize_array(a[1], self.specs[2]))

    def test_backward_rule(self):
        a = parameter(np.array([[0.33, 1.5]]))
        probs = [parameter(np.array([[p]])) for p in (0.2, 0.3, 0.5)]
        with Tape() as tape:
            out = ste_mixture_quantize(a, probs, self.specs, selected_bits=8)
            loss = reduce_sum(out)
        backward(loss, tape)
        # inside the range every quantizer passes; 1.5 is clipped by all of them
        np.testing.assert_allclose(a.grad, [[1.0, 0.0]])
        for p, spec in zip(probs, self.specs):
            assert p.grad[0, 0] == pytest.approx(fake_quantize_array(a.data, spec).sum())

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(ContractViolation):
            ste_mixture_quantize(np.zeros((1, 2)), [np.full((1, 1), 0.5)] * 3, self.specs, selected_bits=2)

    def test_selected_bits_must_be_in_menu(self):
        probs = [np.full((1, 1), 1 / 3)] * 3
        with pytest.raises(ContractViolation):
            ste_mixture_quantize(np.zeros((1, 2)), probs, self.specs, selected_bits=6)

    def test_relaxation_matches_mixture_at_capture(self):
        a = np.array([[0.33, -0.71]])
        probs = [np.array([[p]]) for p in (0.2, 0.3, 0.5)]
        relax = MixtureRelaxation()
        out = ste_mixture_quantize(a, probs, self.specs, selected_bits=8, relaxation=relax, key="k")
        expected = sum(p * fake_quantize_array(a, s) for p, s in zip(probs, self.specs))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        assert "k" in relax.residuals

    def test_scalar_probabilities_broadcast(self):
        a = DiffTensor(np.array([[0.1, 0.2]]))
        out = ste_mixture_quantize(a, [0.0, 1.0, 0.0], self.specs, selected_bits=4)
        np.testing.assert_array_equal(out.data, fake_quantize_array(a.data, self.specs[1]))


class TestQuantStore:
    def test_menu_specs_share_range(self, store):
        specs = store.menu_specs(0, np.array([0]))
        assert [s.bits for s in specs] == [6, 8, 10]
        assert len({(s.clip_min, s.clip_max) for s in specs}) == 1

    def test_rows_in_different_groups_get_batch(self, store):
        specs = store.menu_specs(1, np.array([0, 2]))
        assert specs[0].scale.shape == (2, 1)

    def test_group_of(self, store):
        np.testing.assert_array_equal(store.group_of(np.array([1, 2, 3, 6])), [0, 0, 1, 2])

    def test_missing_range(self, menu):
        empty = QuantStore(menu=menu, steps=4, group_size=2)
        with pytest.raises(CalibrationError):
            empty.spec(0, 0, 8)

    def test_records_rebuild_same_ranges(self, store):
        rebuilt = QuantStore.from_records(store.to_records())
        assert rebuilt.ranges == store.ranges
        assert rebuilt.menu == store.menu
        other = QuantStore.from_records(store.to_records(), menu=BitMenu(4, 6, 8))
        assert other.menu.bits == (4, 6, 8)
