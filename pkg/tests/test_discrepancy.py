"""Task discrepancy functions: closed forms, decomposition, gradients."""

import math

import numpy as np
import pytest
import torch

from featjnd.discrepancy import (
    DiscrepancyConfig,
    HeadOutputs,
    d_cls,
    d_det,
    d_ins,
    kl_temperature,
    objectness_two_class,
    smooth_l1,
)
from featjnd.errors import ShapeMismatchError, ValidationError

# closed form for logits (a, 0) vs (0, a) at T=1:
# KL = (sigmoid(a) - sigmoid(-a)) * a
TWO_CLASS_UNIT_GAP = (1 / (1 + math.exp(-1)) - 1 / (1 + math.exp(1))) * 1.0  # 0.46211716


def _rand_outputs(rng, num_rois=5, num_classes=4, mask=6):
    def t(*shape):
        return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)

    return HeadOutputs(
        rpn_logits=t(num_rois * 3),
        roi_logits=t(num_rois, num_classes),
        rpn_reg=t(num_rois * 3, 4),
        roi_reg=t(num_rois, 4),
        mask_logits=t(num_rois, mask, mask),
    )


class TestKlTemperature:
    def test_identical_is_zero(self):
        y = torch.tensor([0.3, -1.2, 2.0])
        assert float(kl_temperature(y, y, 4.0)) == pytest.approx(0.0, abs=1e-12)

    def test_two_class_closed_form(self):
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        yt = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert float(kl_temperature(y, yt, 1.0)) == pytest.approx(TWO_CLASS_UNIT_GAP, abs=1e-9)
        assert float(kl_temperature(y, yt, 1.0)) == pytest.approx(0.46212, abs=1e-5)

    def test_temperature_squared_scaling(self):
        """(2,0) vs (0,2) at T=2 softmaxes like the unit-gap case, times T^2."""
        y = torch.tensor([2.0, 0.0], dtype=torch.float64)
        yt = torch.tensor([0.0, 2.0], dtype=torch.float64)
        assert float(kl_temperature(y, yt, 2.0)) == pytest.approx(4 * TWO_CLASS_UNIT_GAP, abs=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            y = torch.tensor(rng.standard_normal(6))
            yt = torch.tensor(rng.standard_normal(6))
            base = float(kl_temperature(y, yt, 4.0))
            assert float(kl_temperature(y + 3.7, yt, 4.0)) == pytest.approx(base, rel=1e-5, abs=1e-8)
            assert float(kl_temperature(y, yt - 1.3, 4.0)) == pytest.approx(base, rel=1e-5, abs=1e-8)

    def test_asymmetry_exists(self):
        rng = np.random.default_rng(1)
        found = False
        for _ in range(20):
            y = torch.tensor(rng.standard_normal(5))
            yt = torch.tensor(rng.standard_normal(5))
            a = float(kl_temperature(y, yt, 2.0))
            b = float(kl_temperature(yt, y, 2.0))
            if abs(a - b) > 1e-6:
                found = True
                break
        assert found, "temperature-scaled KL should generally be asymmetric"

    def test_batched_mean_over_rows(self):
        y = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        yt = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        assert float(kl_temperature(y, yt, 1.0)) == pytest.approx(TWO_CLASS_UNIT_GAP / 2, abs=1e-9)

    def test_errors(self):
        y = torch.tensor([1.0, 2.0])
        with pytest.raises(ShapeMismatchError):
            kl_temperature(y, torch.tensor([1.0, 2.0, 3.0]), 1.0)
        with pytest.raises(ValidationError):
            kl_temperature(torch.tensor([1.0]), torch.tensor([1.0]), 1.0)
        with pytest.raises(ValidationError):
            kl_temperature(y, torch.tensor([1.0, float("nan")]), 1.0)
        with pytest.raises(ValidationError):
            kl_temperature(y, y, 0.0)


class TestSmoothL1:
    def test_identical_is_zero(self):
        a = torch.tensor([1.0, -2.0])
        assert float(smooth_l1(a, a)) == 0.0

    def test_quadratic_branch(self):
        assert float(smooth_l1(torch.tensor([0.5]), torch.tensor([0.0]))) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert float(smooth_l1(torch.tensor([2.0]), torch.tensor([0.0]))) == pytest.approx(1.5)

    def test_mean_reduction(self):
        a = torch.tensor([0.5, 2.0])
        b = torch.zeros(2)
        assert float(smooth_l1(a, b)) == pytest.approx((0.125 + 1.5) / 2)


class TestDcls:
    def test_identical_outputs(self):
        out = HeadOutputs(cls_logits=torch.tensor([1.0, 2.0, 3.0]))
        cfg = DiscrepancyConfig(temperature=4.0, task="classification")
        assert float(d_cls(out, out, cfg)) == pytest.approx(0.0, abs=1e-12)

    def test_delegates_to_kl(self):
        rng = np.random.default_rng(2)
        y = torch.tensor(rng.standard_normal(7))
        yt = torch.tensor(rng.standard_normal(7))
        cfg = DiscrepancyConfig(temperature=3.0, task="classification")
        direct = kl_temperature(y, yt, 3.0)
        via = d_cls(HeadOutputs(cls_logits=y), HeadOutputs(cls_logits=yt), cfg)
        assert float(via) == float(direct)

    def test_default_temperature_case(self):
        y = torch.tensor([4.0, 0.0], dtype=torch.float64)
        yt = torch.tensor([0.0, 4.0], dtype=torch.float64)
        cfg = DiscrepancyConfig(temperature=4.0, task="classification")
        expected = 16 * TWO_CLASS_UNIT_GAP
        assert float(d_cls(HeadOutputs(cls_logits=y), HeadOutputs(cls_logits=yt), cfg)) == pytest.approx(
            expected, abs=1e-5
        )
        assert expected == pytest.approx(7.3939, abs=2e-4)

    def test_missing_field(self):
        cfg = DiscrepancyConfig()
        with pytest.raises(ValidationError, match="cls_logits"):
            d_cls(HeadOutputs(), HeadOutputs(cls_logits=torch.zeros(2)), cfg)


class TestDdet:
    cfg = DiscrepancyConfig(temperature=4.0, task="detection")

    def test_identical_is_zero(self):
        rng = np.random.default_rng(3)
        out = _rand_outputs(rng)
        assert float(d_det(out, out, self.cfg)) == pytest.approx(0.0, abs=1e-12)

    def test_roi_reg_only_difference(self):
        rng = np.random.default_rng(4)
        out = _rand_outputs(rng)
        out_t = HeadOutputs(
            rpn_logits=out.rpn_logits.clone(),
            roi_logits=out.roi_logits.clone(),
            rpn_reg=out.rpn_reg.clone(),
            roi_reg=out.roi_reg + torch.tensor(rng.standard_normal(out.roi_reg.shape)),
            mask_logits=out.mask_logits.clone(),
        )
        assert float(d_det(out, out_t, self.cfg)) == pytest.approx(
            float(smooth_l1(out.roi_reg, out_t.roi_reg)), rel=1e-10
        )

    def test_decomposition_matches_component_sum(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            out, out_t = _rand_outputs(rng), _rand_outputs(rng)
            t = self.cfg.temperature
            expected = (
                kl_temperature(
                    objectness_two_class(out.rpn_logits),
                    objectness_two_class(out_t.rpn_logits),
                    t,
                )
                + smooth_l1(out.rpn_reg, out_t.rpn_reg)
                + kl_temperature(out.roi_logits, out_t.roi_logits, t)
                + smooth_l1(out.roi_reg, out_t.roi_reg)
            )
            assert float(d_det(out, out_t, self.cfg)) == pytest.approx(float(expected), rel=1e-12)

    def test_roi_count_mismatch(self):
        rng = np.random.default_rng(6)
        out = _rand_outputs(rng, num_rois=5)
        out_t = _rand_outputs(rng, num_rois=6)
        with pytest.raises(ShapeMismatchError, match="aligned-ROI"):
            d_det(out, out_t, self.cfg)

    def test_missing_field(self):
        rng = np.random.default_rng(7)
        out = _rand_outputs(rng)
        broken = HeadOutputs(rpn_logits=out.rpn_logits, roi_logits=out.roi_logits)
        with pytest.raises(ValidationError, match="missing"):
            d_det(out, broken, self.cfg)


class TestDins:
    cfg = DiscrepancyConfig(temperature=4.0, task="instance_segmentation")

    def test_identical_is_zero(self):
        rng = np.random.default_rng(8)
        out = _rand_outputs(rng)
        assert float(d_ins(out, out, self.cfg)) == pytest.approx(0.0, abs=1e-12)

    def test_constant_mask_offset(self):
        rng = np.random.default_rng(9)
        out = _rand_outputs(rng)
        out_t = HeadOutputs(
            rpn_logits=out.rpn_logits.clone(),
            roi_logits=out.roi_logits.clone(),
            rpn_reg=out.rpn_reg.clone(),
            roi_reg=out.roi_reg.clone(),
            mask_logits=out.mask_logits + 1.0,
        )
        assert float(d_ins(out, out_t, self.cfg)) == pytest.approx(1.0, rel=1e-10)

    def test_component_sum(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            out, out_t = _rand_outputs(rng), _rand_outputs(rng)
            det = float(d_det(out, out_t, self.cfg))
            mse = float(((out.mask_logits - out_t.mask_logits) ** 2).mean())
            assert float(d_ins(out, out_t, self.cfg)) == pytest.approx(det + mse, rel=1e-12)

    def test_missing_mask(self):
        rng = np.random.default_rng(11)
        out = _rand_outputs(rng)
        no_mask = HeadOutputs(
            rpn_logits=out.rpn_logits,
            roi_logits=out.roi_logits,
            rpn_reg=out.rpn_reg,
            roi_reg=out.roi_reg,
        )
        with pytest.raises(ValidationError, match="mask"):
            d_ins(out, no_mask, self.cfg)


def _fd_check(fn, tensor, rtol=1e-4, step=1e-4, samples=6, rng=None):
    """Central finite differences on a float64 leaf vs autograd."""
    rng = rng or np.random.default_rng(0)
    leaf = tensor.clone().requires_grad_(True)
    out = fn(leaf)
    (grad,) = torch.autograd.grad(out, leaf)
    flat_idx = rng.choice(tensor.numel(), size=min(samples, tensor.numel()), replace=False)
    for idx in flat_idx:
        plus = tensor.clone().reshape(-1)
        minus = tensor.clone().reshape(-1)
        plus[idx] += step
        minus[idx] -= step
        num = (
            float(fn(plus.reshape(tensor.shape))) - float(fn(minus.reshape(tensor.shape)))
        ) / (2 * step)
        ana = float(grad.reshape(-1)[idx])
        assert ana == pytest.approx(num, rel=rtol, abs=1e-7)


class TestGradients:
    """Autograd vs central finite differences (float64 instances)."""

    def test_kl_gradient_wrt_distorted(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            y = torch.tensor(rng.standard_normal(6), dtype=torch.float64)
            yt = torch.tensor(rng.standard_normal(6), dtype=torch.float64)
            _fd_check(lambda x: kl_temperature(y, x, 4.0), yt, rng=rng)

    def test_smooth_l1_gradient(self):
        rng = np.random.default_rng(13)
        a = torch.tensor(rng.standard_normal(8), dtype=torch.float64)
        b = torch.tensor(rng.standard_normal(8) * 2, dtype=torch.float64)
        _fd_check(lambda x: smooth_l1(a, x), b, rng=rng)

    def test_d_det_gradient_wrt_distorted_fields(self):
        rng = np.random.default_rng(14)
        cfg = DiscrepancyConfig(temperature=4.0, task="detection")
        out, out_t = _rand_outputs(rng), _rand_outputs(rng)

        def loss_from_roi_logits(x):
            alt = HeadOutputs(
                rpn_logits=out_t.rpn_logits,
                roi_logits=x,
                rpn_reg=out_t.rpn_reg,
                roi_reg=out_t.roi_reg,
            )
            return d_det(out, alt, cfg)

        _fd_check(loss_from_roi_logits, out_t.roi_logits, rng=rng)

    def test_d_ins_gradient_wrt_masks(self):
        rng = np.random.default_rng(15)
        cfg = DiscrepancyConfig(temperature=4.0, task="instance_segmentation")
        out, out_t = _rand_outputs(rng), _rand_outputs(rng)

        def loss_from_masks(x):
            alt = HeadOutputs(
                rpn_logits=out_t.rpn_logits,
                roi_logits=out_t.roi_logits,
                rpn_reg=out_t.rpn_reg,
                roi_reg=out_t.roi_reg,
                mask_logits=x,
            )
            return d_ins(out, alt, cfg)

        _fd_check(loss_from_masks, out_t.mask_logits, rng=rng)


class TestConfig:
    def test_temperature_positive(self):
        with pytest.raises(ValidationError):
            DiscrepancyConfig(temperature=0.0)

    def test_task_known(self):
        with pytest.raises(ValidationError):
            DiscrepancyConfig(task="pose")
