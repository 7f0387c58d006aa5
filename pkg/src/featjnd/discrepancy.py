"""Differentiable task discrepancy functions.

A discrepancy compares the task-head outputs computed from a clean feature
with those computed from a distorted one and returns a nonnegative scalar
that vanishes iff the outputs agree:

    classification          temperature-scaled KL on class logits
    detection               KL on objectness + ROI class logits, plus
                            smooth-l1 on both regression streams
    instance segmentation   detection term + MSE on mask logits

The clean output always provides the KL reference distribution.  Outputs
being compared must be computed on identical ROIs (the caller selects ROIs
from clean features once and reuses them), so every pair of fields has
matching shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ShapeMismatchError, ValidationError

TASKS = ("classification", "detection", "instance_segmentation")


@dataclass
class HeadOutputs:
    """Bundle of task-head outputs; fields absent for a task stay None.

    ``rpn_logits`` holds per-position objectness scores (any shape),
    ``roi_logits`` per-ROI class logits (..., num_classes), the ``*_reg``
    fields regression outputs, ``mask_logits`` per-ROI mask logits, and
    ``cls_logits`` whole-image class logits for the classification task.
    """

    cls_logits: Optional[torch.Tensor] = None
    rpn_logits: Optional[torch.Tensor] = None
    roi_logits: Optional[torch.Tensor] = None
    rpn_reg: Optional[torch.Tensor] = None
    roi_reg: Optional[torch.Tensor] = None
    mask_logits: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class DiscrepancyConfig:
    temperature: float = 4.0
    task: str = "classification"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}, expected one of {TASKS}")


def _check_pair(a: torch.Tensor, b: torch.Tensor, context: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(tuple(a.shape), tuple(b.shape), context)
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise ValidationError(f"{context}: non-finite logits")


def kl_temperature(y: torch.Tensor, y_tilde: torch.Tensor, temperature: float) -> torch.Tensor:
    """T^2-scaled KL(softmax(y/T) || softmax(y~/T)), averaged over leading axes.

    The last axis is the class axis (length >= 2); the clean logits ``y``
    define the reference distribution.  The T^2 factor keeps gradient
    magnitudes comparable across temperatures.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    _check_pair(y, y_tilde, "kl_temperature")
    if y.shape[-1] < 2:
        raise ValidationError(f"need >= 2 logits on the class axis, got {y.shape[-1]}")
    log_p = torch.log_softmax(y / temperature, dim=-1)
    log_q = torch.log_softmax(y_tilde / temperature, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return (temperature**2) * kl.mean()


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Huber-style regression consistency, mean over elements.

    Per element d = a - b: 0.5*d^2 when |d| < beta, else |d| - 0.5*beta.
    """
    _check_pair(a, b, "smooth_l1")
    d = (a - b).abs()
    out = torch.where(d < beta, 0.5 * d * d, d - 0.5 * beta)
    return out.mean()


def objectness_two_class(o: torch.Tensor) -> torch.Tensor:
    """Lift scalar objectness scores to two-class (object, background) logits."""
    return torch.stack([o, torch.zeros_like(o)], dim=-1)


def _require(out: HeadOutputs, out_tilde: HeadOutputs, fields: tuple[str, ...]) -> None:
    for name in fields:
        if getattr(out, name) is None or getattr(out_tilde, name) is None:
            raise ValidationError(f"missing head output field {name!r}")


def d_cls(out: HeadOutputs, out_tilde: HeadOutputs, cfg: DiscrepancyConfig) -> torch.Tensor:
    """Classification discrepancy: temperature-scaled KL on class logits."""
    _require(out, out_tilde, ("cls_logits",))
    return kl_temperature(out.cls_logits, out_tilde.cls_logits, cfg.temperature)


def d_det(out: HeadOutputs, out_tilde: HeadOutputs, cfg: DiscrepancyConfig) -> torch.Tensor:
    """Two-stage detection discrepancy, unweighted sum of four terms.

    KL on objectness (lifted to two-class) and on per-ROI class logits,
    smooth-l1 on both regression streams.  ROI tensors must line up
    exactly; a count mismatch means the caller broke the aligned-ROI
    contract.
    """
    _require(out, out_tilde, ("rpn_logits", "roi_logits", "rpn_reg", "roi_reg"))
    if out.roi_logits.shape != out_tilde.roi_logits.shape:
        raise ShapeMismatchError(
            tuple(out.roi_logits.shape),
            tuple(out_tilde.roi_logits.shape),
            "aligned-ROI violation",
        )
    t = cfg.temperature
    term_rpn_cls = kl_temperature(
        objectness_two_class(out.rpn_logits), objectness_two_class(out_tilde.rpn_logits), t
    )
    term_roi_cls = kl_temperature(out.roi_logits, out_tilde.roi_logits, t)
    term_rpn_reg = smooth_l1(out.rpn_reg, out_tilde.rpn_reg)
    term_roi_reg = smooth_l1(out.roi_reg, out_tilde.roi_reg)
    return term_rpn_cls + term_rpn_reg + term_roi_cls + term_roi_reg


def d_ins(out: HeadOutputs, out_tilde: HeadOutputs, cfg: DiscrepancyConfig) -> torch.Tensor:
    """Instance-segmentation discrepancy: detection term + mask MSE."""
    _require(out, out_tilde, ("mask_logits",))
    _check_pair(out.mask_logits, out_tilde.mask_logits, "mask_logits")
    mask_term = ((out.mask_logits - out_tilde.mask_logits) ** 2).mean()
    return d_det(out, out_tilde, cfg) + mask_term


def discrepancy(out: HeadOutputs, out_tilde: HeadOutputs, cfg: DiscrepancyConfig) -> torch.Tensor:
    """Dispatch to the task-specific discrepancy named in ``cfg.task``."""
    if cfg.task == "classification":
        return d_cls(out, out_tilde, cfg)
    if cfg.task == "detection":
        return d_det(out, out_tilde, cfg)
    return d_ins(out, out_tilde, cfg)
