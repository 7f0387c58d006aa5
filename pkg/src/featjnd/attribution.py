"""Discretized path-integral attribution from a zero baseline.

The attribution of an input I under a scalar model output h is the
right-endpoint Riemann sum

    Attr(I) = sum_{i=1..K} grad h(I_i) * (I_i - I_{i-1}),   I_i = i * I / K

with I_0 = 0.  On a linear model the sum is exact for every K (constant
gradient); on smooth nonlinear models the completeness residual
|sum Attr - (h(I) - h(0))| shrinks as O(1/K) because of the right-endpoint
bias.  Gradients are evaluated with autograd; accumulation is float64 with
a fixed summation order, so maps are deterministic given (model, I, K).
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .errors import DegenerateInputError, ValidationError
from .estimator import JndEstimator
from .taskbench import TaskBundle


def integrated_attribution(
    model_output: Callable[[torch.Tensor], torch.Tensor],
    input_array,
    steps: int,
) -> np.ndarray:
    """Attribution map of ``input_array`` for a scalar-valued model output."""
    if steps < 1:
        raise ValidationError(f"need at least one integration step, got {steps}")
    base = torch.as_tensor(np.asarray(input_array))
    if not base.dtype.is_floating_point:
        base = base.float()
    segment = (base.double() / steps).numpy()
    attr = np.zeros(base.shape, dtype=np.float64)
    for i in range(1, steps + 1):
        x = (base * (i / steps)).clone().requires_grad_(True)
        y = model_output(x)
        if y.numel() != 1:
            raise ValidationError(f"model output must be scalar, got shape {tuple(y.shape)}")
        (grad,) = torch.autograd.grad(y, x)
        g = grad.detach().numpy().astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient at path point {i}/{steps}")
        attr += g * segment
    return attr


def classification_pipelines(
    bundle: TaskBundle, estimator: JndEstimator, zero_delta: bool = False
):
    """(clean, distorted) logit pipelines over images for the toy classifier.

    The distorted pipeline adds the predicted map at the split point
    (alpha = 1); ``zero_delta`` forces the map to zero for ablations.
    Both pipelines are differentiable in the image.
    """
    if bundle.kind != "classification":
        raise ValidationError("attribution pipelines are defined for the classification bundle")
    estimator.eval()

    def clean_logits(image: torch.Tensor) -> torch.Tensor:
        f = bundle.backbone(image.unsqueeze(0))
        return bundle.heads(f)[0]

    def distorted_logits(image: torch.Tensor) -> torch.Tensor:
        f = bundle.backbone(image.unsqueeze(0))
        d = estimator(f)
        if zero_delta:
            d = torch.zeros_like(d)
        return bundle.heads(f + d)[0]

    return clean_logits, distorted_logits


def attribution_delta(
    model: Callable[[torch.Tensor], torch.Tensor],
    model_with_map: Callable[[torch.Tensor], torch.Tensor],
    input_array,
    steps: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attribution maps for both pipelines plus their elementwise difference.

    Both maps target the same scalar: the clean pipeline's top-class logit,
    so they stay comparable.  Exactly tied top logits make the target class
    ill-defined and raise.
    """
    base = torch.as_tensor(np.asarray(input_array))
    if not base.dtype.is_floating_point:
        base = base.float()
    with torch.no_grad():
        logits = model(base)
    if logits.numel() < 2:
        raise DegenerateInputError("need at least two class logits to pick a target")
    top2 = torch.topk(logits.flatten(), 2).values
    if float(top2[0]) == float(top2[1]):
        raise DegenerateInputError(
            f"degenerate logits: top two classes tie at {float(top2[0])}"
        )
    target = int(logits.flatten().argmax())

    attr_clean = integrated_attribution(lambda x: model(x).flatten()[target], base, steps)
    attr_dist = integrated_attribution(
        lambda x: model_with_map(x).flatten()[target], base, steps
    )
    return attr_clean, attr_dist, attr_dist - attr_clean


def display_map(attr: np.ndarray) -> np.ndarray:
    """Channel-summed absolute attribution, for rendering only."""
    arr = np.asarray(attr)
    if arr.ndim == 3:
        return np.abs(arr).sum(axis=0)
    return np.abs(arr)
