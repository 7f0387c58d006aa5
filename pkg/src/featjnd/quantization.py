"""Token-wise dynamic quantization guided by a tolerance map.

Each spatial token (h, w) of a feature gets one step size shared across
channels.  Under the standard uniform-error model a round-to-nearest
quantizer with step D injects noise of variance D^2/12 per element, so a
target per-element noise standard deviation sigma_tgt fixes the global
scale of a step map D = lam * s via

    lam = sqrt(12 * sigma_tgt^2 / E[s^2])    (E over tokens)

which makes E[D^2/12] equal sigma_tgt^2 exactly.  Two budget-matched
baselines are provided: randomly permuting the tokens of s (same E[s^2],
different spatial allocation) and a globally uniform step sqrt(12)*sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, ShapeMismatchError, ValidationError
from .features import FeatureTensor, JndMap, as_array, load_feature, save_feature

TOLERANCE_AGGREGATIONS = ("channel_mean", "channel_min", "channel_max")


def _validate_grid(values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"{name} must be 2-d (h, w), got ndim={values.ndim}")
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} values must be finite")
    return values


@dataclass(frozen=True)
class ToleranceMap:
    """Per-token nonnegative relative tolerance, shared across channels."""

    values: np.ndarray

    def __post_init__(self):
        values = _validate_grid(self.values, "tolerance map")
        if np.any(values < 0):
            raise ValidationError("tolerance values must be >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class StepMap:
    """Per-token strictly positive quantization step sizes."""

    values: np.ndarray

    def __post_init__(self):
        values = _validate_grid(self.values, "step map")
        if np.any(values <= 0):
            raise ValidationError("step sizes must be > 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BudgetSpec:
    """Target per-element quantization-noise standard deviation."""

    sigma_tgt: float

    def __post_init__(self):
        if self.sigma_tgt <= 0:
            raise ValidationError(f"sigma_tgt must be > 0, got {self.sigma_tgt}")

    @property
    def variance(self) -> float:
        return self.sigma_tgt**2


def tolerance_map(
    f: FeatureTensor, delta: JndMap, eps: float = 1e-8, agg: str = "channel_mean"
) -> ToleranceMap:
    """Elementwise |delta| / (|f| + eps), reduced over channels to one value per token."""
    if agg not in TOLERANCE_AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {agg!r}, expected one of {TOLERANCE_AGGREGATIONS}")
    if eps <= 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    fa, da = as_array(f).astype(np.float64), as_array(delta).astype(np.float64)
    if fa.shape != da.shape:
        raise ShapeMismatchError(fa.shape, da.shape, "tolerance_map")
    ratio = np.abs(da) / (np.abs(fa) + eps)
    if agg == "channel_mean":
        grid = ratio.mean(axis=0)
    elif agg == "channel_min":
        grid = ratio.min(axis=0)
    else:
        grid = ratio.max(axis=0)
    return ToleranceMap(grid)


def default_floor(s: ToleranceMap, rel: float = 1e-3) -> float:
    """Relative step floor: ``rel`` times the mean of the nonzero tolerances."""
    nz = s.values[s.values > 0]
    if nz.size == 0:
        return 0.0
    return float(rel * nz.mean())


def solve_lambda(s: ToleranceMap, budget: BudgetSpec, floor: float = 0.0) -> float:
    """Scale factor putting D = lam * max(s, floor) exactly on the noise budget.

    The token mean E[s^2] is accumulated over sorted values, so maps with
    the same value multiset (e.g. permuted baselines) solve to a
    bit-identical scale.
    """
    if floor < 0:
        raise ValidationError(f"floor must be >= 0, got {floor}")
    vals = np.sort(np.maximum(s.values, floor), axis=None)
    mean_sq = float(np.mean(vals * vals))
    if mean_sq == 0.0:
        raise DegenerateInputError(
            "tolerance map is identically zero and floor is 0; no step scale exists"
        )
    return math.sqrt(12.0 * budget.variance / mean_sq)


def step_map(s: ToleranceMap, lam: float, floor: float = 0.0) -> StepMap:
    """Token step sizes D = lam * max(s, floor)."""
    if lam <= 0:
        raise ValidationError(f"lambda must be > 0, got {lam}")
    return StepMap(lam * np.maximum(s.values, floor))


def solve_step_map(s: ToleranceMap, budget: BudgetSpec, floor: float = 0.0) -> StepMap:
    """Convenience: solve_lambda then build the budget-exact step map."""
    return step_map(s, solve_lambda(s, budget, floor), floor)


def realized_budget(step: StepMap) -> float:
    """Mean over tokens of D^2/12 — the verifier for budget exactness."""
    v = step.values
    return float(np.mean(v * v) / 12.0)


def round_half_away(z: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (language-neutral convention)."""
    z = np.asarray(z)
    return np.sign(z) * np.floor(np.abs(z) + 0.5)


def quantize_values(x: np.ndarray, delta) -> np.ndarray:
    """Round-to-nearest uniform quantizer D * round(x / D), computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValidationError("quantization steps must be > 0")
    return delta * round_half_away(x / delta)


def quantize(f: FeatureTensor, step: StepMap) -> FeatureTensor:
    """Quantize a feature with per-token steps broadcast across channels."""
    fa = as_array(f)
    if fa.shape[1:] != step.shape:
        raise ShapeMismatchError(fa.shape[1:], step.shape, "quantize grid")
    q = quantize_values(fa, step.values[None, :, :])
    return FeatureTensor(q.astype(np.float32))


def permute_baseline(s: ToleranceMap, seed) -> ToleranceMap:
    """Uniformly permute token values; the multiset (hence E[s^2]) is unchanged.

    ``seed`` is anything numpy accepts as generator entropy (int or a list
    of ints for derived streams).
    """
    rng = np.random.default_rng(seed)
    flat = s.values.ravel()
    return ToleranceMap(flat[rng.permutation(flat.size)].reshape(s.shape))


def uniform_baseline(budget: BudgetSpec, shape_hw: tuple[int, int]) -> StepMap:
    """Constant step sqrt(12) * sigma_tgt, trivially on budget."""
    h, w = shape_hw
    if h < 1 or w < 1:
        raise ValidationError(f"grid dims must be positive, got {(h, w)}")
    return StepMap(np.full((h, w), math.sqrt(12.0) * budget.sigma_tgt))


def save_map(m, path) -> None:
    """Persist a tolerance or step map as a single-channel feature container."""
    save_feature(FeatureTensor(m.values[None, :, :].astype(np.float32)), path)


def load_tolerance_map(path) -> ToleranceMap:
    t = load_feature(path)
    if t.channels != 1:
        raise ValidationError(f"expected a single-channel map file, got {t.channels} channels")
    return ToleranceMap(t.values[0])


def load_step_map(path) -> StepMap:
    t = load_feature(path)
    if t.channels != 1:
        raise ValidationError(f"expected a single-channel map file, got {t.channels} channels")
    return StepMap(t.values[0])


def quant_error_moment(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    step: float,
    n: int,
    seed: int,
) -> float:
    """Empirical E[(Q(x) - x)^2] over n samples from ``sampler``.

    For inputs smooth at the step scale this converges to step^2/12, the
    uniform-error model the budget solver assumes.
    """
    if n < 10_000:
        raise ValidationError(f"need n >= 10000 samples for a stable moment, got {n}")
    if step <= 0:
        raise ValidationError(f"step must be > 0, got {step}")
    rng = np.random.default_rng(seed)
    x = np.asarray(sampler(rng, n), dtype=np.float64)
    err = quantize_values(x, step) - x
    return float(np.mean(err * err))
