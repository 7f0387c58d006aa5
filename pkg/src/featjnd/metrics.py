"""Distortion-strength and similarity metrics.

NRMSE is the distortion budget axis used everywhere in this package:

    nrmse(f, f~) = ||f~ - f||_2 / (||f||_2 + eps)

Cosine similarity is an auxiliary alignment descriptor only; for a
perturbation exactly orthogonal to the feature, the measured cosine equals
1 / sqrt(1 + r^2) with r the relative distortion magnitude.  All reductions
accumulate in float64 so the analytic identities can serve as exact test
oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .features import FeaturePyramid, as_array, require_same_shape

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class DistortionReading:
    """One clean/distorted comparison: magnitude ratio, energy ratio, alignment."""

    nrmse: float
    nmse: float
    cosine: float


def _as64(t) -> np.ndarray:
    return as_array(t).astype(np.float64, copy=False)


def nrmse(f, f_tilde, eps: float = DEFAULT_EPS) -> float:
    """Normalized root mean square error ||f~ - f|| / (||f|| + eps)."""
    require_same_shape(f, f_tilde, "nrmse")
    a, b = _as64(f), _as64(f_tilde)
    return float(np.linalg.norm((b - a).ravel()) / (np.linalg.norm(a.ravel()) + eps))


def nmse(f, f_tilde, eps: float = DEFAULT_EPS) -> float:
    """Relative error energy ||f~ - f||^2 / (||f||^2 + eps); equals nrmse^2 at eps=0."""
    require_same_shape(f, f_tilde, "nmse")
    a, b = _as64(f), _as64(f_tilde)
    d = (b - a).ravel()
    return float(np.dot(d, d) / (np.dot(a.ravel(), a.ravel()) + eps))


def cosine(f, f_tilde) -> float:
    """Cosine similarity <f, f~> / (||f|| ||f~||) over all elements."""
    require_same_shape(f, f_tilde, "cosine")
    a, b = _as64(f).ravel(), _as64(f_tilde).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine undefined for a zero-norm input")
    return float(np.dot(a, b) / (na * nb))


def orthogonal_cosine_prediction(r: float) -> float:
    """Cosine of (f, f+e) for e ⟂ f with relative magnitude r: 1/sqrt(1+r^2)."""
    if r < 0:
        raise ValueError(f"relative magnitude must be >= 0, got {r}")
    return 1.0 / math.sqrt(1.0 + r * r)


def reading(f, f_tilde, eps: float = DEFAULT_EPS) -> DistortionReading:
    """Bundle nrmse/nmse/cosine for one clean/distorted pair."""
    return DistortionReading(
        nrmse=nrmse(f, f_tilde, eps),
        nmse=nmse(f, f_tilde, eps),
        cosine=cosine(f, f_tilde),
    )


def pyramid_nrmse(p: FeaturePyramid, p_tilde: FeaturePyramid, eps: float = DEFAULT_EPS) -> float:
    """Arithmetic mean of per-level nrmse; level structure must match."""
    if p.level_ids != p_tilde.level_ids:
        raise DegenerateInputError(
            f"pyramid level ids differ: {p.level_ids} vs {p_tilde.level_ids}"
        )
    per_level = [nrmse(a, b, eps) for a, b in zip(p.levels, p_tilde.levels)]
    return float(np.mean(per_level))
